// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynadepth/graph.hpp"
#include "dynadepth/kernels.hpp"
#include "dynadepth/rng.hpp"
#include "dynadepth/routing.hpp"
#include "dynadepth/tensor.hpp"
#include "dynadepth/tokenizer.hpp"

namespace dynadepth {

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = ByteTokenizer::kVocabSize;
  std::size_t max_context = 256;
  double layer_norm_eps = 1e-5;

  std::size_t head_dim() const { return hidden_dim / num_heads; }

  void validate() const {
    if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0) {
      throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw std::invalid_argument("model config: hidden_dim " + std::to_string(hidden_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (max_context < 2) throw std::invalid_argument("model config: max_context must be >= 2");
    if (!(layer_norm_eps > 0.0)) throw std::invalid_argument("model config: layer_norm_eps must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named tensors in a fixed insertion order.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  Tensor& at(const std::string& name) { return tensors_[index_of(name)]; }
  const Tensor& at(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& at(std::size_t i) { return tensors_.at(i); }
  const Tensor& at(std::size_t i) const { return tensors_.at(i); }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t size() const noexcept { return tensors_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  bool same_values(const ParameterSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (!tensors_[i].same_values(other.tensors_[i])) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Prompt x_{1:p} followed by generated tokens y_{1:t}.
struct SequenceState {
  std::vector<std::size_t> prompt;
  std::vector<std::size_t> generated;

  std::vector<std::size_t> tokens() const {
    std::vector<std::size_t> all = prompt;
    all.insert(all.end(), generated.begin(), generated.end());
    return all;
  }
  std::size_t size() const { return prompt.size() + generated.size(); }
};

enum class KvProvenance : std::uint8_t { Absent, Computed, Filled };

/// Per-layer, per-position key/value entries with provenance.
class KVCache {
 public:
  KVCache() = default;
  explicit KVCache(const ModelConfig& cfg)
      : layers_(cfg.num_layers), capacity_(cfg.max_context), dim_(cfg.hidden_dim),
        keys_(layers_ * capacity_ * dim_, 0.0), values_(layers_ * capacity_ * dim_, 0.0),
        provenance_(layers_ * capacity_, KvProvenance::Absent) {}

  std::size_t num_layers() const noexcept { return layers_; }
  std::size_t capacity() const noexcept { return capacity_; }
  /// Number of positions that have been processed.
  std::size_t length() const noexcept { return length_; }
  void advance() {
    if (length_ >= capacity_) throw std::length_error("kv cache is full");
    ++length_;
  }

  /// layer is 1-based.
  void store(std::size_t layer, std::size_t pos, std::span<const double> key,
             std::span<const double> value, KvProvenance prov) {
    const std::size_t off = offset(layer, pos);
    std::copy(key.begin(), key.end(), keys_.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(value.begin(), value.end(), values_.begin() + static_cast<std::ptrdiff_t>(off));
    provenance_[slot(layer, pos)] = prov;
  }

  std::span<const double> key(std::size_t layer, std::size_t pos) const {
    return {keys_.data() + offset(layer, pos), dim_};
  }
  std::span<const double> value(std::size_t layer, std::size_t pos) const {
    return {values_.data() + offset(layer, pos), dim_};
  }
  KvProvenance provenance(std::size_t layer, std::size_t pos) const {
    return provenance_[slot(layer, pos)];
  }

  /// Entries with the given provenance among processed positions.
  std::size_t count(KvProvenance prov) const {
    std::size_t n = 0;
    for (std::size_t l = 1; l <= layers_; ++l) {
      for (std::size_t p = 0; p < length_; ++p) n += provenance(l, p) == prov;
    }
    return n;
  }

 private:
  std::size_t layers_ = 0, capacity_ = 0, dim_ = 0, length_ = 0;
  std::vector<double> keys_, values_;
  std::vector<KvProvenance> provenance_;

  std::size_t slot(std::size_t layer, std::size_t pos) const {
    if (layer < 1 || layer > layers_ || pos >= capacity_) {
      throw std::out_of_range("kv cache slot (layer " + std::to_string(layer) + ", pos " +
                              std::to_string(pos) + ")");
    }
    return (layer - 1) * capacity_ + pos;
  }
  std::size_t offset(std::size_t layer, std::size_t pos) const { return slot(layer, pos) * dim_; }
};

/// Post-layer hidden states h^0..h^L for one position.
struct HiddenTrace {
  std::vector<std::vector<double>> states;
  const std::vector<double>& at(std::size_t layer) const { return states.at(layer); }
  std::size_t num_layers() const { return states.empty() ? 0 : states.size() - 1; }
};

/// Decides, layer by layer, whether a routed step executes each layer.
class StepRouter {
 public:
  virtual ~StepRouter() = default;
  /// Called once before each autoregressive step.
  virtual void begin_step() {}
  /// layer is 1-based; h_prev is h^{layer-1}.
  virtual bool execute(std::size_t layer, std::span<const double> h_prev) = 0;
};

class MaskRouter : public StepRouter {
 public:
  explicit MaskRouter(RouteMask mask) : mask_(std::move(mask)) {}
  bool execute(std::size_t layer, std::span<const double>) override { return mask_.executes(layer); }

 private:
  RouteMask mask_;
};

class PlanRouter : public StepRouter {
 public:
  PlanRouter(const RoutePlan& plan, std::uint64_t stream_id) : sampler_(plan, stream_id) {}
  void begin_step() override { current_ = sampler_.next(); }
  bool execute(std::size_t layer, std::span<const double>) override {
    if (current_.bits.empty()) begin_step();
    return current_.executes(layer);
  }

 private:
  MaskSampler sampler_;
  RouteMask current_;
};

struct StepOutput {
  HiddenTrace trace;
  std::vector<double> probs;
  RouteMask mask;
};

struct StepRecord {
  std::size_t position = 0;
  std::size_t input_token = 0;
  std::size_t output_token = 0;
  bool routed = false;
  RouteMask mask;
  HiddenTrace trace;
};

struct GenerateOptions {
  std::size_t max_new = 32;
  bool sample = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// When set, routed steps consume these tokens instead of the model's own
  /// predictions (teacher forcing); generation length is forced->size().
  const std::vector<std::size_t>* forced = nullptr;
};

struct GenerationResult {
  std::vector<std::size_t> generated;
  bool hit_eos = false;
  std::vector<StepRecord> steps;
  KVCache cache;

  /// Steps that consumed a generated token (the ones routing applies to).
  std::vector<const StepRecord*> routed_steps() const {
    std::vector<const StepRecord*> out;
    for (const auto& s : steps) {
      if (s.routed) out.push_back(&s);
    }
    return out;
  }
};

/// Graph node ids for bound model parameters.
struct GraphParams {
  std::map<std::string, NodeId> ids;
  NodeId operator()(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw std::out_of_range("parameter '" + name + "' not bound in graph");
    return it->second;
  }
};

/// Trainable tensors become parameter leaves; otherwise constants.
inline GraphParams bind_parameters(Graph& g, const ParameterSet& ps, bool trainable,
                                   GraphParams into = {}) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names()[i];
    into.ids[name] = trainable ? g.parameter(name, ps.at(i)) : g.constant(ps.at(i));
  }
  return into;
}

/// How a layer participates in a differentiable sequence forward.
struct GraphGate {
  enum class Kind { Execute, Skip, Scaled };
  Kind kind = Kind::Execute;
  /// For Scaled: per-row gate g [n x 1]; output is h + g * (d(h) - h).
  NodeId scale = 0;
};

using GraphGateFn = std::function<GraphGate(std::size_t layer, Graph&, NodeId h_prev)>;

struct SequenceGraph {
  NodeId logits = 0;
  /// h^0..h^L nodes, each [n x d].
  std::vector<NodeId> hidden;
};

inline std::string layer_param(std::size_t layer, const char* leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

/// Pre-norm decoder-only transformer with learned positional embeddings.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_rng(seed, 0x30de1);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto randn = [&](Shape s) {
      Tensor t(std::move(s));
      for (double& v : t.data()) v = normal(rng);
      return t;
    };
    const std::size_t d = cfg_.hidden_dim, f = cfg_.ffn_dim;
    params_.add("tok_embed", randn({cfg_.vocab_size, d}));
    params_.add("pos_embed", randn({cfg_.max_context, d}));
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      params_.add(layer_param(l, "ln1.gamma"), Tensor({d}, 1.0));
      params_.add(layer_param(l, "ln1.beta"), Tensor({d}, 0.0));
      params_.add(layer_param(l, "attn.wq"), randn({d, d}));
      params_.add(layer_param(l, "attn.bq"), Tensor({d}, 0.0));
      // No key bias: it shifts every score in a softmax row equally.
      params_.add(layer_param(l, "attn.wk"), randn({d, d}));
      params_.add(layer_param(l, "attn.wv"), randn({d, d}));
      params_.add(layer_param(l, "attn.bv"), Tensor({d}, 0.0));
      params_.add(layer_param(l, "attn.wo"), randn({d, d}));
      params_.add(layer_param(l, "attn.bo"), Tensor({d}, 0.0));
      params_.add(layer_param(l, "ln2.gamma"), Tensor({d}, 1.0));
      params_.add(layer_param(l, "ln2.beta"), Tensor({d}, 0.0));
      params_.add(layer_param(l, "ffn.w1"), randn({d, f}));
      params_.add(layer_param(l, "ffn.b1"), Tensor({f}, 0.0));
      params_.add(layer_param(l, "ffn.w2"), randn({f, d}));
      params_.add(layer_param(l, "ffn.b2"), Tensor({d}, 0.0));
    }
    params_.add("final_ln.gamma", Tensor({d}, 1.0));
    params_.add("final_ln.beta", Tensor({d}, 0.0));
    params_.add("head.w", randn({d, cfg_.vocab_size}));
    params_.add("head.b", Tensor({cfg_.vocab_size}, 0.0));
    index_layers();
  }

  /// Adopts existing parameters; names and shapes must match the config.
  Model(ModelConfig cfg, ParameterSet params) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Model reference(cfg_, 0);
    if (params.names() != reference.params_.names()) {
      throw std::invalid_argument("parameter names do not match model config");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params.at(i).shape() != reference.params_.at(i).shape()) {
        throw ShapeError("model", "tensor '" + params.names()[i] + "' has shape " +
                                      shape_str(params.at(i).shape()) + ", config expects " +
                                      shape_str(reference.params_.at(i).shape()));
      }
    }
    params_ = std::move(params);
    index_layers();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParameterSet& params() const noexcept { return params_; }
  ParameterSet& params() noexcept { return params_; }

  /// Token plus positional embedding for one position.
  std::vector<double> embed_position(std::size_t token, std::size_t pos) const {
    check_token(token);
    if (pos >= cfg_.max_context) {
      throw std::length_error("position " + std::to_string(pos) + " exceeds max_context " +
                              std::to_string(cfg_.max_context));
    }
    const std::size_t d = cfg_.hidden_dim;
    const Tensor& tok = params_.at(tok_embed_);
    const Tensor& posm = params_.at(pos_embed_);
    std::vector<double> h(d);
    for (std::size_t i = 0; i < d; ++i) h[i] = tok[token * d + i] + posm[pos * d + i];
    return h;
  }

  /// h^0 for every position of the sequence, [n x d].
  Tensor embed(const SequenceState& s) const {
    const auto toks = s.tokens();
    if (toks.size() > cfg_.max_context) {
      throw std::length_error("sequence length " + std::to_string(toks.size()) +
                              " exceeds max_context " + std::to_string(cfg_.max_context));
    }
    Tensor out({toks.size(), cfg_.hidden_dim});
    for (std::size_t p = 0; p < toks.size(); ++p) {
      const auto h = embed_position(toks[p], p);
      std::copy(h.begin(), h.end(), out.raw() + p * cfg_.hidden_dim);
    }
    return out;
  }

  /// Processes the last position of s. Executed layers write computed KV
  /// entries; skipped layers leave theirs for fill_missing_kv.
  StepOutput routed_forward(const SequenceState& s, StepRouter& router, KVCache& cache) const {
    const std::size_t pos = begin_position(s, cache);
    StepOutput out;
    out.mask = RouteMask::all(cfg_.num_layers, false);
    out.trace.states.reserve(cfg_.num_layers + 1);
    out.trace.states.push_back(embed_position(last_token(s), pos));
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      const auto& h_prev = out.trace.states.back();
      if (router.execute(l, h_prev)) {
        out.mask.bits[l - 1] = 1;
        out.trace.states.push_back(block_forward(l, h_prev, pos, cache));
      } else {
        out.trace.states.push_back(h_prev);
      }
    }
    out.probs = head(out.trace.states.back());
    cache.advance();
    return out;
  }

  StepOutput routed_forward(const SequenceState& s, const RouteMask& mask, KVCache& cache) const {
    if (mask.size() != cfg_.num_layers) {
      throw std::invalid_argument("route mask has " + std::to_string(mask.size()) + " bits, model has " +
                                  std::to_string(cfg_.num_layers) + " layers");
    }
    MaskRouter router(mask);
    return routed_forward(s, router, cache);
  }

  /// Unrouted forward of the last position.
  StepOutput forward(const SequenceState& s, KVCache& cache) const {
    const std::size_t pos = begin_position(s, cache);
    StepOutput out;
    out.mask = RouteMask::all(cfg_.num_layers);
    out.trace.states.reserve(cfg_.num_layers + 1);
    out.trace.states.push_back(embed_position(last_token(s), pos));
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      out.trace.states.push_back(block_forward(l, out.trace.states.back(), pos, cache));
    }
    out.probs = head(out.trace.states.back());
    cache.advance();
    return out;
  }

  /// For each skipped layer l at the newest position, projects h^{l*} through
  /// layer l's own input norm and key/value maps, where l* is the nearest
  /// executed layer below l (0 = embedding).
  void fill_missing_kv(KVCache& cache, const HiddenTrace& trace, const RouteMask& mask) const {
    if (cache.length() == 0) return;
    if (trace.num_layers() != cfg_.num_layers || mask.size() != cfg_.num_layers) {
      throw std::invalid_argument("fill_missing_kv: trace/mask do not match model depth");
    }
    const std::size_t pos = cache.length() - 1;
    std::size_t nearest = 0;
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      if (mask.executes(l)) {
        nearest = l;
        continue;
      }
      if (cache.provenance(l, pos) != KvProvenance::Absent) continue;
      const auto [k, v] = project_kv(l, trace.at(nearest));
      cache.store(l, pos, k, v, KvProvenance::Filled);
    }
  }

  /// Autoregressive decoding. The prompt always runs through every layer;
  /// the router only applies to steps whose input is a generated token.
  GenerationResult generate(const std::vector<std::size_t>& prompt, StepRouter& router,
                            const GenerateOptions& opts) const {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    for (auto t : prompt) check_token(t);
    if (prompt.size() > cfg_.max_context) throw std::length_error("generate: prompt exceeds max_context");
    GenerationResult res;
    res.cache = KVCache(cfg_);
    Rng rng = make_rng(opts.seed, 0x9e4);
    SequenceState s;
    StepOutput last;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
      s.prompt.push_back(prompt[i]);
      last = forward(s, res.cache);
    }
    const std::size_t limit = opts.forced ? opts.forced->size() : opts.max_new;
    std::size_t next = pick(last.probs, opts, rng);
    res.steps.push_back({prompt.size() - 1, prompt.back(), next, false, std::move(last.mask),
                         std::move(last.trace)});
    for (std::size_t t = 0; t < limit; ++t) {
      const std::size_t input = opts.forced ? (*opts.forced)[t] : next;
      if (!opts.forced) {
        if (input == ByteTokenizer::kEos) {
          res.hit_eos = true;
          break;
        }
        res.generated.push_back(input);
        if (res.generated.size() >= opts.max_new) break;
      } else {
        res.generated.push_back(input);
      }
      if (s.size() >= cfg_.max_context) break;
      s.generated.push_back(input);
      router.begin_step();
      StepOutput step = routed_forward(s, router, res.cache);
      fill_missing_kv(res.cache, step.trace, step.mask);
      next = pick(step.probs, opts, rng);
      res.steps.push_back({s.size() - 1, input, next, true, std::move(step.mask), std::move(step.trace)});
    }
    if (!opts.forced && !res.hit_eos && res.generated.size() < opts.max_new &&
        next == ByteTokenizer::kEos) {
      res.hit_eos = true;
    }
    return res;
  }

  GenerationResult generate(const std::vector<std::size_t>& prompt, const RoutePlan& plan,
                            std::size_t max_new, std::uint64_t seed) const {
    PlanRouter router(plan, seed);
    GenerateOptions opts;
    opts.max_new = max_new;
    opts.seed = seed;
    return generate(prompt, router, opts);
  }

  /// Differentiable forward of a whole token sequence with causal attention.
  /// Without a gate function every layer executes.
  SequenceGraph build_graph(Graph& g, const GraphParams& p, const std::vector<std::size_t>& tokens,
                            const GraphGateFn& gate = {}) const {
    const std::size_t n = tokens.size();
    if (n == 0) throw std::invalid_argument("build_graph: empty sequence");
    if (n > cfg_.max_context) throw std::length_error("build_graph: sequence exceeds max_context");
    for (auto t : tokens) check_token(t);
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    SequenceGraph out;
    NodeId h = g.add(g.embedding(p("tok_embed"), tokens), g.embedding(p("pos_embed"), positions));
    out.hidden.push_back(h);

    Tensor mask({n, n}, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = r + 1; c < n; ++c) mask.at(r, c) = -std::numeric_limits<double>::infinity();
    }
    const NodeId causal = g.constant(std::move(mask));

    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      const GraphGate gg = gate ? gate(l, g, h) : GraphGate{};
      if (gg.kind == GraphGate::Kind::Skip) {
        out.hidden.push_back(h);
        continue;
      }
      const NodeId block = block_graph(g, p, l, h, causal);
      if (gg.kind == GraphGate::Kind::Execute) {
        h = block;
      } else {
        h = g.add(h, g.scale_rows(g.sub(block, h), gg.scale));
      }
      out.hidden.push_back(h);
    }
    const NodeId normed = affine_norm(g, h, p("final_ln.gamma"), p("final_ln.beta"));
    out.logits = g.add(g.matmul(normed, p("head.w")), p("head.b"));
    return out;
  }

 private:
  struct LayerIndex {
    std::size_t ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<LayerIndex> layers_;
  std::size_t tok_embed_ = 0, pos_embed_ = 0, final_g_ = 0, final_b_ = 0, head_w_ = 0, head_b_ = 0;

  void index_layers() {
    layers_.clear();
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      auto ix = [&](const char* leaf) { return params_.index_of(layer_param(l, leaf)); };
      layers_.push_back({ix("ln1.gamma"), ix("ln1.beta"), ix("attn.wq"), ix("attn.bq"), ix("attn.wk"),
                         ix("attn.wv"), ix("attn.bv"), ix("attn.wo"), ix("attn.bo"),
                         ix("ln2.gamma"), ix("ln2.beta"), ix("ffn.w1"), ix("ffn.b1"), ix("ffn.w2"),
                         ix("ffn.b2")});
    }
    tok_embed_ = params_.index_of("tok_embed");
    pos_embed_ = params_.index_of("pos_embed");
    final_g_ = params_.index_of("final_ln.gamma");
    final_b_ = params_.index_of("final_ln.beta");
    head_w_ = params_.index_of("head.w");
    head_b_ = params_.index_of("head.b");
  }

  void check_token(std::size_t token) const {
    if (token >= cfg_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(token) + " >= vocab_size " +
                              std::to_string(cfg_.vocab_size));
    }
  }

  static std::size_t last_token(const SequenceState& s) {
    if (s.size() == 0) throw std::invalid_argument("empty sequence");
    return s.generated.empty() ? s.prompt.back() : s.generated.back();
  }

  std::size_t begin_position(const SequenceState& s, const KVCache& cache) const {
    if (s.prompt.empty()) throw std::invalid_argument("sequence has an empty prompt");
    const std::size_t pos = s.size() - 1;
    if (cache.num_layers() != cfg_.num_layers) throw std::invalid_argument("kv cache built for another model");
    if (cache.length() != pos) {
      throw std::logic_error("kv cache holds " + std::to_string(cache.length()) +
                             " positions but the step is at position " + std::to_string(pos));
    }
    return pos;
  }

  static constexpr std::size_t kNoBias = static_cast<std::size_t>(-1);

  // y = (x W + b) for a single row.
  std::vector<double> linear(std::span<const double> x, std::size_t w, std::size_t b) const {
    const Tensor& W = params_.at(w);
    std::vector<double> y(W.dim(1));
    kernels::matmul(x, W.data(), y, 1, W.dim(0), W.dim(1));
    if (b == kNoBias) return y;
    const Tensor& B = params_.at(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
    return y;
  }

  std::vector<double> norm(std::span<const double> x, std::size_t gamma, std::size_t beta) const {
    std::vector<double> y(x.size());
    double rstd = 0.0;
    kernels::layer_norm_rows(x, y, std::span<double>(&rstd, 1), 1, x.size(), cfg_.layer_norm_eps);
    const Tensor& G = params_.at(gamma);
    const Tensor& B = params_.at(beta);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * G[i] + B[i];
    return y;
  }

  std::pair<std::vector<double>, std::vector<double>> project_kv(std::size_t l,
                                                                 std::span<const double> h) const {
    const LayerIndex& L = layers_[l - 1];
    const auto a = norm(h, L.ln1_g, L.ln1_b);
    return {linear(a, L.wk, kNoBias), linear(a, L.wv, L.bv)};
  }

  std::vector<double> block_forward(std::size_t l, std::span<const double> h, std::size_t pos,
                                    KVCache& cache) const {
    const LayerIndex& L = layers_[l - 1];
    const std::size_t d = cfg_.hidden_dim, dh = cfg_.head_dim();
    const auto a = norm(h, L.ln1_g, L.ln1_b);
    const auto q = linear(a, L.wq, L.bq);
    cache.store(l, pos, linear(a, L.wk, kNoBias), linear(a, L.wv, L.bv), KvProvenance::Computed);

    for (std::size_t j = 0; j < pos; ++j) {
      if (cache.provenance(l, j) == KvProvenance::Absent) {
        throw std::logic_error("layer " + std::to_string(l) + " attends to position " + std::to_string(j) +
                               " which has no kv entry");
      }
    }
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> attn(d, 0.0), scores(pos + 1), probs(pos + 1);
    for (std::size_t hd = 0; hd < cfg_.num_heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t j = 0; j <= pos; ++j) {
        const auto k = cache.key(l, j);
        double dot = 0.0;
        for (std::size_t i = 0; i < dh; ++i) dot += q[off + i] * k[off + i];
        scores[j] = dot * inv_scale;
      }
      kernels::softmax_rows(scores, probs, 1, pos + 1);
      for (std::size_t j = 0; j <= pos; ++j) {
        const auto v = cache.value(l, j);
        for (std::size_t i = 0; i < dh; ++i) attn[off + i] += probs[j] * v[off + i];
      }
    }
    const auto o = linear(attn, L.wo, L.bo);
    std::vector<double> x1(d);
    for (std::size_t i = 0; i < d; ++i) x1[i] = h[i] + o[i];
    const auto b = norm(x1, L.ln2_g, L.ln2_b);
    auto f = linear(b, L.w1, L.b1);
    for (double& v : f) v = kernels::gelu(v);
    const auto f2 = linear(f, L.w2, L.b2);
    for (std::size_t i = 0; i < d; ++i) x1[i] += f2[i];
    return x1;
  }

  std::vector<double> head(std::span<const double> h) const {
    const auto x = norm(h, final_g_, final_b_);
    const auto logits = linear(x, head_w_, head_b_);
    std::vector<double> probs(logits.size());
    kernels::softmax_rows(logits, probs, 1, logits.size());
    return probs;
  }

  static std::size_t pick(const std::vector<double>& probs, const GenerateOptions& opts, Rng& rng) {
    if (!opts.sample) return kernels::argmax(probs);
    if (!(opts.temperature > 0.0)) throw std::invalid_argument("sampling temperature must be > 0");
    std::vector<double> w(probs.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(probs[i], 1.0 / opts.temperature);
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return dist(rng);
  }

  NodeId affine_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta) const {
    return g.add(g.multiply(g.layer_norm(x, cfg_.layer_norm_eps), gamma), beta);
  }

  NodeId block_graph(Graph& g, const GraphParams& p, std::size_t l, NodeId h, NodeId causal) const {
    auto P = [&](const char* leaf) { return p(layer_param(l, leaf)); };
    const std::size_t dh = cfg_.head_dim();
    const NodeId a = g.add(g.multiply(g.layer_norm(h, cfg_.layer_norm_eps), P("ln1.gamma")), P("ln1.beta"));
    const NodeId q = g.add(g.matmul(a, P("attn.wq")), P("attn.bq"));
    const NodeId k = g.matmul(a, P("attn.wk"));
    const NodeId v = g.add(g.matmul(a, P("attn.wv")), P("attn.bv"));
    std::vector<NodeId> heads;
    for (std::size_t hd = 0; hd < cfg_.num_heads; ++hd) {
      const NodeId qh = g.slice(q, 1, hd * dh, (hd + 1) * dh);
      const NodeId kh = g.slice(k, 1, hd * dh, (hd + 1) * dh);
      const NodeId vh = g.slice(v, 1, hd * dh, (hd + 1) * dh);
      const NodeId scores =
          g.add(g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))), causal);
      heads.push_back(g.matmul(g.softmax(scores), vh));
    }
    const NodeId o = g.add(g.matmul(g.concat(heads, 1), P("attn.wo")), P("attn.bo"));
    const NodeId x1 = g.add(h, o);
    const NodeId b = g.add(g.multiply(g.layer_norm(x1, cfg_.layer_norm_eps), P("ln2.gamma")), P("ln2.beta"));
    const NodeId f = g.gelu(g.add(g.matmul(b, P("ffn.w1")), P("ffn.b1")));
    return g.add(x1, g.add(g.matmul(f, P("ffn.w2")), P("ffn.b2")));
  }
};

}  // namespace dynadepth
