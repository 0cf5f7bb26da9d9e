// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynadepth/controller.hpp"
#include "dynadepth/corpus.hpp"
#include "dynadepth/evaluation.hpp"
#include "dynadepth/graph.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/optim.hpp"
#include "dynadepth/rng.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/tokenizer.hpp"

namespace dynadepth {

struct TrainConfig {
  double learning_rate = 2e-3;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 3;
  /// Hard cap on optimizer steps; 0 means max_epochs decides.
  std::size_t max_steps = 0;
  /// Evaluations without improvement before stopping; 0 disables early stopping.
  std::size_t patience = 1;
  /// Evaluation interval as a fraction of an epoch.
  double eval_every = 1.0 / 3.0;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  double layerdrop_prob = 0.0;
  AdamWConfig adamw;
  std::size_t eval_max_new = 24;
  /// Validation examples used per evaluation; 0 means all.
  std::size_t eval_limit = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (max_epochs == 0 && max_steps == 0) throw std::invalid_argument("need max_epochs or max_steps");
    if (!(eval_every > 0.0 && eval_every <= 1.0)) throw std::invalid_argument("eval_every must be in (0, 1]");
    if (!(layerdrop_prob >= 0.0 && layerdrop_prob < 1.0)) {
      throw std::invalid_argument("layerdrop_prob must be in [0, 1)");
    }
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(std::size_t step)
      : std::runtime_error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct LogRow {
  std::size_t step = 0;
  std::string split;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double rouge_l = std::numeric_limits<double>::quiet_NaN();
  double mean_cost = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<LogRow> rows;

  std::string csv() const {
    auto cell = [](double v) { return std::isnan(v) ? std::string() : text::num(v); };
    std::ostringstream os;
    for (const auto& [k, v] : meta) os << "# " << k << '=' << v << '\n';
    os << "step,split,loss,rouge_l,mean_cost\n";
    for (const auto& r : rows) {
      os << r.step << ',' << r.split << ',' << cell(r.loss) << ',' << cell(r.rouge_l) << ',' << cell(r.mean_cost)
         << '\n';
    }
    return os.str();
  }
};

struct TrainResult {
  TrainLog log;
  std::size_t steps = 0;
  std::size_t evals = 0;
  std::optional<std::size_t> best_step;
  double best_score = -std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  /// LayerDrop: dropped layers per step.
  std::vector<std::vector<std::size_t>> dropped;
};

/// Token ids for one training example: [BOS] prompt label [EOS].
struct TokenizedExample {
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> targets;
  /// p = 1 + prompt bytes. Rows >= p - 1 carry loss, rows >= p are routed.
  std::size_t prompt_len = 0;

  std::size_t rows() const { return inputs.size(); }
  bool loss_row(std::size_t i) const { return i + 1 >= prompt_len; }
  bool gated_row(std::size_t i) const { return i >= prompt_len; }
  std::size_t loss_rows() const { return rows() + 1 - prompt_len; }
  std::size_t gated_rows() const { return rows() - prompt_len; }
};

inline TokenizedExample tokenize_example(const Example& ex, std::size_t max_context) {
  auto full = ByteTokenizer::encode_prompt(ex.prompt);
  TokenizedExample t;
  t.prompt_len = full.size();
  for (auto id : ByteTokenizer::encode(ex.label)) full.push_back(id);
  full.push_back(ByteTokenizer::kEos);
  if (full.size() - 1 > max_context) {
    throw std::length_error("example '" + ex.id + "' has " + std::to_string(full.size() - 1) +
                            " input tokens, max_context is " + std::to_string(max_context));
  }
  t.inputs.assign(full.begin(), full.end() - 1);
  t.targets.assign(full.begin() + 1, full.end());
  return t;
}

/// Draws the set of dropped layers per batch; layers 1 and L are never dropped.
class LayerDropSampler {
 public:
  LayerDropSampler(std::size_t num_layers, double prob, std::uint64_t seed)
      : num_layers_(num_layers), prob_(prob), rng_(make_rng(seed, 0x1d)) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    std::bernoulli_distribution drop(prob_);
    for (std::size_t l = 2; l < num_layers_; ++l) {
      if (drop(rng_)) out.push_back(l);
    }
    return out;
  }

 private:
  std::size_t num_layers_;
  double prob_;
  Rng rng_;
};

using GradMap = std::map<std::string, std::vector<double>>;

namespace detail {

inline void add_grads(GradMap& acc, const std::map<std::string, Tensor>& g) {
  for (const auto& [name, t] : g) {
    auto& dst = acc[name];
    if (dst.empty()) dst.assign(t.numel(), 0.0);
    for (std::size_t i = 0; i < t.numel(); ++i) dst[i] += t[i];
  }
}

inline GradMap only_prefix(const GradMap& g, const std::string& prefix, bool keep) {
  GradMap out;
  for (const auto& [name, v] : g) {
    if ((name.rfind(prefix, 0) == 0) == keep) out.emplace(name, v);
  }
  return out;
}

/// Constant [n x V] with -weight on each loss row's target column.
inline Tensor target_weights(const TokenizedExample& t, std::size_t vocab, double weight) {
  Tensor w({t.rows(), vocab}, 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    if (t.loss_row(i)) w.at(i, t.targets[i]) = -weight;
  }
  return w;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = make_rng(seed, 0xe90c0000ull + epoch);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(idx[i - 1], idx[d(rng)]);
  }
  return idx;
}

/// Shared optimization schedule: batches, evaluation cadence, early stopping.
struct LoopHooks {
  /// Runs one optimizer step on the given example indices; returns the batch loss.
  std::function<double(std::size_t step, const std::vector<std::size_t>& batch, double lr)> step;
  /// Returns (score to maximize, log row fields).
  std::function<std::pair<double, LogRow>(std::size_t step)> eval;
  std::function<void()> snapshot;
  std::function<void()> restore;
};

inline TrainResult run_loop(const TrainConfig& cfg, std::size_t n_train, const LoopHooks& hooks) {
  if (n_train == 0) throw std::invalid_argument("training corpus is empty");
  const std::size_t per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = cfg.max_epochs * per_epoch;
  if (cfg.max_steps && (total == 0 || cfg.max_steps < total)) total = cfg.max_steps;
  const auto interval = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.eval_every * static_cast<double>(per_epoch))));
  TrainResult res;
  std::size_t bad = 0;
  std::vector<std::size_t> order;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t epoch = step / per_epoch, k = step % per_epoch;
    if (k == 0) order = shuffled(n_train, cfg.seed, epoch);
    const std::size_t b0 = k * cfg.batch_size, b1 = std::min(n_train, b0 + cfg.batch_size);
    const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                         order.begin() + static_cast<std::ptrdiff_t>(b1));
    const double lr = linear_decay(cfg.learning_rate, step, total);
    const double loss = hooks.step(step + 1, batch, lr);
    if (!std::isfinite(loss)) throw TrainingDiverged(step + 1);
    LogRow row;
    row.step = step + 1;
    row.split = "train";
    row.loss = loss;
    res.log.rows.push_back(row);
    res.steps = step + 1;
    if ((step + 1) % interval == 0 || step + 1 == total) {
      auto [score, ev] = hooks.eval(step + 1);
      ev.step = step + 1;
      ev.split = "val";
      res.log.rows.push_back(ev);
      ++res.evals;
      if (score > res.best_score) {
        res.best_score = score;
        res.best_step = step + 1;
        bad = 0;
        hooks.snapshot();
      } else if (cfg.patience > 0 && ++bad >= cfg.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }
  if (res.best_step) hooks.restore();
  return res;
}

inline std::vector<Example> eval_subset(const std::vector<Example>& val, std::size_t limit) {
  if (limit == 0 || limit >= val.size()) return val;
  return std::vector<Example>(val.begin(), val.begin() + static_cast<std::ptrdiff_t>(limit));
}

inline void optimizer_meta(TrainLog& log, const TrainConfig& cfg) {
  log.meta.emplace_back("optimizer", "adamw");
  log.meta.emplace_back("learning_rate", text::num(cfg.learning_rate));
  log.meta.emplace_back("schedule", "linear_decay");
  log.meta.emplace_back("beta1", text::num(cfg.adamw.beta1));
  log.meta.emplace_back("beta2", text::num(cfg.adamw.beta2));
  log.meta.emplace_back("eps", text::num(cfg.adamw.eps));
  log.meta.emplace_back("weight_decay", text::num(cfg.adamw.weight_decay));
  log.meta.emplace_back("batch_size", std::to_string(cfg.batch_size));
  log.meta.emplace_back("seed", std::to_string(cfg.seed));
}

}  // namespace detail

/// Next-token cross-entropy on label rows for one example, scaled by weight.
/// Layers in `dropped` are skipped entirely. Returns (loss value, gradients).
inline std::pair<double, std::map<std::string, Tensor>> sequence_gradients(
    const Model& model, const TokenizedExample& t, double weight, const std::vector<std::size_t>& dropped = {}) {
  Graph g;
  const auto p = bind_parameters(g, model.params(), true);
  GraphGateFn gate;
  if (!dropped.empty()) {
    gate = [&dropped](std::size_t l, Graph&, NodeId) {
      GraphGate gg;
      if (std::find(dropped.begin(), dropped.end(), l) != dropped.end()) gg.kind = GraphGate::Kind::Skip;
      return gg;
    };
  }
  const auto sg = model.build_graph(g, p, t.inputs, gate);
  const NodeId w = g.constant(detail::target_weights(t, model.config().vocab_size, weight));
  const NodeId loss = g.sum(g.multiply(g.log_softmax(sg.logits), w));
  const double value = g.value(loss).item();
  return {value, g.backpropagate(loss)};
}

/// Mean label-token cross-entropy of one example.
inline double sequence_loss(const Model& model, const TokenizedExample& t) {
  return sequence_gradients(model, t, 1.0 / static_cast<double>(t.loss_rows())).first;
}

/// Backbone fine-tuning with prompt-masked loss, AdamW, linear decay and early
/// stopping on validation ROUGE-L. The best parameters are kept in `model`.
inline TrainResult finetune(Model& model, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.train.empty()) throw std::invalid_argument("finetune: empty training split");
  std::vector<TokenizedExample> data;
  for (const auto& ex : corpus.train) data.push_back(tokenize_example(ex, model.config().max_context));
  const auto val = detail::eval_subset(corpus.val, cfg.eval_limit);
  AdamW opt(cfg.adamw);
  LayerDropSampler dropper(model.config().num_layers, cfg.layerdrop_prob, cfg.seed);
  std::optional<ParameterSet> best;
  std::vector<std::vector<std::size_t>> dropped_log;

  detail::LoopHooks hooks;
  hooks.step = [&](std::size_t, const std::vector<std::size_t>& batch, double lr) {
    const auto dropped = dropper.next();
    if (cfg.layerdrop_prob > 0.0) dropped_log.push_back(dropped);
    std::size_t tokens = 0;
    for (auto i : batch) tokens += data[i].loss_rows();
    const double w = 1.0 / static_cast<double>(tokens);
    GradMap acc;
    double loss = 0.0;
    for (auto i : batch) {
      auto [v, grads] = sequence_gradients(model, data[i], w, cfg.layerdrop_prob > 0.0 ? dropped : std::vector<std::size_t>{});
      loss += v;
      detail::add_grads(acc, grads);
    }
    if (std::isfinite(loss) && !cfg.freeze_backbone) opt.step(model.params(), acc, lr);
    return loss;
  };
  hooks.eval = [&](std::size_t) {
    const auto ev = evaluate_generation(model, val, plan_router_factory(RoutePlan::full(model.config().num_layers)),
                                        cfg.eval_max_new);
    LogRow r;
    r.rouge_l = ev.mean_rouge;
    r.mean_cost = static_cast<double>(model.config().num_layers);
    return std::make_pair(ev.mean_rouge, r);
  };
  hooks.snapshot = [&] { best = model.params(); };
  hooks.restore = [&] { model.params() = *best; };

  auto res = detail::run_loop(cfg, data.size(), hooks);
  detail::optimizer_meta(res.log, cfg);
  if (cfg.layerdrop_prob > 0.0) res.log.meta.emplace_back("layerdrop_prob", text::num(cfg.layerdrop_prob));
  res.dropped = std::move(dropped_log);
  return res;
}

/// Fine-tuning with per-batch random layer dropout of non-first, non-last
/// layers. Probability 0 reproduces finetune exactly.
inline TrainResult finetune_layerdrop(Model& model, const Corpus& corpus, const TrainConfig& cfg) {
  return finetune(model, corpus, cfg);
}

enum class ControllerTarget { Teacher, Labels };
enum class KlDirection { Forward, Reverse };

struct ControllerTrainConfig {
  TrainConfig train;
  double alpha = 2.0;
  GumbelConfig gumbel;
  ControllerTarget target = ControllerTarget::Teacher;
  /// Forward: KL(p_hat || p). Reverse: KL(p || p_hat).
  KlDirection direction = KlDirection::Forward;

  void validate() const {
    train.validate();
    gumbel.validate();
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
    if (target == ControllerTarget::Labels && direction == KlDirection::Forward) {
      throw std::invalid_argument("KL(p_hat || one-hot) is infinite; use the reverse direction with label targets");
    }
  }
};

struct ControllerBatchStats {
  double loss = 0.0;
  double kl = 0.0;
  double cost_term = 0.0;
  /// Floor plus realized gate means over routed rows.
  double mean_cost = 0.0;
};

/// Controller objective for one example. Row weights turn sums into
/// batch means: kl_weight per loss row, cost_weight per routed row.
struct ControllerGraph {
  Graph graph;
  NodeId loss = 0;
  NodeId kl = 0;
  NodeId cost = 0;
  std::vector<NodeId> gates;  // [n x 1] realized/relaxed execute column per controlled layer
};

inline std::unique_ptr<ControllerGraph> build_controller_graph(const Model& model, const Controllers& ctl,
                                                               const TokenizedExample& t, const Tensor* teacher_logp,
                                                               const ControllerTrainConfig& cfg, double kl_weight,
                                                               double cost_weight, Rng* noise_rng) {
  auto cg = std::make_unique<ControllerGraph>();
  Graph& g = cg->graph;
  const std::size_t n = t.rows(), V = model.config().vocab_size;
  auto p = bind_parameters(g, model.params(), !cfg.train.freeze_backbone);
  p = bind_parameters(g, ctl.params(), true, std::move(p));

  Tensor prompt_ind({n, 1}, 0.0), label_ind({n, 1}, 0.0), cost_w({n, 1}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (t.gated_row(i)) {
      label_ind[i] = 1.0;
      cost_w[i] = cost_weight;
    } else {
      prompt_ind[i] = 1.0;
    }
  }
  const NodeId prompt_c = g.constant(prompt_ind), label_c = g.constant(label_ind), cost_c = g.constant(cost_w);
  std::vector<NodeId> cost_terms;
  GraphGateFn gate = [&](std::size_t l, Graph& gr, NodeId h_prev) {
    GraphGate gg;
    if (!ctl.controls(l)) return gg;
    Tensor noise({n, 2}, 0.0);
    if (noise_rng) {
      for (double& v : noise.data()) v = gumbel(*noise_rng);
    }
    const NodeId s = ctl.graph_gate(gr, p, l, h_prev, noise, cfg.gumbel);
    const NodeId col = gr.slice(s, 1, 0, 1);
    cg->gates.push_back(col);
    cost_terms.push_back(gr.sum(gr.multiply(col, cost_c)));
    gg.kind = GraphGate::Kind::Scaled;
    gg.scale = gr.add(gr.multiply(col, label_c), prompt_c);
    return gg;
  };
  const auto sg = model.build_graph(g, p, t.inputs, gate);
  const NodeId logp = g.log_softmax(sg.logits);

  Tensor roww({n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) roww[i] = t.loss_row(i) ? kl_weight : 0.0;
  const NodeId roww_c = g.constant(roww);
  if (cfg.target == ControllerTarget::Teacher) {
    if (!teacher_logp || teacher_logp->shape() != Shape{n, V}) throw ShapeError("controller loss", "teacher shape");
    const NodeId tl = g.constant(*teacher_logp);
    if (cfg.direction == KlDirection::Forward) {
      cg->kl = g.sum(g.scale_rows(g.multiply(g.exp(logp), g.sub(logp, tl)), roww_c));
    } else {
      Tensor pt({n, V});
      for (std::size_t i = 0; i < pt.numel(); ++i) pt[i] = std::exp((*teacher_logp)[i]);
      const NodeId ptc = g.constant(std::move(pt));
      cg->kl = g.sum(g.scale_rows(g.multiply(ptc, g.sub(tl, logp)), roww_c));
    }
  } else {
    cg->kl = g.sum(g.multiply(logp, g.constant(detail::target_weights(t, V, kl_weight))));
  }
  NodeId cost = g.constant(Tensor::scalar(0.0));
  for (auto c : cost_terms) cost = g.add(cost, c);
  cg->cost = cost;
  cg->loss = g.add(cg->kl, g.scale(cost, cfg.alpha));
  return cg;
}

/// Full-execution log-probabilities of the current backbone for one example.
inline Tensor teacher_log_probs(const Model& model, const TokenizedExample& t) {
  Graph g;
  const auto p = bind_parameters(g, model.params(), false);
  const auto sg = model.build_graph(g, p, t.inputs);
  return g.value(g.log_softmax(sg.logits));
}

/// Trains skip controllers (and the backbone unless frozen) on the
/// cost-regularized objective. Early stopping uses the same objective on the
/// validation split with noise-free gates.
inline TrainResult train_controllers(Model& model, Controllers& ctl, const Corpus& corpus,
                                     const ControllerTrainConfig& cfg) {
  cfg.validate();
  if (corpus.train.empty()) throw std::invalid_argument("train_controllers: empty training split");
  if (ctl.num_layers() != model.config().num_layers || ctl.hidden_dim() != model.config().hidden_dim) {
    throw std::invalid_argument("controllers do not match the model");
  }
  const std::size_t mc = model.config().max_context;
  std::vector<TokenizedExample> data, val_data;
  for (const auto& ex : corpus.train) data.push_back(tokenize_example(ex, mc));
  const auto val = detail::eval_subset(corpus.val, cfg.train.eval_limit);
  for (const auto& ex : val) val_data.push_back(tokenize_example(ex, mc));
  std::vector<Tensor> teacher, val_teacher;
  if (cfg.target == ControllerTarget::Teacher) {
    for (const auto& t : data) teacher.push_back(teacher_log_probs(model, t));
    for (const auto& t : val_data) val_teacher.push_back(teacher_log_probs(model, t));
  }
  AdamW opt_backbone(cfg.train.adamw), opt_ctl(cfg.train.adamw);
  std::optional<ParameterSet> best_backbone, best_ctl;
  const double floor_cost = static_cast<double>(ctl.floor_cost());

  detail::LoopHooks hooks;
  hooks.step = [&](std::size_t step, const std::vector<std::size_t>& batch, double lr) {
    std::size_t loss_rows = 0, gated_rows = 0;
    for (auto i : batch) {
      loss_rows += data[i].loss_rows();
      gated_rows += data[i].gated_rows();
    }
    const double kw = 1.0 / static_cast<double>(loss_rows);
    const double cw = gated_rows ? 1.0 / static_cast<double>(gated_rows) : 0.0;
    Rng noise = make_rng(cfg.gumbel.seed ^ (cfg.train.seed * 0x9e3779b97f4a7c15ull), step);
    GradMap acc;
    double loss = 0.0;
    for (auto i : batch) {
      auto cg = build_controller_graph(model, ctl, data[i], teacher.empty() ? nullptr : &teacher[i], cfg, kw, cw,
                                       &noise);
      loss += cg->graph.value(cg->loss).item();
      detail::add_grads(acc, cg->graph.backpropagate(cg->loss));
    }
    if (std::isfinite(loss)) {
      opt_ctl.step(ctl.params(), detail::only_prefix(acc, "controller.", true), lr);
      if (!cfg.train.freeze_backbone) opt_backbone.step(model.params(), detail::only_prefix(acc, "controller.", false), lr);
    }
    return loss;
  };
  hooks.eval = [&](std::size_t) {
    std::size_t loss_rows = 0, gated_rows = 0;
    for (const auto& t : val_data) {
      loss_rows += t.loss_rows();
      gated_rows += t.gated_rows();
    }
    double objective = 0.0;
    if (!val_data.empty()) {
      const double kw = 1.0 / static_cast<double>(loss_rows);
      const double cw = gated_rows ? 1.0 / static_cast<double>(gated_rows) : 0.0;
      ControllerTrainConfig det = cfg;
      det.gumbel.hard_forward = true;
      for (std::size_t i = 0; i < val_data.size(); ++i) {
        auto cg = build_controller_graph(model, ctl, val_data[i], val_teacher.empty() ? nullptr : &val_teacher[i],
                                         det, kw, cw, nullptr);
        objective += cg->graph.value(cg->loss).item();
      }
    }
    const auto ev = evaluate_generation(model, val, controller_router_factory(ctl), cfg.train.eval_max_new);
    LogRow r;
    r.loss = objective;
    r.rouge_l = ev.mean_rouge;
    r.mean_cost = ev.routed_steps ? ev.mean_cost : floor_cost;
    return std::make_pair(-objective, r);
  };
  hooks.snapshot = [&] {
    best_ctl = ctl.params();
    if (!cfg.train.freeze_backbone) best_backbone = model.params();
  };
  hooks.restore = [&] {
    ctl.params() = *best_ctl;
    if (best_backbone) model.params() = *best_backbone;
  };
  auto res = detail::run_loop(cfg.train, data.size(), hooks);
  detail::optimizer_meta(res.log, cfg.train);
  res.log.meta.emplace_back("alpha", text::num(cfg.alpha));
  res.log.meta.emplace_back("input_mode", input_mode_name(ctl.mode()));
  res.log.meta.emplace_back("gumbel_temperature", text::num(cfg.gumbel.temperature));
  res.log.meta.emplace_back("freeze_backbone", cfg.train.freeze_backbone ? "true" : "false");
  res.log.meta.emplace_back("target", cfg.target == ControllerTarget::Teacher ? "teacher" : "labels");
  res.log.meta.emplace_back("kl_direction", cfg.direction == KlDirection::Forward ? "forward" : "reverse");
  return res;
}

}  // namespace dynadepth
