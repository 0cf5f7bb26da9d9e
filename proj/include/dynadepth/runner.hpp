// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dynadepth/checkpoint.hpp"
#include "dynadepth/config.hpp"
#include "dynadepth/corpus.hpp"
#include "dynadepth/evaluation.hpp"
#include "dynadepth/hashing.hpp"
#include "dynadepth/metrics.hpp"
#include "dynadepth/oracle.hpp"
#include "dynadepth/probe.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/trainer.hpp"

namespace dynadepth::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Missing input file or directory; reported with its path.
class MissingInput : public std::runtime_error {
 public:
  explicit MissingInput(const fs::path& p) : std::runtime_error("missing input: " + p.string()) {}
};

/// Records input and output content hashes for one subcommand run.
class Manifest {
 public:
  Manifest(std::string subcommand, std::string config_hash, std::uint64_t seed, fs::path root)
      : root_(std::move(root)) {
    j_["subcommand"] = std::move(subcommand);
    j_["config_hash"] = std::move(config_hash);
    j_["seed"] = seed;
    j_["inputs"] = ojson::object();
    j_["outputs"] = ojson::object();
  }

  void input(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) input(f);
      return;
    }
    if (!fs::exists(p)) throw MissingInput(p);
    j_["inputs"][rel(p)] = git_blob_hash(text::read_file(p.string()));
  }

  void output(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    text::write_file(p.string(), content);
    j_["outputs"][rel(p)] = git_blob_hash(content);
  }

  /// Records files already written by other code (e.g. a checkpoint directory).
  void output_existing(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) j_["outputs"][rel(f)] = git_blob_hash(text::read_file(f.string()));
      return;
    }
    j_["outputs"][rel(p)] = git_blob_hash(text::read_file(p.string()));
  }

  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    text::write_file((dir / "manifest.json").string(), j_.dump(2) + "\n");
  }

 private:
  fs::path root_;
  ojson j_;

  std::string rel(const fs::path& p) const {
    const auto r = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(root_));
    return r.empty() || r.native().rfind("..", 0) == 0 ? p.generic_string() : r.generic_string();
  }
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string strategies;
  std::string costs;
  std::string alpha;
  std::string input_mode;
  bool freeze_backbone = false;
  std::string budget_grid;
  std::string seeds;
  std::string checkpoint;
  std::string corpus;
  std::string input;
  std::optional<double> beta;
  bool layerdrop = false;
};

/// Reads a CSV artifact, collecting '# key=value' header lines.
struct CsvFile {
  std::map<std::string, std::string> meta;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw std::invalid_argument("csv column '" + name + "' not found");
  }
};

inline CsvFile read_csv(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput(p);
  CsvFile f;
  for (const auto& line : text::lines(text::read_file(p.string()))) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto body = text::trim(line.substr(1));
      const auto eq = body.find('=');
      if (eq != std::string::npos) f.meta[body.substr(0, eq)] = body.substr(eq + 1);
      continue;
    }
    if (f.header.empty()) {
      f.header = text::split(line, ',');
    } else {
      f.rows.push_back(text::split(line, ','));
    }
  }
  return f;
}

class Runner {
 public:
  Runner(Options opts, std::ostream& out) : o_(std::move(opts)), log_(out) {
    cfg_ = load_config(o_.config);
    if (o_.seed) cfg_.experiment.seed = *o_.seed;
    if (o_.freeze_backbone) cfg_.controller.train.freeze_backbone = true;
    root_ = o_.out;
    hash_ = model_config_hash(cfg_.model);
  }

  int gen_corpus() {
    CorpusSpec spec = cfg_.corpus;
    if (o_.seed) spec.seed = *o_.seed;
    const auto c = generate_corpus(spec);
    const auto dir = root_ / "corpus";
    Manifest m("gen-corpus", hash_, spec.seed, root_);
    m.output(dir / "train.jsonl", to_jsonl(c.train));
    m.output(dir / "val.jsonl", to_jsonl(c.val));
    m.output(dir / "test.jsonl", to_jsonl(c.test));
    m.output(dir / "resolved_config.ini", dump_config(cfg_));
    m.write(dir);
    log_ << "corpus: " << c.train.size() << " train, " << c.val.size() << " val, " << c.test.size() << " test -> "
         << dir.string() << '\n';
    return 0;
  }

  int train() {
    const auto corpus_dir = corpus_path();
    const auto corpus = load_corpus(corpus_dir);
    const auto dir = root_ / "train";
    Manifest m("train", hash_, cfg_.experiment.seed, root_);
    m.input(corpus_dir / "train.jsonl");
    m.input(corpus_dir / "val.jsonl");
    Model model(cfg_.model, cfg_.experiment.seed);
    TrainConfig tc = cfg_.train;
    tc.seed = cfg_.experiment.seed;
    if (o_.layerdrop && !(tc.layerdrop_prob > 0.0)) throw std::invalid_argument("--layerdrop needs train.layerdrop_prob > 0");
    const auto res = tc.layerdrop_prob > 0.0 ? finetune_layerdrop(model, corpus, tc) : finetune(model, corpus, tc);
    save_checkpoint(dir / "checkpoint", model);
    m.output_existing(dir / "checkpoint");
    m.output(dir / "train_log.csv", "# config_hash=" + hash_ + "\n" + res.log.csv());
    m.output(dir / "resolved_config.ini", dump_config(cfg_));
    m.write(dir);
    log_ << "train: " << res.steps << " steps, best val ROUGE-L " << text::fixed(res.best_score, 4) << " -> "
         << dir.string() << '\n';
    return 0;
  }

  int train_controllers() {
    const auto corpus_dir = corpus_path();
    const auto corpus = load_corpus(corpus_dir);
    const auto ck_dir = checkpoint_path();
    const auto base = load_model(ck_dir);
    const auto dir = root_ / "controllers";
    Manifest m("train-controllers", hash_, cfg_.experiment.seed, root_);
    m.input(ck_dir);
    m.input(corpus_dir / "train.jsonl");
    m.input(corpus_dir / "val.jsonl");
    m.input(corpus_dir / "test.jsonl");
    const auto alphas = o_.alpha.empty() ? cfg_.controller.alpha_grid : text::parse_double_list(o_.alpha, "--alpha");
    std::vector<InputMode> modes = cfg_.controller.input_modes;
    if (!o_.input_mode.empty()) modes = {parse_input_mode(o_.input_mode)};
    std::vector<std::uint64_t> seeds = cfg_.controller.seeds;
    if (!o_.seeds.empty()) {
      seeds.clear();
      for (auto s : text::parse_uint_list(o_.seeds, "--seeds")) seeds.push_back(s);
    }
    std::ostringstream curve, ratios;
    curve << "# config_hash=" << hash_ << '\n'
          << "mode,alpha,seed,mean_cost,rouge_l,ci_low,ci_high,n,freeze_backbone\n";
    ratios << "# config_hash=" << hash_ << '\n' << "mode,alpha,seed,layer,skip_ratio,steps\n";
    for (auto mode : modes) {
      for (double a : alphas) {
        for (auto seed : seeds) {
          Model model = base;
          Controllers ctl(model.config().num_layers, model.config().hidden_dim, mode, cfg_.controller.control_last,
                          seed);
          ControllerTrainConfig cc;
          cc.train = cfg_.controller.train;
          cc.train.seed = seed;
          cc.alpha = a;
          cc.gumbel.temperature = cfg_.controller.temperature;
          cc.gumbel.seed = seed;
          cc.target = cfg_.controller.target;
          cc.direction = cfg_.controller.direction;
          const auto res = dynadepth::train_controllers(model, ctl, corpus, cc);
          const std::string tag = input_mode_name(mode) + "_alpha" + text::num(a) + "_seed" + std::to_string(seed);
          save_checkpoint(dir / tag / "checkpoint", model, &ctl);
          m.output_existing(dir / tag / "checkpoint");
          m.output(dir / tag / "train_log.csv", "# config_hash=" + hash_ + "\n" + res.log.csv());
          const auto ev = evaluate_generation(model, corpus.test, controller_router_factory(ctl), cfg_.experiment.max_new);
          std::vector<double> rs;
          for (const auto& p : ev.predictions) rs.push_back(p.rouge_l);
          const auto ci = rs.size() >= 2 ? mean_ci(rs) : MeanCi{ev.mean_rouge, 0.0, rs.size()};
          const double cost = ev.routed_steps ? ev.mean_cost : static_cast<double>(ctl.floor_cost());
          curve << input_mode_name(mode) << ',' << text::num(a) << ',' << seed << ',' << text::num(cost) << ','
                << text::num(ci.mean) << ',' << text::num(ci.low()) << ',' << text::num(ci.high()) << ',' << ci.n
                << ',' << (cc.train.freeze_backbone ? "true" : "false") << '\n';
          const auto sr = skip_ratio_report(model, ctl, corpus.test, a, cfg_.experiment.max_new);
          for (std::size_t k = 0; k < sr.layers.size(); ++k) {
            ratios << sr.mode << ',' << text::num(a) << ',' << seed << ',' << sr.layers[k] << ','
                   << text::num(sr.skip_ratio[k]) << ',' << sr.steps << '\n';
          }
          log_ << "controllers " << tag << ": cost " << text::fixed(cost, 3) << ", ROUGE-L " << text::fixed(ci.mean, 4)
               << '\n';
        }
      }
    }
    m.output(dir / "operating_curve.csv", curve.str());
    m.output(dir / "skip_ratios.csv", ratios.str());
    m.write(dir);
    return 0;
  }

  int generate() {
    const auto corpus_dir = corpus_path();
    const auto corpus = load_corpus(corpus_dir);
    const auto ck_dir = checkpoint_path();
    const auto model = load_model(ck_dir);
    const std::size_t L = model.config().num_layers;
    const auto dir = root_ / "generate";
    Manifest m("generate", hash_, cfg_.experiment.seed, root_);
    m.input(ck_dir);
    m.input(corpus_dir / "test.jsonl");
    const auto strategies = o_.strategies.empty() ? std::vector<std::string>{"uls"} : text::parse_word_list(o_.strategies);
    const auto costs = o_.costs.empty() ? cfg_.generate_costs() : text::parse_uint_list(o_.costs, "--costs");
    ScoreMatrix sm;
    const bool single = strategies.size() == 1;
    std::map<std::size_t, std::vector<Prediction>> by_cost;
    for (const auto& s : strategies) {
      for (auto c : costs) {
        const auto plan = make_plan(s, L, c, cfg_.experiment.seed);
        const auto ev = evaluate_generation(model, corpus.test, plan_router_factory(plan), cfg_.experiment.max_new);
        std::string lines;
        for (const auto& p : ev.predictions) {
          ojson j;
          j["id"] = p.id;
          j["strategy"] = s;
          j["cost"] = c;
          j["text"] = p.text;
          j["rouge_l"] = p.rouge_l;
          j["label_len"] = p.label_length;
          j["config_hash"] = hash_;
          lines += j.dump() + "\n";
        }
        m.output(dir / (s + "_c" + std::to_string(c) + ".jsonl"), lines);
        if (single) by_cost[c] = ev.predictions;
        log_ << "generate " << s << " c=" << c << ": ROUGE-L " << text::fixed(ev.mean_rouge, 4) << '\n';
      }
    }
    if (single) {
      m.output(dir / "score_matrix.csv", "# config_hash=" + hash_ + "\n" + score_matrix_csv(join_predictions(by_cost)));
    }
    m.write(dir);
    return 0;
  }

  int probe() {
    const auto corpus_dir = corpus_path();
    const auto corpus = load_corpus(corpus_dir);
    const auto ck_dir = checkpoint_path();
    const auto model = load_model(ck_dir);
    const auto dir = root_ / "probe";
    Manifest m("probe", hash_, cfg_.experiment.seed, root_);
    m.input(ck_dir);
    m.input(corpus_dir / "test.jsonl");
    const auto strategies = o_.strategies.empty() ? cfg_.experiment.strategies : text::parse_word_list(o_.strategies);
    const auto costs = o_.costs.empty() ? cfg_.experiment.probe_costs : text::parse_uint_list(o_.costs, "--costs");
    ProbeOptions po;
    po.max_new = cfg_.experiment.max_new;
    po.free_running = cfg_.experiment.free_running;
    po.seed = cfg_.experiment.seed;
    auto examples = corpus.test;
    if (cfg_.experiment.probe_limit && examples.size() > cfg_.experiment.probe_limit) {
      examples.resize(cfg_.experiment.probe_limit);
    }
    const auto rep = dynadepth::probe(model, examples, strategies, costs, po);
    m.output(dir / "similarity.csv", similarity_csv(rep, hash_));
    m.output(dir / "ranking.csv", ranking_csv(compare_strategies(rep), hash_));
    m.write(dir);
    log_ << "probe: " << rep.entries.size() << " strategy/cost cells -> " << dir.string() << '\n';
    return 0;
  }

  int oracle() {
    const auto [sm, src] = load_scores();
    const auto dir = root_ / "oracle";
    Manifest m("oracle", hash_, cfg_.experiment.seed, root_);
    m.input(src);
    const auto grid = budget_grid(sm);
    const auto sw = sweep(sm, grid);
    std::string head = "# config_hash=" + hash_ + "\n";
    if (sw.parity_beta) head += "# parity_beta=" + text::num(*sw.parity_beta) + "\n";
    m.output(dir / "sweep.csv", head + sweep_csv(sw));
    ojson j;
    j["config_hash"] = hash_;
    j["costs"] = sm.costs;
    std::vector<double> means;
    for (std::size_t c = 0; c < sm.cols(); ++c) means.push_back(sm.column_mean(c));
    j["column_means"] = means;
    j["full_score"] = sw.full_score;
    j["parity_beta"] = sw.parity_beta ? ojson(*sw.parity_beta) : ojson(nullptr);
    j["rows"] = sm.rows();
    m.output(dir / "oracle.json", j.dump(2) + "\n");
    const double beta = sw.parity_beta ? *sw.parity_beta : static_cast<double>(sm.max_cost());
    m.output(dir / "assignment.csv", "# config_hash=" + hash_ + "\n# beta=" + text::num(beta) + "\n" +
                                         assignment_csv(sm, solve_exact(sm, beta)));
    m.write(dir);
    log_ << "oracle: " << grid.size() << " budgets, parity beta "
         << (sw.parity_beta ? text::num(*sw.parity_beta) : std::string("none")) << '\n';
    return 0;
  }

  int chi2() {
    const auto [sm, src] = load_scores();
    const auto dir = root_ / "chi2";
    Manifest m("chi2", hash_, cfg_.experiment.seed, root_);
    m.input(src);
    double beta = o_.beta ? *o_.beta : cfg_.experiment.chi2_beta;
    if (!(beta > 0.0)) {
      const auto sw = sweep(sm, {static_cast<double>(sm.max_cost())});
      beta = sw.parity_beta ? *sw.parity_beta : static_cast<double>(sm.max_cost());
    }
    const auto a = solve_exact(sm, beta);
    const auto r = chi_square_homogeneity(a, sm.costs, sm.label_lengths);
    ojson j;
    j["config_hash"] = hash_;
    j["beta"] = beta;
    j["statistic"] = r.statistic;
    j["dof"] = r.dof;
    j["p"] = r.p;
    j["bins"] = r.bin_labels;
    j["model_costs"] = r.model_costs;
    j["table"] = r.table;
    j["dropped"] = r.dropped;
    m.output(dir / "chi2.json", j.dump(2) + "\n");
    m.write(dir);
    log_ << "chi2: statistic " << text::fixed(r.statistic, 4) << ", dof " << r.dof << ", p " << text::fixed(r.p, 4)
         << '\n';
    return 0;
  }

  int report();

 private:
  Options o_;
  std::ostream& log_;
  ExperimentConfig cfg_;
  fs::path root_;
  std::string hash_;

  fs::path corpus_path() const {
    if (!o_.corpus.empty()) return o_.corpus;
    if (!cfg_.corpus_dir.empty()) return cfg_.corpus_dir;
    return root_ / "corpus";
  }

  fs::path checkpoint_path() const { return o_.checkpoint.empty() ? root_ / "train" / "checkpoint" : fs::path(o_.checkpoint); }

  static Corpus load_corpus(const fs::path& dir) {
    Corpus c;
    for (auto [name, dst] : {std::pair{"train.jsonl", &c.train}, std::pair{"val.jsonl", &c.val},
                             std::pair{"test.jsonl", &c.test}}) {
      const auto p = dir / name;
      if (!fs::exists(p)) throw MissingInput(p);
      *dst = parse_jsonl(text::read_file(p.string()), p.string());
    }
    return c;
  }

  Model load_model(const fs::path& dir) const {
    if (!fs::exists(dir)) throw MissingInput(dir);
    const auto ck = load_checkpoint(dir);
    if (model_config_hash(ck.config) != hash_) {
      throw std::invalid_argument("checkpoint " + dir.string() + " was built for a different model config");
    }
    return ck.model();
  }

  static ScoreMatrix join_predictions(const std::map<std::size_t, std::vector<Prediction>>& by_cost) {
    ScoreMatrix sm;
    for (const auto& [c, _] : by_cost) sm.costs.push_back(c);
    if (by_cost.empty()) return sm;
    const auto& first = by_cost.begin()->second;
    for (std::size_t i = 0; i < first.size(); ++i) {
      std::vector<double> row;
      for (const auto& [c, preds] : by_cost) {
        if (preds.at(i).id != first[i].id) throw std::invalid_argument("prediction sets are not aligned by id");
        row.push_back(preds[i].rouge_l);
      }
      sm.add_row(first[i].id, first[i].label_length, std::move(row));
    }
    return sm;
  }

  /// Score matrix from a CSV file or a directory of prediction sets.
  std::pair<ScoreMatrix, fs::path> load_scores() const {
    fs::path src = o_.input.empty() ? root_ / "generate" / "score_matrix.csv" : fs::path(o_.input);
    if (!fs::exists(src)) throw MissingInput(src);
    if (!fs::is_directory(src)) {
      const auto f = read_csv(src);
      if (f.meta.count("config_hash") && f.meta.at("config_hash") != hash_) {
        throw std::invalid_argument(src.string() + " has config hash " + f.meta.at("config_hash") +
                                    ", expected " + hash_);
      }
      return {parse_score_matrix_csv(text::read_file(src.string())), src};
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(src)) {
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::map<std::size_t, std::vector<Prediction>> by_cost;
    for (const auto& f : files) {
      std::vector<Prediction> preds;
      std::set<std::string> ids;
      std::optional<std::size_t> cost;
      for (const auto& line : text::lines(text::read_file(f.string()))) {
        if (text::trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const auto c = j.at("cost").get<std::size_t>();
        if (cost && *cost != c) throw std::invalid_argument(f.string() + ": mixed costs in one prediction set");
        cost = c;
        Prediction p;
        p.id = j.at("id").get<std::string>();
        if (!ids.insert(p.id).second) throw std::invalid_argument(f.string() + ": duplicate id " + p.id);
        p.rouge_l = j.at("rouge_l").get<double>();
        p.label_length = j.at("label_len").get<std::size_t>();
        preds.push_back(std::move(p));
      }
      if (cost) {
        if (by_cost.count(*cost)) throw std::invalid_argument("two prediction sets with cost " + std::to_string(*cost));
        by_cost[*cost] = std::move(preds);
      }
    }
    if (by_cost.empty()) throw MissingInput(src / "*.jsonl");
    return {join_predictions(by_cost), src};
  }

  std::vector<double> budget_grid(const ScoreMatrix& sm) const {
    if (!o_.budget_grid.empty()) return text::parse_double_list(o_.budget_grid, "--budget-grid");
    if (!cfg_.experiment.budget_grid.empty()) return cfg_.experiment.budget_grid;
    std::vector<double> g;
    for (double b = static_cast<double>(sm.min_cost()); b <= static_cast<double>(sm.max_cost()) + 1e-9; b += 0.25) {
      g.push_back(b);
    }
    return g;
  }
};

namespace detail {

inline std::string require_hash(const CsvFile& f, const fs::path& p, std::string& seen) {
  const auto it = f.meta.find("config_hash");
  if (it == f.meta.end()) throw std::invalid_argument(p.string() + " carries no config hash");
  if (!seen.empty() && it->second != seen) {
    throw std::invalid_argument("refusing to merge: " + p.string() + " has config hash " + it->second +
                                " but other artifacts have " + seen);
  }
  seen = it->second;
  return seen;
}

struct Ci3 {
  double mean, low, high;
};

}  // namespace detail

inline int Runner::report() {
  const auto sim_p = root_ / "probe" / "similarity.csv";
  const auto curve_p = root_ / "controllers" / "operating_curve.csv";
  const auto ratio_p = root_ / "controllers" / "skip_ratios.csv";
  const auto sweep_p = root_ / "oracle" / "sweep.csv";
  const auto scores_p = root_ / "generate" / "score_matrix.csv";
  const auto sim = read_csv(sim_p);
  const auto curve = read_csv(curve_p);
  const auto ratio = read_csv(ratio_p);
  const auto sw = read_csv(sweep_p);
  const auto scores = read_csv(scores_p);
  std::string seen;
  for (const auto& [f, p] : {std::pair{&sim, sim_p}, std::pair{&curve, curve_p}, std::pair{&ratio, ratio_p},
                             std::pair{&sw, sweep_p}, std::pair{&scores, scores_p}}) {
    detail::require_hash(*f, p, seen);
  }
  const auto dir = root_ / "report";
  Manifest m("report", seen, cfg_.experiment.seed, root_);
  for (const auto& p : {sim_p, curve_p, ratio_p, sweep_p, scores_p}) m.input(p);
  const std::string head = "# config_hash=" + seen + "\n";

  // fig1a: similarity per cost, one column group per strategy.
  std::vector<std::string> strategies;
  std::map<std::tuple<std::string, std::size_t, std::string>, detail::Ci3> cell;
  std::set<std::size_t> costs;
  const auto s_i = sim.col("strategy"), c_i = sim.col("cost"), m_i = sim.col("metric"), mu_i = sim.col("mean"),
             lo_i = sim.col("ci_low"), hi_i = sim.col("ci_high");
  for (const auto& r : sim.rows) {
    if (std::find(strategies.begin(), strategies.end(), r[s_i]) == strategies.end()) strategies.push_back(r[s_i]);
    const auto c = static_cast<std::size_t>(text::parse_uint(r[c_i], "cost"));
    costs.insert(c);
    cell[{r[s_i], c, r[m_i]}] = {text::parse_double(r[mu_i], "mean"), text::parse_double(r[lo_i], "ci_low"),
                                 text::parse_double(r[hi_i], "ci_high")};
  }
  {
    std::ostringstream os;
    os << head << "metric,cost";
    for (const auto& s : strategies) os << ',' << s << "_mean," << s << "_ci_low," << s << "_ci_high";
    os << '\n';
    for (const char* metric : {"final", "layerwise"}) {
      for (auto c : costs) {
        os << metric << ',' << c;
        for (const auto& s : strategies) {
          const auto it = cell.find({s, c, metric});
          if (it == cell.end()) {
            os << ",,,";
          } else {
            os << ',' << text::num(it->second.mean) << ',' << text::num(it->second.low) << ','
               << text::num(it->second.high);
          }
        }
        os << '\n';
      }
    }
    m.output(dir / "fig1a_similarity.csv", os.str());
  }

  // fig1b: cost vs ROUGE-L operating points per input mode.
  {
    std::ostringstream os;
    os << head << "mode,alpha,seed,mean_cost,rouge_l,ci_low,ci_high\n";
    const auto mo = curve.col("mode"), al = curve.col("alpha"), se = curve.col("seed"), co = curve.col("mean_cost"),
               ro = curve.col("rouge_l"), lo = curve.col("ci_low"), hi = curve.col("ci_high");
    for (const auto& r : curve.rows) {
      os << r[mo] << ',' << r[al] << ',' << r[se] << ',' << r[co] << ',' << r[ro] << ',' << r[lo] << ',' << r[hi]
         << '\n';
    }
    m.output(dir / "fig1b_cost_rouge.csv", os.str());
  }

  // Per-layer skip ratios averaged over seeds.
  {
    std::map<std::tuple<std::string, double, std::size_t>, std::pair<double, std::size_t>> acc;
    const auto mo = ratio.col("mode"), al = ratio.col("alpha"), la = ratio.col("layer"), sr = ratio.col("skip_ratio");
    for (const auto& r : ratio.rows) {
      auto& a = acc[{r[mo], text::parse_double(r[al], "alpha"), static_cast<std::size_t>(text::parse_uint(r[la], "layer"))}];
      a.first += text::parse_double(r[sr], "skip_ratio");
      ++a.second;
    }
    std::ostringstream os;
    os << head << "mode,alpha,layer,skip_ratio,seeds\n";
    for (const auto& [k, v] : acc) {
      os << std::get<0>(k) << ',' << text::num(std::get<1>(k)) << ',' << std::get<2>(k) << ','
         << text::num(v.first / static_cast<double>(v.second)) << ',' << v.second << '\n';
    }
    m.output(dir / "app_skip_ratios.csv", os.str());
  }

  // fig2 and the greedy comparison.
  const auto sm = parse_score_matrix_csv(text::read_file(scores_p.string()));
  {
    std::ostringstream f2, gc;
    f2 << head;
    if (sw.meta.count("parity_beta")) f2 << "# parity_beta=" << sw.meta.at("parity_beta") << '\n';
    f2 << "beta,exact_score";
    for (auto c : sm.costs) f2 << ",pct_" << c;
    for (auto c : sm.costs) f2 << ",static_score_" << c;
    f2 << '\n';
    gc << head << "beta,exact_score,greedy_score,best_single_score\n";
    const auto b = sw.col("beta"), ex = sw.col("exact_score"), gr = sw.col("greedy_score"),
               bs = sw.col("best_single_score");
    for (const auto& r : sw.rows) {
      f2 << r[b] << ',' << r[ex];
      for (auto c : sm.costs) f2 << ',' << r[sw.col("pct_" + std::to_string(c))];
      for (std::size_t j = 0; j < sm.cols(); ++j) f2 << ',' << text::num(sm.column_mean(j));
      f2 << '\n';
      gc << r[b] << ',' << r[ex] << ',' << r[gr] << ',' << r[bs] << '\n';
    }
    m.output(dir / "fig2_oracle.csv", f2.str());
    m.output(dir / "app_greedy_comparison.csv", gc.str());
  }

  // Directional checks, informative only.
  {
    std::ostringstream os;
    os << head << "check,key,lhs_mean,lhs_ci_low,lhs_ci_high,rhs_mean,rhs_ci_low,rhs_ci_high,holds,ci_overlap\n";
    auto emit = [&](const std::string& name, const std::string& key, const detail::Ci3& a, const detail::Ci3& b,
                    bool holds) {
      const bool overlap = a.low <= b.high && b.low <= a.high;
      os << name << ',' << key << ',' << text::num(a.mean) << ',' << text::num(a.low) << ',' << text::num(a.high)
         << ',' << text::num(b.mean) << ',' << text::num(b.low) << ',' << text::num(b.high) << ','
         << (holds ? "yes" : "no") << ',' << (overlap ? "yes" : "no") << '\n';
      log_ << "check " << name << " [" << key << "]: " << (holds ? "holds" : "does not hold") << '\n';
    };
    const std::size_t L = cfg_.model.num_layers;
    for (auto c : costs) {
      if (c <= 1 || c >= L) continue;
      const auto u = cell.find({"uls", c, "final"}), e = cell.find({"ee", c, "final"});
      if (u != cell.end() && e != cell.end()) {
        emit("uls_final_ge_ee", "cost=" + std::to_string(c), u->second, e->second, u->second.mean >= e->second.mean);
      }
    }
    for (auto c : costs) {
      const auto a = cell.find({"rls-no1", c, "final"}), b = cell.find({"rls", c, "final"});
      if (a != cell.end() && b != cell.end() && c < L) {
        emit("rls_no1_le_rls", "cost=" + std::to_string(c), a->second, b->second, a->second.mean <= b->second.mean);
      }
    }
    std::map<std::pair<std::string, std::string>, detail::Ci3> pts;
    const auto mo = curve.col("mode"), al = curve.col("alpha"), se = curve.col("seed"), ro = curve.col("rouge_l"),
               lo = curve.col("ci_low"), hi = curve.col("ci_high");
    for (const auto& r : curve.rows) {
      pts[{r[mo], r[al] + "/" + r[se]}] = {text::parse_double(r[ro], "rouge"), text::parse_double(r[lo], "ci"),
                                          text::parse_double(r[hi], "ci")};
    }
    for (const auto& [k, v] : pts) {
      if (k.first != "hidden") continue;
      const auto f = pts.find({"fixed", k.second});
      if (f == pts.end()) continue;
      const bool overlap = v.low <= f->second.high && f->second.low <= v.high;
      emit("hidden_vs_fixed_rouge_overlap", "alpha/seed=" + k.second, v, f->second, overlap);
    }
    m.output(dir / "checks.csv", os.str());
  }
  m.write(dir);
  log_ << "report -> " << dir.string() << '\n';
  return 0;
}

/// Entry point shared by the executable and in-process tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"dynadepth: dynamic-depth inference laboratory", "dynadepth"};
  app.require_subcommand(1, 1);
  Options o;
  std::uint64_t seed = 0;
  double beta = 0.0;
  const std::vector<std::pair<std::string, std::string>> subs{
      {"gen-corpus", "generate the synthetic JSONL corpus"},
      {"train", "fine-tune the backbone"},
      {"train-controllers", "train skip controllers over the alpha grid"},
      {"generate", "write prediction sets for fixed routing plans"},
      {"probe", "hidden-state similarity of routed vs full execution"},
      {"oracle", "budget-allocation sweep over prediction sets"},
      {"chi2", "label-length homogeneity test of an oracle assignment"},
      {"report", "merge artifacts into plot-ready tables"}};
  std::map<std::string, CLI::App*> handles;
  for (const auto& [name, desc] : subs) {
    auto* s = app.add_subcommand(name, desc);
    s->add_option("--config", o.config, "configuration file")->required()->check(CLI::ExistingFile);
    s->add_option("--seed", seed, "master seed");
    s->add_option("--out", o.out, "output directory");
    s->add_option("--strategies", o.strategies, "comma-separated strategies (full,ee,uls,rls,rls-no1)");
    s->add_option("--costs", o.costs, "comma-separated layer costs");
    s->add_option("--alpha", o.alpha, "comma-separated alpha grid");
    s->add_option("--input-mode", o.input_mode, "controller input")->check(CLI::IsMember({"hidden", "fixed"}));
    s->add_flag("--freeze-backbone", o.freeze_backbone, "train only the controllers");
    s->add_option("--budget-grid", o.budget_grid, "comma-separated average budgets");
    s->add_option("--seeds", o.seeds, "comma-separated controller seeds");
    s->add_option("--checkpoint", o.checkpoint, "backbone checkpoint directory");
    s->add_option("--corpus", o.corpus, "corpus directory");
    s->add_option("--input", o.input, "score matrix CSV or prediction-set directory");
    s->add_option("--beta", beta, "average budget for chi2");
    s->add_flag("--layerdrop", o.layerdrop, "fine-tune with layer dropout");
    handles[name] = s;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  std::string which;
  for (const auto& [name, h] : handles) {
    if (h->parsed()) {
      which = name;
      if (h->count("--seed")) o.seed = seed;
      if (h->count("--beta")) o.beta = beta;
    }
  }
  try {
    Runner r(o, out);
    if (which == "gen-corpus") return r.gen_corpus();
    if (which == "train") return r.train();
    if (which == "train-controllers") return r.train_controllers();
    if (which == "generate") return r.generate();
    if (which == "probe") return r.probe();
    if (which == "oracle") return r.oracle();
    if (which == "chi2") return r.chi2();
    if (which == "report") return r.report();
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace dynadepth::cli
