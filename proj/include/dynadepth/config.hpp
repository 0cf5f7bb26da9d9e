// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dynadepth/controller.hpp"
#include "dynadepth/corpus.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/trainer.hpp"

namespace dynadepth {

struct ControllerSettings {
  std::vector<double> alpha_grid{2.0, 4.0, 6.0, 10.0};
  std::vector<InputMode> input_modes{InputMode::HiddenState, InputMode::FixedOnes};
  std::vector<std::uint64_t> seeds{1};
  double temperature = 1.0;
  bool control_last = false;
  ControllerTarget target = ControllerTarget::Teacher;
  KlDirection direction = KlDirection::Forward;
  TrainConfig train;
};

struct ExperimentSettings {
  std::uint64_t seed = 1;
  std::vector<std::string> strategies{"ee", "uls", "rls", "rls-no1"};
  std::vector<std::size_t> probe_costs{2, 3, 4, 6, 8};
  /// Prediction-set costs as fractions of L, rounded to the nearest layer.
  std::vector<double> generate_fractions{1.0 / 6.0, 1.0 / 3.0, 0.5, 1.0};
  std::vector<double> budget_grid;
  std::size_t max_new = 24;
  /// Test examples used by probe; 0 means all.
  std::size_t probe_limit = 0;
  bool free_running = false;
  double chi2_beta = 0.0;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  ControllerSettings controller;
  CorpusSpec corpus;
  /// Existing corpus directory (train/val/test.jsonl); empty means generated.
  std::string corpus_dir;
  ExperimentSettings experiment;

  void validate() const {
    model.validate();
    train.validate();
    controller.train.validate();
    corpus.validate();
    if (controller.alpha_grid.empty()) throw std::invalid_argument("config: controller.alpha_grid is empty");
    if (controller.input_modes.empty()) throw std::invalid_argument("config: controller.input_modes is empty");
    if (controller.seeds.empty()) throw std::invalid_argument("config: controller.seeds is empty");
    if (experiment.strategies.empty()) throw std::invalid_argument("config: experiment.strategies is empty");
    if (experiment.probe_costs.empty()) throw std::invalid_argument("config: experiment.probe_costs is empty");
    if (experiment.generate_fractions.empty()) {
      throw std::invalid_argument("config: experiment.generate_fractions is empty");
    }
    if (!corpus_dir.empty() && !std::filesystem::is_directory(corpus_dir)) {
      throw std::invalid_argument("config: corpus.dir does not exist: " + corpus_dir);
    }
  }

  /// ULS prediction-set costs derived from the fractions, deduplicated, ascending.
  std::vector<std::size_t> generate_costs() const {
    std::set<std::size_t> cs;
    for (double f : experiment.generate_fractions) {
      const auto c = static_cast<long long>(std::llround(f * static_cast<double>(model.num_layers)));
      cs.insert(static_cast<std::size_t>(std::clamp<long long>(c, 1, static_cast<long long>(model.num_layers))));
    }
    return {cs.begin(), cs.end()};
  }
};

namespace detail {

using boost::property_tree::ptree;

inline std::string list_str(const std::vector<double>& xs) {
  std::vector<std::string> s;
  for (double x : xs) s.push_back(text::num(x));
  return text::join(s, ",");
}

// ptree::get with a default swallows bad values; this one does not.
template <class T>
T get_or(const ptree& s, const std::string& key, T fallback) {
  if (!s.get_child_optional(key)) return fallback;
  return s.get<T>(key);
}

template <class T>
inline std::string list_str(const std::vector<T>& xs) {
  return text::join(xs, ",");
}

inline void read_train(const ptree& pt, const std::string& sec, TrainConfig& t) {
  auto opt = pt.get_child_optional(sec);
  if (!opt) return;
  const auto& s = *opt;
  t.learning_rate = detail::get_or(s, "learning_rate", t.learning_rate);
  t.batch_size = detail::get_or(s, "batch_size", t.batch_size);
  t.max_epochs = detail::get_or(s, "max_epochs", t.max_epochs);
  t.max_steps = detail::get_or(s, "max_steps", t.max_steps);
  t.patience = detail::get_or(s, "patience", t.patience);
  t.eval_every = detail::get_or(s, "eval_every", t.eval_every);
  t.freeze_backbone = detail::get_or(s, "freeze_backbone", t.freeze_backbone);
  t.layerdrop_prob = detail::get_or(s, "layerdrop_prob", t.layerdrop_prob);
  t.adamw.weight_decay = detail::get_or(s, "weight_decay", t.adamw.weight_decay);
  t.eval_max_new = detail::get_or(s, "eval_max_new", t.eval_max_new);
  t.eval_limit = detail::get_or(s, "eval_limit", t.eval_limit);
}

inline void write_train(ptree& pt, const std::string& sec, const TrainConfig& t) {
  pt.put(sec + ".learning_rate", text::num(t.learning_rate));
  pt.put(sec + ".batch_size", t.batch_size);
  pt.put(sec + ".max_epochs", t.max_epochs);
  pt.put(sec + ".max_steps", t.max_steps);
  pt.put(sec + ".patience", t.patience);
  pt.put(sec + ".eval_every", text::num(t.eval_every));
  pt.put(sec + ".freeze_backbone", t.freeze_backbone ? "true" : "false");
  pt.put(sec + ".layerdrop_prob", text::num(t.layerdrop_prob));
  pt.put(sec + ".weight_decay", text::num(t.adamw.weight_decay));
  pt.put(sec + ".eval_max_new", t.eval_max_new);
  pt.put(sec + ".eval_limit", t.eval_limit);
}

}  // namespace detail

/// Parses the sectioned key/value configuration. Unset keys keep defaults.
inline ExperimentConfig parse_config(const std::string& content, const std::string& source = "config") {
  detail::ptree pt;
  std::istringstream in(content);
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  static const std::set<std::string> sections{"model", "train", "controller", "corpus", "experiment"};
  for (const auto& [name, _] : pt) {
    if (!sections.count(name)) throw std::invalid_argument(source + ": unknown section [" + name + "]");
  }
  ExperimentConfig c;
  try {
    if (auto m = pt.get_child_optional("model")) {
      c.model.num_layers = detail::get_or(*m, "num_layers", c.model.num_layers);
      c.model.hidden_dim = detail::get_or(*m, "hidden_dim", c.model.hidden_dim);
      c.model.num_heads = detail::get_or(*m, "num_heads", c.model.num_heads);
      c.model.ffn_dim = detail::get_or(*m, "ffn_dim", c.model.ffn_dim);
      c.model.max_context = detail::get_or(*m, "max_context", c.model.max_context);
      c.model.layer_norm_eps = detail::get_or(*m, "layer_norm_eps", c.model.layer_norm_eps);
    }
    detail::read_train(pt, "train", c.train);
    c.controller.train = c.train;
    detail::read_train(pt, "controller", c.controller.train);
    if (auto s = pt.get_child_optional("controller")) {
      if (auto v = s->get_optional<std::string>("alpha_grid")) c.controller.alpha_grid = text::parse_double_list(*v, "alpha_grid");
      if (auto v = s->get_optional<std::string>("input_modes")) {
        c.controller.input_modes.clear();
        for (const auto& w : text::parse_word_list(*v)) c.controller.input_modes.push_back(parse_input_mode(w));
      }
      if (auto v = s->get_optional<std::string>("seeds")) {
        c.controller.seeds.clear();
        for (auto x : text::parse_uint_list(*v, "seeds")) c.controller.seeds.push_back(x);
      }
      c.controller.temperature = detail::get_or(*s, "temperature", c.controller.temperature);
      c.controller.control_last = detail::get_or(*s, "control_last", c.controller.control_last);
      const auto target = s->get<std::string>("target", "teacher");
      if (target != "teacher" && target != "labels") throw std::invalid_argument("controller.target: " + target);
      c.controller.target = target == "teacher" ? ControllerTarget::Teacher : ControllerTarget::Labels;
      const auto dir = s->get<std::string>("kl_direction", "forward");
      if (dir != "forward" && dir != "reverse") throw std::invalid_argument("controller.kl_direction: " + dir);
      c.controller.direction = dir == "forward" ? KlDirection::Forward : KlDirection::Reverse;
    }
    if (auto s = pt.get_child_optional("corpus")) {
      c.corpus.size = detail::get_or(*s, "size", c.corpus.size);
      c.corpus.seed = detail::get_or(*s, "seed", c.corpus.seed);
      if (auto v = s->get_optional<std::string>("tasks")) c.corpus.tasks = text::parse_word_list(*v);
      c.corpus.min_words = detail::get_or(*s, "min_words", c.corpus.min_words);
      c.corpus.max_words = detail::get_or(*s, "max_words", c.corpus.max_words);
      c.corpus.train_frac = detail::get_or(*s, "train_frac", c.corpus.train_frac);
      c.corpus.val_frac = detail::get_or(*s, "val_frac", c.corpus.val_frac);
      c.corpus.test_frac = detail::get_or(*s, "test_frac", c.corpus.test_frac);
      c.corpus_dir = detail::get_or(*s, "dir", c.corpus_dir);
    }
    if (auto s = pt.get_child_optional("experiment")) {
      auto& e = c.experiment;
      e.seed = detail::get_or(*s, "seed", e.seed);
      if (auto v = s->get_optional<std::string>("strategies")) e.strategies = text::parse_word_list(*v);
      if (auto v = s->get_optional<std::string>("probe_costs")) e.probe_costs = text::parse_uint_list(*v, "probe_costs");
      if (auto v = s->get_optional<std::string>("generate_fractions")) {
        e.generate_fractions = text::parse_double_list(*v, "generate_fractions");
      }
      if (auto v = s->get_optional<std::string>("budget_grid")) e.budget_grid = text::parse_double_list(*v, "budget_grid");
      e.max_new = detail::get_or(*s, "max_new", e.max_new);
      e.probe_limit = detail::get_or(*s, "probe_limit", e.probe_limit);
      e.free_running = detail::get_or(*s, "free_running", e.free_running);
      e.chi2_beta = detail::get_or(*s, "chi2_beta", e.chi2_beta);
    }
  } catch (const boost::property_tree::ptree_error& e) {
    throw std::invalid_argument(source + ": " + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw std::invalid_argument("config file not found: " + path);
  return parse_config(text::read_file(path), path);
}

/// Fully resolved configuration in the same format.
inline std::string dump_config(const ExperimentConfig& c) {
  detail::ptree pt;
  pt.put("model.num_layers", c.model.num_layers);
  pt.put("model.hidden_dim", c.model.hidden_dim);
  pt.put("model.num_heads", c.model.num_heads);
  pt.put("model.ffn_dim", c.model.ffn_dim);
  pt.put("model.max_context", c.model.max_context);
  pt.put("model.layer_norm_eps", text::num(c.model.layer_norm_eps));
  detail::write_train(pt, "train", c.train);
  detail::write_train(pt, "controller", c.controller.train);
  pt.put("controller.alpha_grid", detail::list_str(c.controller.alpha_grid));
  std::vector<std::string> modes;
  for (auto m : c.controller.input_modes) modes.push_back(input_mode_name(m));
  pt.put("controller.input_modes", text::join(modes, ","));
  pt.put("controller.seeds", detail::list_str(c.controller.seeds));
  pt.put("controller.temperature", text::num(c.controller.temperature));
  pt.put("controller.control_last", c.controller.control_last ? "true" : "false");
  pt.put("controller.target", c.controller.target == ControllerTarget::Teacher ? "teacher" : "labels");
  pt.put("controller.kl_direction", c.controller.direction == KlDirection::Forward ? "forward" : "reverse");
  pt.put("corpus.size", c.corpus.size);
  pt.put("corpus.seed", c.corpus.seed);
  pt.put("corpus.tasks", text::join(c.corpus.tasks, ","));
  pt.put("corpus.min_words", c.corpus.min_words);
  pt.put("corpus.max_words", c.corpus.max_words);
  pt.put("corpus.train_frac", text::num(c.corpus.train_frac));
  pt.put("corpus.val_frac", text::num(c.corpus.val_frac));
  pt.put("corpus.test_frac", text::num(c.corpus.test_frac));
  if (!c.corpus_dir.empty()) pt.put("corpus.dir", c.corpus_dir);
  pt.put("experiment.seed", c.experiment.seed);
  pt.put("experiment.strategies", text::join(c.experiment.strategies, ","));
  pt.put("experiment.probe_costs", detail::list_str(c.experiment.probe_costs));
  pt.put("experiment.generate_fractions", detail::list_str(c.experiment.generate_fractions));
  if (!c.experiment.budget_grid.empty()) pt.put("experiment.budget_grid", detail::list_str(c.experiment.budget_grid));
  pt.put("experiment.max_new", c.experiment.max_new);
  pt.put("experiment.probe_limit", c.experiment.probe_limit);
  pt.put("experiment.free_running", c.experiment.free_running ? "true" : "false");
  pt.put("experiment.chi2_beta", text::num(c.experiment.chi2_beta));
  std::ostringstream os;
  boost::property_tree::write_ini(os, pt);
  return os.str();
}

}  // namespace dynadepth
