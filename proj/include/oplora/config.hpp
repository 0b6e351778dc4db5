#pragma once

// Sweep configuration and its JSON form. Unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "oplora/errors.hpp"
#include "oplora/optim.hpp"

namespace oplora {

using json = nlohmann::json;

enum class ModelKind { mf, opmf };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::mf ? "mf" : "opmf"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "mf") return ModelKind::mf;
  if (s == "opmf") return ModelKind::opmf;
  throw ConfigError("unknown model kind '" + std::string(s) + "' (expected mf or opmf)");
}

struct TargetSpec {
  std::int64_t rows = 100;
  std::int64_t cols = 100;
  std::string distribution = "uniform01";
  std::uint64_t seed = 0;
};

/// Desk-scale adapter fine-tuning task.
struct ToySpec {
  std::int64_t d_in = 16;
  std::int64_t d_hidden = 32;
  std::int64_t d_out = 8;
  std::int64_t samples = 256;
  std::int64_t holdout = 128;
  std::int64_t pretrain_steps = 1500;
  double pretrain_lr = 1e-2;
  std::int64_t finetune_steps = 300;
  std::int64_t rank = 4;
  double alpha = 4.0;
  std::int64_t shift_rank = 16;
  double shift_scale = 1.0;
  std::uint64_t seed = 0;
  std::vector<double> lrs{1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1};
};

/// 8 log-spaced values per decade over [1e-4, 1].
inline std::vector<double> default_lr_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 32; ++i) g.push_back(std::pow(10.0, -4.0 + static_cast<double>(i) / 8.0));
  return g;
}

struct SweepConfig {
  std::string experiment = "mf_case_study";
  std::optional<TargetSpec> target = TargetSpec{};
  std::optional<ToySpec> toy;
  std::int64_t rank = 8;
  std::vector<ModelKind> model_kinds{ModelKind::mf, ModelKind::opmf};
  std::vector<OptimizerKind> optimizers{OptimizerKind::sgd};
  std::vector<double> lrs = default_lr_grid();
  std::vector<std::int64_t> hidden_widths{32};
  std::int64_t latent = 128;
  std::int64_t steps = 1000;
  std::int64_t warmup = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double momentum_coeff = 0.9;
  std::int64_t workers = 1;
  std::string output_dir = "out";
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  const std::set<std::string_view> keys(allowed);
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw ConfigError(std::string(where) + ": unknown key '" + k + "'");
  }
}

template <class T>
void read_field(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline TargetSpec target_from_json(const json& j) {
  detail::reject_unknown(j, {"rows", "cols", "distribution", "seed"}, "target");
  TargetSpec t;
  detail::read_field(j, "rows", t.rows, "target");
  detail::read_field(j, "cols", t.cols, "target");
  detail::read_field(j, "distribution", t.distribution, "target");
  detail::read_field(j, "seed", t.seed, "target");
  if (t.rows < 1 || t.cols < 1) throw ConfigError("target: dimensions must be positive");
  if (t.distribution != "uniform01") {
    throw ConfigError("target.distribution: only 'uniform01' is supported, got '" + t.distribution + "'");
  }
  return t;
}

inline json to_json(const TargetSpec& t) {
  return {{"rows", t.rows}, {"cols", t.cols}, {"distribution", t.distribution}, {"seed", t.seed}};
}

inline ToySpec toy_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"d_in", "d_hidden", "d_out", "samples", "holdout", "pretrain_steps", "pretrain_lr",
                          "finetune_steps", "rank", "alpha", "shift_rank", "shift_scale", "seed", "lrs"},
                         "toy");
  ToySpec t;
  detail::read_field(j, "d_in", t.d_in, "toy");
  detail::read_field(j, "d_hidden", t.d_hidden, "toy");
  detail::read_field(j, "d_out", t.d_out, "toy");
  detail::read_field(j, "samples", t.samples, "toy");
  detail::read_field(j, "holdout", t.holdout, "toy");
  detail::read_field(j, "pretrain_steps", t.pretrain_steps, "toy");
  detail::read_field(j, "pretrain_lr", t.pretrain_lr, "toy");
  detail::read_field(j, "finetune_steps", t.finetune_steps, "toy");
  detail::read_field(j, "rank", t.rank, "toy");
  detail::read_field(j, "alpha", t.alpha, "toy");
  detail::read_field(j, "shift_rank", t.shift_rank, "toy");
  detail::read_field(j, "shift_scale", t.shift_scale, "toy");
  detail::read_field(j, "seed", t.seed, "toy");
  detail::read_field(j, "lrs", t.lrs, "toy");
  if (t.d_in < 1 || t.d_hidden < 1 || t.d_out < 1 || t.samples < 1 || t.holdout < 1) {
    throw ConfigError("toy: sizes must be positive");
  }
  if (t.rank < 1 || t.rank > std::min(t.d_in, t.d_hidden)) throw ConfigError("toy.rank out of range");
  if (t.lrs.empty()) throw ConfigError("toy.lrs must not be empty");
  return t;
}

inline json to_json(const ToySpec& t) {
  return {{"d_in", t.d_in},
          {"d_hidden", t.d_hidden},
          {"d_out", t.d_out},
          {"samples", t.samples},
          {"holdout", t.holdout},
          {"pretrain_steps", t.pretrain_steps},
          {"pretrain_lr", t.pretrain_lr},
          {"finetune_steps", t.finetune_steps},
          {"rank", t.rank},
          {"alpha", t.alpha},
          {"shift_rank", t.shift_rank},
          {"shift_scale", t.shift_scale},
          {"seed", t.seed},
          {"lrs", t.lrs}};
}

inline void validate(const SweepConfig& c) {
  if (c.experiment.empty() || c.experiment.find_first_of("/\\ ") != std::string::npos) {
    throw ConfigError("experiment: must be a non-empty name without spaces or slashes");
  }
  if (c.rank < 1) throw ConfigError("rank must be >= 1");
  if (c.target && c.rank > std::min(c.target->rows, c.target->cols)) throw ConfigError("rank exceeds target dimensions");
  if (c.model_kinds.empty()) throw ConfigError("model_kinds must not be empty");
  if (c.optimizers.empty()) throw ConfigError("optimizers must not be empty");
  if (c.lrs.empty()) throw ConfigError("lrs must not be empty");
  for (double lr : c.lrs) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lrs must be positive and finite");
  }
  if (c.hidden_widths.empty()) throw ConfigError("hidden_widths must not be empty");
  for (auto h : c.hidden_widths) {
    if (h < 1) throw ConfigError("hidden_widths must be >= 1");
  }
  if (c.latent < 1) throw ConfigError("latent must be >= 1");
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (c.warmup < 0 || (c.steps > 0 && c.warmup >= c.steps)) throw ConfigError("warmup must lie in [0, steps)");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

inline SweepConfig config_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"experiment", "target", "toy", "rank", "model_kinds", "optimizers", "lrs",
                          "hidden_widths", "latent", "steps", "warmup", "seeds", "momentum_coeff", "workers",
                          "output_dir"},
                         "config");
  SweepConfig c;
  detail::read_field(j, "experiment", c.experiment, "config");
  if (j.contains("target")) c.target = j.at("target").is_null() ? std::nullopt : std::optional(target_from_json(j.at("target")));
  if (j.contains("toy")) c.toy = j.at("toy").is_null() ? std::nullopt : std::optional(toy_from_json(j.at("toy")));
  detail::read_field(j, "rank", c.rank, "config");
  if (j.contains("model_kinds")) {
    std::vector<std::string> kinds;
    detail::read_field(j, "model_kinds", kinds, "config");
    c.model_kinds.clear();
    for (const auto& k : kinds) c.model_kinds.push_back(parse_model_kind(k));
  }
  if (j.contains("optimizers")) {
    std::vector<std::string> opts;
    detail::read_field(j, "optimizers", opts, "config");
    c.optimizers.clear();
    for (const auto& o : opts) c.optimizers.push_back(parse_optimizer(o));
  }
  detail::read_field(j, "lrs", c.lrs, "config");
  detail::read_field(j, "hidden_widths", c.hidden_widths, "config");
  detail::read_field(j, "latent", c.latent, "config");
  detail::read_field(j, "steps", c.steps, "config");
  detail::read_field(j, "warmup", c.warmup, "config");
  detail::read_field(j, "seeds", c.seeds, "config");
  detail::read_field(j, "momentum_coeff", c.momentum_coeff, "config");
  detail::read_field(j, "workers", c.workers, "config");
  detail::read_field(j, "output_dir", c.output_dir, "config");
  validate(c);
  return c;
}

inline json to_json(const SweepConfig& c) {
  json j;
  j["experiment"] = c.experiment;
  j["target"] = c.target ? to_json(*c.target) : json(nullptr);
  j["toy"] = c.toy ? to_json(*c.toy) : json(nullptr);
  j["rank"] = c.rank;
  j["model_kinds"] = json::array();
  for (auto k : c.model_kinds) j["model_kinds"].push_back(std::string(to_string(k)));
  j["optimizers"] = json::array();
  for (auto o : c.optimizers) j["optimizers"].push_back(std::string(to_string(o)));
  j["lrs"] = c.lrs;
  j["hidden_widths"] = c.hidden_widths;
  j["latent"] = c.latent;
  j["steps"] = c.steps;
  j["warmup"] = c.warmup;
  j["seeds"] = c.seeds;
  j["momentum_coeff"] = c.momentum_coeff;
  j["workers"] = c.workers;
  j["output_dir"] = c.output_dir;
  return j;
}

inline SweepConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace oplora
