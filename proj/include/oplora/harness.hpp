#pragma once

// Seeded MF / OP-MF sweeps: target construction, single runs, parallel
// sweeps with a resumable manifest, and adapter export of a finished run.

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oplora/adapter_io.hpp"
#include "oplora/config.hpp"
#include "oplora/diagnostics.hpp"
#include "oplora/models.hpp"
#include "oplora/optim.hpp"
#include "oplora/rng.hpp"
#include "oplora/spectral.hpp"

namespace oplora {

namespace fs = std::filesystem;

/// Relative slack used when deciding whether a run reached the SVD error.
inline constexpr double kSvdTolerance = 0.05;
/// Loss above this (or non-finite) marks a run as diverged.
inline constexpr double kDivergenceLoss = 1e12;
inline constexpr std::string_view kInitDescription =
    "kaiming_uniform(bound=sqrt(2)*sqrt(3/fan_in)); zero_init segments, biases 0; z~N(0,1)/sqrt(latent)";

/// Entries i.i.d. U(0, 1), drawn row-major from a stream keyed by the target seed.
inline Matrix make_target(const TargetSpec& spec) {
  Philox4x32 rng(mix64(spec.seed ^ fnv1a("target")));
  Matrix m(spec.rows, spec.cols);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform01();
  return m;
}

struct Cell {
  ModelKind kind = ModelKind::mf;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 1e-3;
  std::int64_t hidden = 0;  // 0 for mf
  std::int64_t rank = 8;
};

inline std::string cell_id(const Cell& c) {
  std::string s = std::string(to_string(c.kind)) + "-" + std::string(to_string(c.optimizer)) + "-lr" +
                  format_double(c.lr) + "-r" + std::to_string(c.rank);
  if (c.kind == ModelKind::opmf) s += "-h" + std::to_string(c.hidden);
  return s;
}

inline std::string run_fingerprint(const Cell& c, std::uint64_t seed) {
  return cell_id(c) + "-s" + std::to_string(seed);
}

struct PlannedRun {
  Cell cell;
  std::uint64_t seed = 0;
  std::string fingerprint;
};

/// The cross product of sweep axes in a fixed order (optimizer, kind, width, lr, seed).
/// Hidden width is not an MF axis, so MF cells are not repeated per width.
inline std::vector<PlannedRun> plan_runs(const SweepConfig& config) {
  std::vector<PlannedRun> out;
  for (auto opt : config.optimizers) {
    for (auto kind : config.model_kinds) {
      const std::vector<std::int64_t> widths =
          kind == ModelKind::opmf ? config.hidden_widths : std::vector<std::int64_t>{0};
      for (auto h : widths) {
        for (double lr : config.lrs) {
          for (auto seed : config.seeds) {
            Cell c{kind, opt, lr, h, config.rank};
            out.push_back({c, seed, run_fingerprint(c, seed)});
          }
        }
      }
    }
  }
  return out;
}

struct RunResult {
  std::string fingerprint;
  RunRecord record;
  RunSummary summary;
  std::int64_t parameter_count = 0;
  double wall_seconds = 0.0;
  Matrix final_a;
  Matrix final_b;
};

namespace detail {

template <FactorModel M>
void train_factorization(M& model, const SweepConfig& config, const Cell& cell, RunRecord& record) {
  OptimizerState opt;
  opt.kind = cell.optimizer;
  opt.lr_peak = cell.lr;
  opt.momentum_coeff = config.momentum_coeff;
  const Schedule schedule{ScheduleKind::warmup_linear_decay, config.warmup, config.steps};
  for (std::int64_t t = 0; t <= config.steps; ++t) {
    const auto params = model.parameters();
    zero_grad(params);
    const MfForward forward = mf_forward(model);
    const double loss = forward.loss.item();
    if (!std::isfinite(loss) || loss > kDivergenceLoss) {
      record.diverged = true;
      return;
    }
    backward(forward.loss);
    record_step(record, t, model, forward, opt, schedule);
    if (t < config.steps) step(opt, schedule, params);
  }
}

}  // namespace detail

/// One seeded training run. `target` must be make_target(*config.target).
inline RunResult run_single(const SweepConfig& config, const Cell& cell, std::uint64_t seed, const Matrix& target,
                            double svd_error) {
  if (!config.target) throw ConfigError("run_single: config has no target");
  const auto start = std::chrono::steady_clock::now();
  RunResult out;
  out.fingerprint = run_fingerprint(cell, seed);
  out.record.fingerprint = out.fingerprint;
  Philox4x32 rng(derive_stream_key(config.target->seed, cell_id(cell), seed));
  auto finish = [&](const auto& model) {
    const Factors f = model.factors();
    out.final_a = f.a.value();
    out.final_b = f.b.value();
    out.parameter_count = model.parameter_count();
  };
  if (cell.kind == ModelKind::mf) {
    MfModel model(target, cell.rank);
    model.init(rng);
    detail::train_factorization(model, config, cell, out.record);
    finish(model);
  } else {
    OpMfModel model(target, cell.rank, cell.hidden, config.latent);
    model.init(rng);
    detail::train_factorization(model, config, cell, out.record);
    finish(model);
  }
  out.summary = summarize(out.record, svd_error, kSvdTolerance);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct TargetStats {
  double svd_error = 0.0;
  double condition_number = 0.0;
  double svd_effective_rank = 0.0;
  double frobenius_sq = 0.0;
};

inline TargetStats target_stats(const Matrix& target, Index rank) {
  TargetStats s;
  const SvdResult d = svd(target);
  s.svd_error = d.s.tail(d.s.size() - rank).squaredNorm();
  s.condition_number = condition_number(target);
  s.svd_effective_rank = effective_rank_from_spectrum(d.s.head(rank)).value;
  s.frobenius_sq = target.squaredNorm();
  return s;
}

inline json to_json(const RunSummary& s) {
  auto opt_d = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"initial_loss", s.initial_loss},
          {"final_loss", s.final_loss},
          {"min_loss", s.min_loss},
          {"min_step", s.min_step},
          {"reached_svd", s.reached_svd},
          {"steps_to_svd", s.steps_to_svd ? json(*s.steps_to_svd) : json(nullptr)},
          {"steps_to_decade", s.steps_to_decade},
          {"final_eff_rank", opt_d(s.final_eff_rank)},
          {"diverged", s.diverged},
          {"steps_recorded", s.steps_recorded}};
}

inline json cell_json(const Cell& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"optimizer", std::string(to_string(c.optimizer))},
          {"lr", c.lr},
          {"hidden", c.hidden},
          {"rank", c.rank}};
}

inline Cell cell_from_json(const json& j) {
  Cell c;
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.lr = j.at("lr").get<double>();
  c.hidden = j.at("hidden").get<std::int64_t>();
  c.rank = j.at("rank").get<std::int64_t>();
  return c;
}

/// Per optimizer and model kind: best lr by seed-mean final loss, and tallies.
inline json compare_runs(const json& runs) {
  struct Acc {
    std::map<double, std::vector<double>> finals_by_lr;
    double best_min = std::numeric_limits<double>::infinity();
    int reached = 0;
    int diverged = 0;
    int count = 0;
  };
  std::map<std::string, std::map<std::string, Acc>> acc;
  for (const auto& r : runs) {
    const auto& c = r.at("cell");
    std::string kind = c.at("kind").get<std::string>();
    if (kind == "opmf") kind += "-h" + std::to_string(c.at("hidden").get<std::int64_t>());
    Acc& a = acc[c.at("optimizer").get<std::string>()][kind];
    const auto& s = r.at("summary");
    ++a.count;
    if (s.at("diverged").get<bool>()) ++a.diverged;
    if (s.at("reached_svd").get<bool>()) ++a.reached;
    a.best_min = std::min(a.best_min, s.at("min_loss").get<double>());
    const double lr = c.at("lr").get<double>();
    const double fin = s.at("diverged").get<bool>() ? std::numeric_limits<double>::infinity()
                                                     : s.at("final_loss").get<double>();
    a.finals_by_lr[lr].push_back(fin);
  }
  json out = json::object();
  for (const auto& [opt, kinds] : acc) {
    for (const auto& [kind, a] : kinds) {
      double best_mean = std::numeric_limits<double>::infinity();
      std::optional<double> best_lr;
      for (const auto& [lr, v] : a.finals_by_lr) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        if (mean < best_mean) {
          best_mean = mean;
          best_lr = lr;
        }
      }
      json e = {{"runs", a.count},
                {"runs_reaching_svd", a.reached},
                {"diverged", a.diverged},
                {"best_min_loss", std::isfinite(a.best_min) ? json(a.best_min) : json(nullptr)},
                {"best_lr_by_mean_final", best_lr ? json(*best_lr) : json(nullptr)},
                {"best_mean_final_loss", std::isfinite(best_mean) ? json(best_mean) : json(nullptr)}};
      out[opt][kind] = e;
    }
  }
  return out;
}

/// Parts of a manifest that must be identical across reruns of one config
/// (everything except wall times and execution settings).
inline json manifest_summaries(const json& manifest) {
  json j = manifest;
  j.erase("wall_seconds");
  if (j.contains("config")) {
    j["config"].erase("workers");
    j["config"].erase("output_dir");
  }
  return j;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_file_atomic(const fs::path& p, const std::string& content) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw ConfigError("cannot write '" + tmp.string() + "'");
    os << content;
    if (!os) throw ConfigError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, p);
}

inline std::string hash_hex(std::string_view bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
  return os.str();
}

inline void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("output directory '" + dir.string() + "' cannot be created");
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream os(probe);
    if (!os || !(os << "ok")) throw ConfigError("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

struct SweepOutcome {
  json manifest;
  fs::path manifest_path;
  std::vector<std::string> executed;  // fingerprints computed in this call
  std::vector<std::string> resumed;   // fingerprints reused from a previous call
};

/// Runs every planned cell (skipping ones already completed and verified in
/// an existing manifest), writes one CSV per run and manifest.json.
inline SweepOutcome run_sweep(const SweepConfig& config) {
  validate(config);
  if (!config.target) throw ConfigError("sweep: config has no target");
  const fs::path dir = config.output_dir;
  ensure_writable_dir(dir);

  const Matrix target = make_target(*config.target);
  const TargetStats stats = target_stats(target, config.rank);
  const auto plan = plan_runs(config);
  const json config_json = to_json(config);

  // Completed runs from an earlier invocation of the same config.
  std::map<std::string, json> previous;
  std::map<std::string, double> previous_walls;
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      const json old = json::parse(read_file(manifest_path));
      json a = old.at("config"), b = config_json;
      for (auto* j : {&a, &b}) {
        j->erase("workers");
        j->erase("output_dir");
      }
      if (a == b) {
        for (const auto& r : old.at("runs")) previous[r.at("fingerprint").get<std::string>()] = r;
        if (old.contains("wall_seconds")) {
          for (const auto& [fp, w] : old.at("wall_seconds").items()) previous_walls[fp] = w.get<double>();
        }
      }
    } catch (const std::exception&) {
      // An unreadable manifest means nothing can be resumed.
    }
  }

  std::vector<std::optional<json>> entries(plan.size());
  std::vector<double> walls(plan.size(), 0.0);
  std::vector<std::size_t> pending;
  SweepOutcome outcome;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto it = previous.find(plan[i].fingerprint);
    const fs::path csv = dir / (plan[i].fingerprint + ".csv");
    if (it != previous.end() && fs::exists(csv) && hash_hex(read_file(csv)) == it->second.at("csv_fnv1a")) {
      entries[i] = it->second;
      if (const auto w = previous_walls.find(plan[i].fingerprint); w != previous_walls.end()) walls[i] = w->second;
      outcome.resumed.push_back(plan[i].fingerprint);
    } else {
      pending.push_back(i);
    }
  }

  auto assemble = [&](bool final) {
    json runs = json::array();
    json walls_json = json::object();
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (!entries[i]) continue;
      runs.push_back(*entries[i]);
      walls_json[plan[i].fingerprint] = walls[i];
    }
    json m;
    m["experiment"] = config.experiment;
    m["complete"] = final;
    m["config"] = config_json;
    m["prng"] = std::string(Philox4x32::kName);
    m["init"] = std::string(kInitDescription);
    m["svd_error"] = stats.svd_error;
    m["condition_number"] = stats.condition_number;
    m["svd_effective_rank"] = stats.svd_effective_rank;
    m["target_frobenius_sq"] = stats.frobenius_sq;
    m["svd_tolerance"] = kSvdTolerance;
    m["runs"] = runs;
    m["comparisons"] = compare_runs(runs);
    m["wall_seconds"] = walls_json;
    return m;
  };

  std::mutex manifest_mutex;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(pending.size());
  auto worker = [&] {
    for (std::size_t k = next.fetch_add(1); k < pending.size(); k = next.fetch_add(1)) {
      const std::size_t i = pending[k];
      try {
        const auto& pr = plan[i];
        RunResult res = run_single(config, pr.cell, pr.seed, target, stats.svd_error);
        const std::string csv = to_csv(res.record);
        const std::string csv_name = pr.fingerprint + ".csv";
        write_file_atomic(dir / csv_name, csv);
        json e = {{"fingerprint", pr.fingerprint},
                  {"cell", cell_json(pr.cell)},
                  {"seed", pr.seed},
                  {"csv", csv_name},
                  {"csv_fnv1a", hash_hex(csv)},
                  {"parameter_count", res.parameter_count},
                  {"summary", to_json(res.summary)}};
        std::lock_guard lock(manifest_mutex);
        entries[i] = std::move(e);
        walls[i] = res.wall_seconds;
        write_file_atomic(manifest_path, assemble(false).dump(2));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(config.workers), std::max<std::size_t>(pending.size(), 1));
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t k : pending) outcome.executed.push_back(plan[k].fingerprint);

  outcome.manifest = assemble(true);
  outcome.manifest_path = manifest_path;
  write_file_atomic(manifest_path, outcome.manifest.dump(2));
  return outcome;
}

inline json load_manifest(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest '" + path.string() + "': " + e.what());
  }
}

/// Re-executes the run behind `csv_path` (a CSV inside a sweep directory),
/// checks it reproduces the recorded CSV, and returns its factors as a LoRA
/// record over a zero base weight with alpha = rank.
inline AdapterExport export_run_adapter(const fs::path& csv_path) {
  const fs::path dir = csv_path.parent_path().empty() ? fs::path(".") : csv_path.parent_path();
  const json manifest = load_manifest(dir / "manifest.json");
  const std::string name = csv_path.filename().string();
  const json* entry = nullptr;
  for (const auto& r : manifest.at("runs")) {
    if (r.at("csv").get<std::string>() == name) entry = &r;
  }
  if (!entry) throw ConfigError("run '" + name + "' is not listed in " + (dir / "manifest.json").string());
  const SweepConfig config = config_from_json(manifest.at("config"));
  const Cell cell = cell_from_json(entry->at("cell"));
  const Matrix target = make_target(*config.target);
  const RunResult res = run_single(config, cell, entry->at("seed").get<std::uint64_t>(), target,
                                   manifest.at("svd_error").get<double>());
  if (hash_hex(to_csv(res.record)) != entry->at("csv_fnv1a").get<std::string>()) {
    throw ConfigError("re-executed run '" + name + "' does not reproduce its recorded CSV");
  }
  AdapterExport e;
  e.rank = cell.rank;
  e.alpha = static_cast<double>(cell.rank);
  e.a = res.final_a;
  e.b = res.final_b;
  return e;
}

}  // namespace oplora
