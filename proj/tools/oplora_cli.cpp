#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "oplora/oplora.hpp"

namespace {

using namespace oplora;

int cmd_sweep(const std::string& config_path, std::int64_t workers) {
  SweepConfig config = load_config(config_path);
  if (workers > 0) config.workers = workers;
  const SweepOutcome out = run_sweep(config);
  std::cout << "executed " << out.executed.size() << " runs, resumed " << out.resumed.size() << "\n";
  std::cout << "svd_error " << out.manifest.at("svd_error").get<double>() << "\n";
  std::cout << out.manifest.at("comparisons").dump(2) << "\n";
  std::cout << "manifest: " << out.manifest_path.string() << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& fingerprint) {
  const SweepConfig config = load_config(config_path);
  if (!config.target) throw ConfigError("run: config has no target");
  for (const auto& pr : plan_runs(config)) {
    if (pr.fingerprint != fingerprint) continue;
    ensure_writable_dir(config.output_dir);
    const Matrix target = make_target(*config.target);
    const TargetStats stats = target_stats(target, config.rank);
    const RunResult res = run_single(config, pr.cell, pr.seed, target, stats.svd_error);
    const auto csv = fs::path(config.output_dir) / (fingerprint + ".csv");
    write_file_atomic(csv, to_csv(res.record));
    json j = {{"fingerprint", fingerprint},
              {"csv", csv.string()},
              {"svd_error", stats.svd_error},
              {"parameter_count", res.parameter_count},
              {"summary", to_json(res.summary)}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cerr << "error: no run with fingerprint '" << fingerprint << "' in this config; planned runs are:\n";
  for (const auto& pr : plan_runs(config)) std::cerr << "  " << pr.fingerprint << "\n";
  return 1;
}

int cmd_verify_appendix(std::uint64_t seed) {
  AppendixConfig cfg;
  cfg.seed = seed;
  const AppendixReport rep = verify_appendix(cfg);
  std::cout << to_json(rep).dump(2) << "\n";
  if (rep.plain_diverged_above_threshold) {
    std::cout << "note: plain descent at lr " << rep.unstable_lr << " (above 2/L) diverged, as expected\n";
  }
  std::cout << (rep.passed() ? "PASS" : "FAIL") << ": residual ratios within [" << cfg.ratio_lo << ", " << cfg.ratio_hi
            << "]\n";
  return rep.passed() ? 0 : 2;
}

int cmd_toy(const std::string& config_path) {
  const SweepConfig config = load_config(config_path);
  const ToyReport rep = toy_finetune(config);
  std::cout << to_json(rep).dump(2) << "\n";
  return 0;
}

int cmd_plot(const std::string& manifest_path, const std::string& out_dir) {
  const PlotOutput out =
      plot_manifest(manifest_path, out_dir.empty() ? std::nullopt : std::optional<fs::path>(out_dir));
  if (!out.notice.empty()) std::cout << out.notice << "\n";
  for (const auto& f : out.files) std::cout << f.string() << "\n";
  return 0;
}

int cmd_export(const std::string& run_csv, const std::string& path) {
  const AdapterExport e = export_run_adapter(run_csv);
  save_adapter(path, e);
  std::cout << "wrote " << path << " (rank " << e.rank << ", A " << e.a.rows() << "x" << e.a.cols() << ", B "
            << e.b.rows() << "x" << e.b.cols() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Over-parameterised low-rank factorisation experiments"};
  app.require_subcommand(1);

  std::string config_path, fingerprint, manifest_path, out_dir, run_csv, adapter_path;
  std::int64_t workers = 0;
  std::uint64_t seed = 0;

  auto* sweep = app.add_subcommand("sweep", "run every cell of a sweep config");
  sweep->add_option("config", config_path, "config JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--workers", workers, "override the config's worker count");

  auto* run = app.add_subcommand("run", "run one cell of a sweep config");
  run->add_option("config", config_path, "config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--cell", fingerprint, "run fingerprint, e.g. opmf-sgd-lr0.01-r8-h32-s0")->required();

  auto* appendix = app.add_subcommand("verify-appendix", "check the second-order remainder of the composite step");
  appendix->add_option("--seed", seed, "problem seed");

  auto* toy = app.add_subcommand("toy-finetune", "fine-tune adapter variants on the toy task");
  toy->add_option("config", config_path, "config JSON with a toy section")->required()->check(CLI::ExistingFile);

  auto* plot = app.add_subcommand("plot", "write SVG panels for a sweep manifest");
  plot->add_option("manifest", manifest_path, "manifest.json")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", out_dir, "output directory (default: next to the manifest)");

  auto* exp = app.add_subcommand("export-adapter", "re-run a sweep run and save its factors as an adapter");
  exp->add_option("run", run_csv, "the run's CSV inside a sweep directory")->required()->check(CLI::ExistingFile);
  exp->add_option("path", adapter_path, "output adapter file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sweep) return cmd_sweep(config_path, workers);
    if (*run) return cmd_run(config_path, fingerprint);
    if (*appendix) return cmd_verify_appendix(seed);
    if (*toy) return cmd_toy(config_path);
    if (*plot) return cmd_plot(manifest_path, out_dir);
    if (*exp) return cmd_export(run_csv, adapter_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
