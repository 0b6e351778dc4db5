#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>

#include <gtest/gtest.h>

#include "oplora/oplora.hpp"

using namespace oplora;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("oplora_test_" + name);
  fs::remove_all(p);
  return p;
}

SweepConfig small_config(const fs::path& out) {
  SweepConfig c;
  c.experiment = "small";
  c.target = TargetSpec{20, 15, "uniform01", 3};
  c.rank = 3;
  c.lrs = {1e-3, 1e-2};
  c.hidden_widths = {8};
  c.latent = 16;
  c.steps = 60;
  c.warmup = 5;
  c.seeds = {0};
  c.output_dir = out.string();
  return c;
}

std::map<std::string, std::string> csv_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") out[e.path().filename().string()] = read_file(e.path());
  return out;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(OPLORA_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(json{{"experiment", "x"}, {"lr", 0.1}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"target", {{"rows", 10}, {"colour", 1}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"toy", {{"depth", 3}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"optimizers", {"adamw"}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"lrs", {-1.0}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"steps", 10}, {"warmup", 10}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"rank", 200}}), ConfigError);
}

TEST(Config, DefaultsAndRoundTrip) {
  const SweepConfig c = config_from_json(json::object());
  EXPECT_EQ(c.rank, 8);
  EXPECT_EQ(c.steps, 1000);
  EXPECT_EQ(c.warmup, 50);
  EXPECT_EQ(c.latent, 128);
  EXPECT_EQ(c.hidden_widths, std::vector<std::int64_t>{32});
  ASSERT_EQ(c.lrs.size(), 33u);
  EXPECT_DOUBLE_EQ(c.lrs.front(), 1e-4);
  EXPECT_DOUBLE_EQ(c.lrs.back(), 1.0);
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Plan, CrossProductWithUniqueFingerprints) {
  SweepConfig c = small_config("unused");
  c.optimizers = {OptimizerKind::sgd, OptimizerKind::adam};
  c.hidden_widths = {8, 16};
  c.seeds = {0, 1};
  const auto plan = plan_runs(c);
  // per optimizer: mf 2 lrs x 2 seeds + opmf 2 widths x 2 lrs x 2 seeds
  EXPECT_EQ(plan.size(), 2u * (4u + 8u));
  std::set<std::string> ids;
  for (const auto& p : plan) ids.insert(p.fingerprint);
  EXPECT_EQ(ids.size(), plan.size());
  EXPECT_EQ(run_fingerprint({ModelKind::opmf, OptimizerKind::sgd, 1e-3, 32, 8}, 2), "opmf-sgd-lr0.001-r8-h32-s2");
}

TEST(StreamKeys, IndependentOfSweepComposition) {
  EXPECT_EQ(derive_stream_key(1, "mf-sgd-lr0.1-r8", 0), derive_stream_key(1, "mf-sgd-lr0.1-r8", 0));
  EXPECT_NE(derive_stream_key(1, "mf-sgd-lr0.1-r8", 0), derive_stream_key(1, "mf-sgd-lr0.1-r8", 1));
  EXPECT_NE(derive_stream_key(1, "mf-sgd-lr0.1-r8", 0), derive_stream_key(2, "mf-sgd-lr0.1-r8", 0));
}

TEST(Philox, KnownAnswerVectors) {
  using A = std::array<std::uint32_t, 4>;
  EXPECT_EQ(Philox4x32::block({0, 0}, {0, 0, 0, 0}), (A{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(Philox4x32::block({0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}),
            (A{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
}

TEST(Philox, UniformAndNormalMoments) {
  Philox4x32 rng(99);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.01);
}

TEST(RunSingle, ZeroStepsGivesOnlyStepZeroRow) {
  SweepConfig c = small_config("unused");
  c.steps = 0;
  c.warmup = 0;
  const Matrix m = make_target(*c.target);
  for (auto kind : {ModelKind::mf, ModelKind::opmf}) {
    const RunResult r = run_single(c, {kind, OptimizerKind::sgd, 0.01, kind == ModelKind::opmf ? 8 : 0, 3}, 0, m, 1.0);
    ASSERT_EQ(r.record.rows.size(), 1u);
    EXPECT_NEAR(r.record.rows[0].loss, m.squaredNorm(), 1e-10);
  }
}

TEST(RunSingle, DeterministicAndAboveSvdBound) {
  const SweepConfig c = small_config("unused");
  const Matrix m = make_target(*c.target);
  const double svd_err = best_rank_r(m, c.rank).error;
  for (auto kind : {ModelKind::mf, ModelKind::opmf}) {
    const Cell cell{kind, OptimizerKind::sgd, 1e-2, kind == ModelKind::opmf ? 8 : 0, 3};
    const RunResult a = run_single(c, cell, 1, m, svd_err), b = run_single(c, cell, 1, m, svd_err);
    EXPECT_EQ(to_csv(a.record), to_csv(b.record));
    EXPECT_GE(a.summary.final_loss, svd_err);
    EXPECT_EQ(a.record.rows.size(), 61u);
  }
}

TEST(RunSingle, DivergenceKeepsPrefixAndMarksRun) {
  SweepConfig c = small_config("unused");
  const Matrix m = make_target(*c.target);
  const RunResult r = run_single(c, {ModelKind::opmf, OptimizerKind::sgd, 10.0, 8, 3}, 0, m, 1.0);
  EXPECT_TRUE(r.record.diverged);
  EXPECT_TRUE(r.summary.diverged);
  EXPECT_LT(r.record.rows.size(), 61u);
  EXPECT_GE(r.record.rows.size(), 1u);
}

TEST(Sweep, CountsFilesAndManifestContents) {
  const fs::path out = scratch("count");
  SweepConfig c = small_config(out);
  const SweepOutcome o = run_sweep(c);
  EXPECT_EQ(csv_contents(out).size(), 4u);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  const json m = load_manifest(out / "manifest.json");
  EXPECT_EQ(m.at("runs").size(), 4u);
  EXPECT_TRUE(m.at("complete").get<bool>());
  EXPECT_EQ(m.at("prng"), "philox4x32-10");
  const Matrix target = make_target(*c.target);
  EXPECT_EQ(m.at("svd_error").get<double>(), best_rank_r(target, c.rank).error);
  EXPECT_EQ(m.at("condition_number").get<double>(), condition_number(target));
  EXPECT_TRUE(m.at("comparisons").contains("sgd"));
  EXPECT_TRUE(m.at("comparisons").at("sgd").contains("opmf-h8"));
  for (const auto& r : m.at("runs")) {
    EXPECT_GE(r.at("summary").at("min_loss").get<double>(), m.at("svd_error").get<double>() - 1e-9);
  }
}

TEST(Sweep, DeterministicAcrossWorkerCounts) {
  const fs::path a = scratch("det1"), b = scratch("det4");
  SweepConfig c = small_config(a);
  c.seeds = {0, 1};
  c.workers = 1;
  const SweepOutcome oa = run_sweep(c);
  c.output_dir = b.string();
  c.workers = 4;
  const SweepOutcome ob = run_sweep(c);
  EXPECT_EQ(csv_contents(a), csv_contents(b));
  EXPECT_EQ(manifest_summaries(oa.manifest), manifest_summaries(ob.manifest));
}

TEST(Sweep, ResumesVerifiedRunsAndRecomputesTamperedOnes) {
  const fs::path out = scratch("resume");
  const SweepConfig c = small_config(out);
  const SweepOutcome first = run_sweep(c);
  const auto before = csv_contents(out);
  const SweepOutcome second = run_sweep(c);
  EXPECT_EQ(second.executed.size(), 0u);
  EXPECT_EQ(second.resumed.size(), 4u);

  const std::string victim = first.manifest.at("runs")[0].at("csv").get<std::string>();
  std::ofstream(out / victim, std::ios::app) << "garbage\n";
  fs::remove(out / first.manifest.at("runs")[1].at("csv").get<std::string>());
  const SweepOutcome third = run_sweep(c);
  EXPECT_EQ(third.executed.size(), 2u);
  EXPECT_EQ(csv_contents(out), before);
  EXPECT_EQ(manifest_summaries(third.manifest), manifest_summaries(first.manifest));
}

TEST(Sweep, UnwritableOutputFailsBeforeCompute) {
  const fs::path file = scratch("blocker");
  std::ofstream(file) << "x";
  SweepConfig c = small_config(file / "sub");
  EXPECT_THROW(run_sweep(c), ConfigError);
}

TEST(Appendix, LadderRatiosInBand) {
  const AppendixReport r = verify_appendix();
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.ratios.size(), 3u);
  for (double q : r.ratios) {
    EXPECT_GE(q, 0.2);
    EXPECT_LE(q, 0.3);
  }
  EXPECT_EQ(r.zero_eta_residual, 0.0);
  EXPECT_TRUE(r.plain_diverged_above_threshold);
  EXPECT_LT(r.plain_loss_final, r.plain_loss_initial);
}

TEST(Toy, StepZeroNeutralAndMergeEquivalent) {
  SweepConfig c;
  ToySpec t;
  t.pretrain_steps = 200;
  t.finetune_steps = 20;
  t.lrs = {1e-2};
  c.toy = t;
  c.optimizers = {OptimizerKind::adam};
  c.seeds = {0};
  c.latent = 16;
  c.hidden_widths = {8};
  const ToyReport r = toy_finetune(c);
  EXPECT_LT(r.step0_max_deviation, 1e-10);
  ASSERT_EQ(r.variants.size(), 4u);
  for (const auto& v : r.variants) EXPECT_LT(v.max_merge_diff, 1e-10) << to_string(v.variant);
  for (const auto& run : r.runs) EXPECT_LT(run.final_loss, run.initial_loss) << to_string(run.variant);
}

TEST(Plot, EmptyManifestWritesNothing) {
  const fs::path out = scratch("plot_empty");
  fs::create_directories(out);
  write_file_atomic(out / "manifest.json", json{{"experiment", "e"}, {"svd_error", 1.0}, {"runs", json::array()}}.dump());
  const PlotOutput p = plot_manifest(out / "manifest.json");
  EXPECT_TRUE(p.files.empty());
  EXPECT_FALSE(p.notice.empty());
  std::size_t svgs = 0;
  for (const auto& e : fs::directory_iterator(out)) svgs += e.path().extension() == ".svg";
  EXPECT_EQ(svgs, 0u);
}

TEST(Plot, OneRunGivesFourPanelsWithSvdLineOnLogAxis) {
  const fs::path out = scratch("plot_one");
  SweepConfig c = small_config(out);
  c.model_kinds = {ModelKind::opmf};
  c.lrs = {1e-2};
  const SweepOutcome o = run_sweep(c);
  const PlotOutput p = plot_manifest(o.manifest_path);
  ASSERT_EQ(p.files.size(), 4u);
  const std::string fp = o.manifest.at("runs")[0].at("fingerprint").get<std::string>();
  for (const auto& f : p.files) {
    EXPECT_TRUE(fs::exists(f));
    const std::string name = f.filename().string();
    EXPECT_EQ(name.rfind("small_", 0), 0u) << name;
    const std::string svg = read_file(f);
    if (name != "small_grad_consistency_sgd.svg") {
      EXPECT_NE(svg.find(fp), std::string::npos) << name;
    }
  }

  const std::string loss_svg = read_file(out / "small_loss_sgd.svg");
  std::smatch mt;
  ASSERT_TRUE(std::regex_search(loss_svg, mt, std::regex("id=\"svd-line\" x1=\"[0-9.]+\" y1=\"([0-9.]+)\"")));
  const double y_drawn = std::stod(mt[1]);

  std::vector<double> ys;
  for (const auto& row : read_csv_file((out / o.manifest.at("runs")[0].at("csv").get<std::string>()).string()))
    ys.push_back(row.loss);
  const double svd_err = o.manifest.at("svd_error").get<double>();
  ys.push_back(svd_err);
  double lo = INFINITY, hi = 0;
  for (double y : ys) lo = std::min(lo, y), hi = std::max(hi, y);
  const double a_lo = std::pow(10.0, std::floor(std::log10(lo))), a_hi = std::pow(10.0, std::ceil(std::log10(hi)));
  const double u = (std::log10(svd_err) - std::log10(a_lo)) / (std::log10(a_hi) - std::log10(a_lo));
  const double y_expected = kPlotBottom - u * (kPlotBottom - kPlotTop);
  EXPECT_NEAR(y_drawn, y_expected, 0.006);

  // Byte-for-byte reproducible.
  const std::string again = read_file(plot_manifest(o.manifest_path).files[0]);
  EXPECT_EQ(again, read_file(p.files[0]));
}

TEST(Plot, MissingCsvNamesTheRun) {
  const fs::path out = scratch("plot_missing");
  SweepConfig c = small_config(out);
  c.lrs = {1e-2};
  c.model_kinds = {ModelKind::mf};
  const SweepOutcome o = run_sweep(c);
  const std::string fp = o.manifest.at("runs")[0].at("fingerprint").get<std::string>();
  fs::remove(out / (fp + ".csv"));
  try {
    plot_manifest(o.manifest_path);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fp), std::string::npos) << e.what();
  }
}

TEST(ExportAdapter, ReproducesRunAndRoundTrips) {
  const fs::path out = scratch("export");
  SweepConfig c = small_config(out);
  c.lrs = {1e-2};
  c.model_kinds = {ModelKind::opmf};
  const SweepOutcome o = run_sweep(c);
  const fs::path csv = out / o.manifest.at("runs")[0].at("csv").get<std::string>();
  const AdapterExport e = export_run_adapter(csv);
  EXPECT_EQ(e.a.rows(), 3);
  EXPECT_EQ(e.b.rows(), 20);
  save_adapter((out / "a.bin").string(), e);
  const AdapterExport back = load_adapter((out / "a.bin").string());
  EXPECT_EQ(back.a, e.a);
  EXPECT_EQ(back.b, e.b);
  const double loss = (make_target(*c.target) - e.b * e.a).squaredNorm();
  EXPECT_NEAR(loss, o.manifest.at("runs")[0].at("summary").at("final_loss").get<double>(), 1e-9 * loss);
}

TEST(Cli, ExitCodes) {
  const fs::path out = scratch("cli");
  fs::create_directories(out);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("verify-appendix"), 0);
  std::ofstream(out / "bad.json") << R"({"experiment": "x", "nonsense": 1})";
  EXPECT_EQ(run_cli("sweep " + (out / "bad.json").string()), 1);

  SweepConfig c = small_config(out / "run");
  c.lrs = {1e-2};
  c.model_kinds = {ModelKind::mf};
  std::ofstream(out / "good.json") << to_json(c).dump();
  EXPECT_EQ(run_cli("sweep " + (out / "good.json").string()), 0);
  EXPECT_EQ(run_cli("plot " + (out / "run" / "manifest.json").string()), 0);
  EXPECT_EQ(run_cli("run " + (out / "good.json").string() + " --cell mf-sgd-lr0.01-r3-s0"), 0);
  EXPECT_EQ(run_cli("run " + (out / "good.json").string() + " --cell nope"), 1);
  EXPECT_EQ(run_cli("export-adapter " + (out / "run" / "mf-sgd-lr0.01-r3-s0.csv").string() + " " +
                    (out / "a.bin").string()),
            0);
  EXPECT_TRUE(fs::exists(out / "a.bin"));
}
