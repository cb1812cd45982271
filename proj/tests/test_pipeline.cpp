#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kinflow/pipeline.hpp"

using namespace kinflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kinflow_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(KINFLOW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = ExperimentConfig::ci();
  c.n = 60;
  c.train.iterations = 30;
  c.train.batch_size = 16;
  c.train.hidden = {8, 8};
  c.samples = 30;
  c.solver.steps = 10;
  c.spike_solver.steps = 10;
  c.efm.neighbors = 20;
  c.efm.steps = 10;
  c.alpha_grid = {0.0, 0.02};
  c.beta_grid = {0.0, 0.02};
  c.diagnostics.knn_k = 5;
  c.theory.dims = {2};
  c.theory.atom_counts = {1, 5};
  c.theory.eps = {0.1};
  c.theory.points_per_cell = 3;
  c.output_dir = out.string();
  return c;
}

std::size_t skipped(const RunManifest& m) {
  std::size_t k = 0;
  for (const auto& s : m.stages) k += s.skipped ? 1 : 0;
  return k;
}

const StageRecord& stage_of(const RunManifest& m, const std::string& name) {
  for (const auto& s : m.stages)
    if (s.name == name) return s;
  throw std::runtime_error("no stage " + name);
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig c = tiny("out_x");
  const ExperimentConfig back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, ProfilesMatchTheirScale) {
  const auto ci = ExperimentConfig::ci();
  EXPECT_EQ(ci.n, 500u);
  EXPECT_EQ(ci.train.iterations, 5000u);
  EXPECT_EQ(ci.samples, 200u);
  EXPECT_EQ(ci.solver.steps, 50u);
  const auto paper = ExperimentConfig::paper();
  EXPECT_EQ(paper.n, 1000u);
  EXPECT_EQ(paper.train.iterations, 50000u);
  EXPECT_EQ(paper.samples, 500u);
  EXPECT_EQ(paper.solver.steps, 100u);
  EXPECT_THROW(ExperimentConfig::from_profile("huge"), InvalidArgument);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json({{"sampels", 30}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"train", {{"lr", 0.1}}}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"samples", 5}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"dataset", {{"kind", "spiral"}}}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"samples", "many"}}), InvalidArgument);
}

TEST(Hashing, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(hex64(0xabcull), "0000000000000abc");
}

TEST(Pipeline, RunCachesAndIsDeterministic) {
  const fs::path a = scratch("run_a");
  const fs::path b = scratch("run_b");
  const RunManifest m1 = Pipeline(tiny(a)).run();
  EXPECT_EQ(skipped(m1), 0u);
  for (const auto& s : m1.stages)
    for (const auto& o : s.outputs) EXPECT_TRUE(fs::exists(a / o)) << o;
  EXPECT_TRUE(fs::exists(a / "manifest.json"));
  EXPECT_FALSE(fs::exists(a / ".lock"));

  const RunManifest m2 = Pipeline(tiny(a)).run();
  EXPECT_EQ(skipped(m2), m2.stages.size());
  EXPECT_EQ(m2.content_hash(), m1.content_hash());

  // Same config in a second directory gives the same payloads.
  const RunManifest m3 = Pipeline(tiny(b)).run();
  for (const std::string f : {"data.csv", "heldout.csv", "model.ckpt.json", "loss.csv", "traces_vanilla.csv",
                              "summary_efm.json", "diagnostics_vanilla.json", "theory.json", "kts_sweep.csv",
                              "power_spike.json", "power.svg"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  // Changing only the diagnostics reruns downstream stages and keeps training cached.
  ExperimentConfig c = tiny(a);
  c.diagnostics.knn_k = 6;
  const RunManifest m4 = Pipeline(c).run();
  EXPECT_TRUE(stage_of(m4, "train").skipped);
  EXPECT_TRUE(stage_of(m4, "sample_vanilla").skipped);
  EXPECT_FALSE(stage_of(m4, "diagnose").skipped);
  EXPECT_FALSE(stage_of(m4, "kts_sweep").skipped);
  EXPECT_NE(m4.content_hash(), m1.content_hash());

  // A deleted output forces its stage to run again.
  fs::remove(a / "theory.json");
  const RunManifest m5 = Pipeline(c).run();
  EXPECT_FALSE(stage_of(m5, "verify_theory").skipped);
  EXPECT_TRUE(stage_of(m5, "train").skipped);

  const auto checks = evaluate_checks(a);
  EXPECT_TRUE(checks.detail.contains("inversion"));
}

TEST(Pipeline, IdentityKtsMatchesBaselineBytes) {
  const fs::path a = scratch("kts_zero");
  Pipeline(tiny(a)).run();
  // Sampling the same checkpoint through the CLI with and without explicit zero gains.
  const std::string base = "sample --model " + (a / "model.ckpt.json").string() + " --solver euler --steps 10 --m 30 --seed 11";
  ASSERT_EQ(cli(base + " --out " + (a / "plain").string()), 0);
  ASSERT_EQ(cli(base + " --alpha0 0 --beta0 0 --out " + (a / "zero").string()), 0);
  EXPECT_EQ(slurp(a / "plain" / "traces.csv"), slurp(a / "zero" / "traces.csv"));
  // And the pipeline's own baseline traces agree with the CLI run on identical settings.
  EXPECT_EQ(slurp(a / "traces_vanilla.csv"), slurp(a / "plain" / "traces.csv"));
}

TEST(Pipeline, LockBlocksConcurrentRun) {
  const fs::path a = scratch("locked");
  std::ofstream(a / ".lock") << "123\n";
  EXPECT_THROW(Pipeline(tiny(a)).run(), std::runtime_error);
  EXPECT_TRUE(fs::exists(a / ".lock"));
}

TEST(Plot, EmptyTraceSetRejected) {
  const fs::path a = scratch("plot_empty");
  EXPECT_THROW(emit_plots(a, {{"x", {}}}, nullptr), InvalidArgument);
}

TEST(Cli, ExitCodes) {
  const fs::path a = scratch("cli");
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli("no-such-command"), 2);
  EXPECT_EQ(cli("gen-data --kind spiral --out " + (a / "d.csv").string()), 2);
  EXPECT_EQ(cli("gen-data --n 5 --out " + (a / "d.csv").string()), 2);
  EXPECT_EQ(cli("gen-data --n 50 --seed 3 --out " + (a / "d.csv").string()), 0);
  EXPECT_EQ(read_dataset_csv((a / "d.csv").string()).points, gen_dense_sparse(50, 3).points);

  std::ofstream(a / "bad.json") << R"({"samples": 30, "unknown": 1})";
  EXPECT_EQ(cli("run --config " + (a / "bad.json").string()), 2);
  std::ofstream(a / "broken.json") << "{";
  EXPECT_EQ(cli("run --config " + (a / "broken.json").string()), 2);
  EXPECT_EQ(cli("sample --out " + (a / "s").string()), 2);  // neither --model nor --efm

  // A run whose output directory is locked fails as a stage failure.
  const fs::path locked = a / "locked_run";
  fs::create_directories(locked);
  std::ofstream(locked / ".lock") << "1\n";
  nlohmann::json cfg = to_json(tiny(locked));
  std::ofstream(a / "tiny.json") << cfg.dump();
  EXPECT_EQ(cli("run --config " + (a / "tiny.json").string()), 3);
}

TEST(Cli, SubcommandsProduceReports) {
  const fs::path a = scratch("cli_flow");
  const std::string d = (a / "d.csv").string();
  ASSERT_EQ(cli("gen-data --kind sandwich --n 80 --seed 2 --out " + d), 0);
  ASSERT_EQ(cli("sample --efm " + d + " --neighbors 20 --solver midpoint --steps 20 --m 30 --out " + (a / "efm").string()), 0);
  EXPECT_TRUE(fs::exists(a / "efm" / "traces.csv"));
  ASSERT_EQ(cli("diagnose --traces " + (a / "efm").string() + " --data " + d + " --k 5 --out " + (a / "diag.json").string()), 0);
  const auto diag = read_json_file(a / "diag.json");
  EXPECT_TRUE(diag.contains("rho_knn"));
  EXPECT_GT(diag["f_mem"].get<double>(), 0.5);
  ASSERT_EQ(cli("verify-theory --data " + d + " --dims 2 --atoms 1,5 --eps 0.1 --points 3 --out " + (a / "th.json").string()), 0);
  EXPECT_EQ(read_json_file(a / "th.json")["sweep"]["bound_pass_rate"], 1.0);
  ASSERT_EQ(cli("plot --traces " + (a / "efm" / "traces.csv").string() + " --data " + d + " --out " + (a / "plots").string()), 0);
  EXPECT_TRUE(fs::exists(a / "plots" / "power.svg"));
}
