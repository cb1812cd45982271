// kinflow command-line front end.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kinflow/diagnostics.hpp"
#include "kinflow/efm.hpp"
#include "kinflow/experiments.hpp"
#include "kinflow/field.hpp"
#include "kinflow/pipeline.hpp"
#include "kinflow/plot.hpp"
#include "kinflow/sampler.hpp"
#include "kinflow/synthdata.hpp"
#include "kinflow/theory.hpp"
#include "kinflow/train.hpp"

namespace {

using namespace kinflow;

constexpr int kExitInvalid = 2;
constexpr int kExitStage = 3;
constexpr int kExitCheck = 4;

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string x; std::getline(ss, x, ',');)
    if (!x.empty()) out.push_back(parse_double(x));
  if (out.empty()) throw InvalidArgument("empty list: '" + s + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (double v : parse_list(s)) {
    if (v != std::floor(v)) throw InvalidArgument("expected integers: '" + s + "'");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string kind = "dense_sparse";
  std::size_t n = 1000;
  std::uint64_t seed = 7;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a) {
  write_dataset_csv(a.out, generate(parse_dataset_kind(a.kind), a.n, a.seed));
}

struct TrainArgs {
  std::string data;
  std::size_t iters = 50000;
  double lr = 3e-4;
  double wd = 1e-4;
  std::size_t batch = 256;
  std::uint64_t seed = 1;
  std::string out;
  std::string loss;
  bool quiet = false;
};

void cmd_train(const TrainArgs& a) {
  const LabeledDataset data = read_dataset_csv(a.data);
  TrainConfig cfg;
  cfg.iterations = a.iters;
  cfg.learning_rate = a.lr;
  cfg.weight_decay = a.wd;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  const std::size_t every = std::max<std::size_t>(1, a.iters / 20);
  const TrainResult r = train(data, cfg, [&](std::size_t it, double loss) {
    if (!a.quiet && (it % every == 0 || it + 1 == a.iters)) std::cerr << "iter " << it << " loss " << loss << '\n';
  });
  save_checkpoint(a.out, r.params);
  write_loss_curve_csv(a.loss.empty() ? a.out + ".loss.csv" : a.loss, r.loss_curve);
}

struct SampleArgs {
  std::string model;
  std::string efm;
  std::size_t neighbors = 100;
  std::string solver = "euler";
  std::size_t steps = 100;
  std::size_t m = 500;
  std::optional<double> delta_cut;
  double alpha0 = 0.0;
  double beta0 = 0.0;
  double k = 3.0;
  double tau = 0.6;
  std::uint64_t seed = 11;
  std::string out;
};

void cmd_sample(const SampleArgs& a) {
  if (a.model.empty() == a.efm.empty()) throw InvalidArgument("give exactly one of --model or --efm");
  const bool is_efm = !a.efm.empty();
  SolverConfig cfg{parse_solver_method(a.solver), a.steps, a.delta_cut.value_or(is_efm ? 1e-3 : 0.0), a.seed};
  const KtsSchedule kts{a.alpha0, a.beta0, a.k, a.tau};
  kts.validate();
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  auto emit = [&](const auto& field, const std::string& name) {
    const SampleBatch b = sample_batch(field, a.m, cfg, a.tau);
    std::ofstream os(dir / "traces.csv");
    write_traces_csv(os, b);
    write_json_file(dir / "summary.json", batch_summary_json(b, cfg, a.tau, name, kts));
    if (!b.failures.empty()) std::cerr << b.failures.size() << " trajectories diverged\n";
  };
  auto run = [&](const auto& base, const std::string& name) {
    if (kts.is_identity())
      emit(base, name);
    else
      emit(shaped_field(base, kts), name + "+kts");
  };
  if (is_efm) {
    if (!(cfg.delta_cut > 0.0)) throw InvalidArgument("EFM sampling needs --delta-cut > 0");
    run(EfmField::from_points(read_dataset_csv(a.efm).points, a.neighbors), "efm");
  } else {
    run(NeuralField(load_checkpoint(a.model)), "network");
  }
}

struct DiagnoseArgs {
  std::string traces;
  std::string data;
  std::string heldout;
  std::size_t k = 50;
  double bandwidth = 0.1;
  double tau_gap = 1.0 / 3.0;
  std::size_t k_mem = 2;
  std::string out;
};

void cmd_diagnose(const DiagnoseArgs& a) {
  std::filesystem::path summary(a.traces);
  if (std::filesystem::is_directory(summary)) summary /= "summary.json";
  const auto [kpe, ends] = read_summary(summary);
  const LabeledDataset data = read_dataset_csv(a.data);
  std::optional<std::vector<Point2>> held;
  if (!a.heldout.empty()) held = read_dataset_csv(a.heldout).points;
  const DiagnosticsParams p{a.k, a.bandwidth, a.tau_gap, a.k_mem};
  write_json_file(a.out, diagnose(kpe, ends, data, p, held ? &*held : nullptr));
}

struct TheoryArgs {
  std::string data;
  std::string eps = "0.05,0.1,0.3";
  std::string dims = "1,2,5";
  std::string atoms = "1,5,50";
  std::size_t points = 50;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_verify_theory(const TheoryArgs& a) {
  TheorySettings s;
  s.eps = parse_list(a.eps);
  s.dims = parse_int_list(a.dims);
  s.atom_counts = parse_int_list(a.atoms);
  s.points_per_cell = a.points;
  s.seed = a.seed;
  for (double e : s.eps) require(e > 0.0 && e < 0.5, "eps must lie in (0, 0.5)");
  const LabeledDataset data = read_dataset_csv(a.data);
  const json rep = Pipeline::theory_report(data, s);
  write_json_file(a.out, rep);
  const bool ok = rep["sweep"]["bound_pass_rate"].get<double>() == 1.0 &&
                  rep["sweep"]["remainder_pass_rate"].get<double>() == 1.0 &&
                  rep["sweep"]["score_remainder_pass_rate"].get<double>() == 1.0;
  std::cout << "dominant points: " << rep["sweep"]["dominant_points"] << ", bound pass rate "
            << rep["sweep"]["bound_pass_rate"] << '\n';
  return ok ? 0 : kExitCheck;
}

struct SweepArgs {
  std::string model;
  std::string data;
  std::string heldout;
  std::uint64_t heldout_seed = 8;
  std::string alphas = "0,0.01,0.02";
  std::string betas = "0,0.01,0.02";
  double k = 3.0;
  double tau = 0.6;
  std::string solver = "euler";
  std::size_t steps = 100;
  std::size_t m = 500;
  std::uint64_t seed = 11;
  std::string out;
};

void cmd_kts_sweep(const SweepArgs& a) {
  const LabeledDataset data = read_dataset_csv(a.data);
  const std::vector<Point2> held =
      a.heldout.empty() ? generate(data.kind, std::max<std::size_t>(a.m, 10), a.heldout_seed).points
                        : read_dataset_csv(a.heldout).points;
  const NeuralField base(load_checkpoint(a.model));
  const SolverConfig cfg{parse_solver_method(a.solver), a.steps, 0.0, a.seed};
  const auto rows = kts_sweep(base, data, held, a.m, cfg, parse_list(a.alphas), parse_list(a.betas), a.k, a.tau);
  std::ofstream os(a.out);
  if (!os) throw std::runtime_error("cannot open " + a.out);
  write_sweep_csv(os, rows);
}

struct RunArgs {
  std::string config;
  std::string profile = "ci";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string kind;
  bool check = false;
};

int cmd_run(const RunArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig::from_profile(a.profile) : load_config(a.config);
  if (!a.kind.empty()) cfg.kind = parse_dataset_kind(a.kind);
  if (a.seed) {
    cfg.data_seed = *a.seed;
    cfg.heldout_seed = *a.seed + 1;
    cfg.train.seed = *a.seed;
    cfg.solver.seed = *a.seed;
    cfg.spike_solver.seed = *a.seed;
  }
  if (!a.out.empty()) cfg.output_dir = a.out;
  cfg.validate();
  Pipeline p(cfg, [](const std::string& msg) { std::cerr << msg << '\n'; });
  const RunManifest man = p.run();
  std::cout << "manifest " << man.content_hash() << " in " << p.dir().string() << '\n';
  if (a.check) {
    const PipelineChecks c = evaluate_checks(p.dir());
    write_json_file(p.dir() / "checks.json", c.detail);
    std::cout << c.detail.dump() << '\n';
    if (!c.all()) return kExitCheck;
  }
  return 0;
}

struct PlotArgs {
  std::vector<std::string> traces;
  std::string data;
  std::string out;
};

void cmd_plot(const PlotArgs& a) {
  std::vector<std::pair<std::string, std::vector<TraceRecord>>> sets;
  for (const auto& t : a.traces) {
    std::filesystem::path p(t);
    std::string name;
    if (std::filesystem::is_directory(p)) {
      name = p.filename().empty() ? p.parent_path().filename().string() : p.filename().string();
      p /= "traces.csv";
    } else {
      name = p.stem().string();
      if (name.rfind("traces_", 0) == 0) name = name.substr(7);
    }
    sets.emplace_back(name, read_traces_csv(p.string()));
  }
  std::optional<LabeledDataset> data;
  if (!a.data.empty()) data = read_dataset_csv(a.data);
  std::filesystem::create_directories(a.out);
  emit_plots(a.out, sets, data ? &*data : nullptr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kinetic path energy diagnostics for flow-matching samplers"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a labeled 2D dataset");
  c_gen->add_option("--kind", gen.kind, "dense_sparse | multiscale_clusters | sandwich")->capture_default_str();
  c_gen->add_option("--n", gen.n, "Number of points")->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output CSV")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the velocity network");
  c_train->add_option("--data", tr.data, "Dataset CSV")->required();
  c_train->add_option("--iters", tr.iters)->capture_default_str();
  c_train->add_option("--lr", tr.lr)->capture_default_str();
  c_train->add_option("--wd", tr.wd, "Weight decay")->capture_default_str();
  c_train->add_option("--batch", tr.batch)->capture_default_str();
  c_train->add_option("--seed", tr.seed)->capture_default_str();
  c_train->add_option("--out", tr.out, "Checkpoint path (JSON)")->required();
  c_train->add_option("--loss", tr.loss, "Loss curve CSV (default: <out>.loss.csv)");
  c_train->add_flag("--quiet", tr.quiet);

  SampleArgs sa;
  auto* c_sample = app.add_subcommand("sample", "Integrate trajectories and record KPE");
  c_sample->add_option("--model", sa.model, "Network checkpoint");
  c_sample->add_option("--efm", sa.efm, "Dataset CSV for the closed-form EFM field");
  c_sample->add_option("--neighbors", sa.neighbors, "EFM nearest-neighbor truncation")->capture_default_str();
  c_sample->add_option("--solver", sa.solver, "euler | midpoint")->capture_default_str();
  c_sample->add_option("--steps", sa.steps)->capture_default_str();
  c_sample->add_option("--m", sa.m, "Number of trajectories")->capture_default_str();
  c_sample->add_option("--delta-cut", sa.delta_cut, "Stop at t = 1 - delta (default 1e-3 for EFM, 0 otherwise)");
  c_sample->add_option("--alpha0", sa.alpha0)->capture_default_str();
  c_sample->add_option("--beta0", sa.beta0)->capture_default_str();
  c_sample->add_option("--k", sa.k, "Soft-landing rate")->capture_default_str();
  c_sample->add_option("--tau", sa.tau, "Early/late split time")->capture_default_str();
  c_sample->add_option("--seed", sa.seed)->capture_default_str();
  c_sample->add_option("--out", sa.out, "Output directory")->required();

  DiagnoseArgs dg;
  auto* c_diag = app.add_subcommand("diagnose", "KPE vs density statistics, F_mem and W2");
  c_diag->add_option("--traces", dg.traces, "Sample output directory or summary JSON")->required();
  c_diag->add_option("--data", dg.data, "Training dataset CSV")->required();
  c_diag->add_option("--heldout", dg.heldout, "Held-out dataset CSV for W2");
  c_diag->add_option("--k", dg.k)->capture_default_str();
  c_diag->add_option("--bandwidth", dg.bandwidth)->capture_default_str();
  c_diag->add_option("--tau-gap", dg.tau_gap)->capture_default_str();
  c_diag->add_option("--k-mem", dg.k_mem)->capture_default_str();
  c_diag->add_option("--out", dg.out, "Report JSON")->required();

  TheoryArgs th;
  auto* c_th = app.add_subcommand("verify-theory", "Numerical checks of the energy-density bounds");
  c_th->add_option("--data", th.data, "Dataset CSV")->required();
  c_th->add_option("--eps", th.eps)->capture_default_str();
  c_th->add_option("--dims", th.dims)->capture_default_str();
  c_th->add_option("--atoms", th.atoms, "Mixture sizes")->capture_default_str();
  c_th->add_option("--points", th.points, "Dominant points per cell")->capture_default_str();
  c_th->add_option("--seed", th.seed)->capture_default_str();
  c_th->add_option("--out", th.out, "Report JSON")->required();

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("kts-sweep", "Grid over (alpha0, beta0)");
  c_sw->add_option("--model", sw.model)->required();
  c_sw->add_option("--data", sw.data)->required();
  c_sw->add_option("--heldout", sw.heldout);
  c_sw->add_option("--heldout-seed", sw.heldout_seed)->capture_default_str();
  c_sw->add_option("--alpha0", sw.alphas, "Comma-separated grid")->capture_default_str();
  c_sw->add_option("--beta0", sw.betas, "Comma-separated grid")->capture_default_str();
  c_sw->add_option("--k", sw.k)->capture_default_str();
  c_sw->add_option("--tau", sw.tau)->capture_default_str();
  c_sw->add_option("--solver", sw.solver)->capture_default_str();
  c_sw->add_option("--steps", sw.steps)->capture_default_str();
  c_sw->add_option("--m", sw.m)->capture_default_str();
  c_sw->add_option("--seed", sw.seed)->capture_default_str();
  c_sw->add_option("--out", sw.out, "CSV table")->required();

  RunArgs rn;
  auto* c_run = app.add_subcommand("run", "Full pipeline with stage caching");
  c_run->add_option("--config", rn.config, "Config JSON");
  c_run->add_option("--profile", rn.profile, "ci | paper (ignored with --config)")->capture_default_str();
  c_run->add_option("--kind", rn.kind, "Override the dataset kind");
  c_run->add_option("--seed", rn.seed, "Override every seed");
  c_run->add_option("--out", rn.out, "Override the output directory");
  c_run->add_flag("--check", rn.check, "Exit 4 unless the experiment checks pass");

  PlotArgs pl;
  auto* c_plot = app.add_subcommand("plot", "SVG power/energy curves and KPE-by-stratum boxes");
  c_plot->add_option("--traces", pl.traces, "Trace CSVs or sample directories")->required();
  c_plot->add_option("--data", pl.data, "Dataset CSV for stratum boxes");
  c_plot->add_option("--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*c_gen) cmd_gen_data(gen);
    if (*c_train) cmd_train(tr);
    if (*c_sample) cmd_sample(sa);
    if (*c_diag) cmd_diagnose(dg);
    if (*c_th) return cmd_verify_theory(th);
    if (*c_sw) cmd_kts_sweep(sw);
    if (*c_run) return cmd_run(rn);
    if (*c_plot) cmd_plot(pl);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const StageFailed& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return 0;
}
