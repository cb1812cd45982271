#pragma once

// Declarative experiment config and the staged, cached pipeline behind `kinflow run`.

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "kinflow/diagnostics.hpp"
#include "kinflow/efm.hpp"
#include "kinflow/experiments.hpp"
#include "kinflow/field.hpp"
#include "kinflow/plot.hpp"
#include "kinflow/sampler.hpp"
#include "kinflow/synthdata.hpp"
#include "kinflow/theory.hpp"
#include "kinflow/train.hpp"

#ifndef KINFLOW_VERSION
#define KINFLOW_VERSION "0.0.0"
#endif

namespace kinflow {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = KINFLOW_VERSION;

class StageFailed : public std::runtime_error {
 public:
  StageFailed(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct EfmSettings {
  std::size_t neighbors = 100;
  double delta_cut = 1e-3;
  SolverMethod method = SolverMethod::midpoint;
  std::size_t steps = 100;
};

struct TheorySettings {
  std::vector<double> eps{0.05, 0.1, 0.3};
  std::vector<int> dims{1, 2, 5};
  std::vector<int> atom_counts{1, 5, 50};
  std::size_t points_per_cell = 50;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string profile = "ci";
  DatasetKind kind = DatasetKind::dense_sparse;
  std::size_t n = 500;
  std::uint64_t data_seed = 7;
  std::uint64_t heldout_seed = 8;
  TrainConfig train;
  SolverConfig solver;           // baseline network sampling
  SolverConfig spike_solver;     // network vs EFM power comparison
  EfmSettings efm;
  std::size_t samples = 200;
  double tau_split = 0.6;
  KtsSchedule kts;
  std::vector<double> alpha_grid{0.0, 0.01, 0.02};
  std::vector<double> beta_grid{0.0, 0.01, 0.02};
  DiagnosticsParams diagnostics;
  TheorySettings theory;
  std::string output_dir = "out";

  static ExperimentConfig ci() {
    ExperimentConfig c;
    c.train.iterations = 5000;
    c.solver = {SolverMethod::euler, 50, 0.0, 11};
    c.spike_solver = {SolverMethod::midpoint, 100, 0.0, 11};
    return c;
  }

  static ExperimentConfig paper() {
    ExperimentConfig c = ci();
    c.profile = "paper";
    c.n = 1000;
    c.train.iterations = 50000;
    c.samples = 500;
    c.solver.steps = 100;
    return c;
  }

  static ExperimentConfig from_profile(const std::string& name) {
    if (name == "ci") return ci();
    if (name == "paper") return paper();
    throw InvalidArgument("unknown profile: " + name);
  }

  void validate() const {
    require(n >= 10, "dataset size must be at least 10");
    train.validate();
    solver.validate();
    spike_solver.validate();
    require(samples >= kMinReportTrajectories, "need at least 30 samples for the diagnostics");
    require(samples <= kW2MaxSize, "at most 1024 samples (exact W2 limit)");
    require(efm.neighbors >= 1 && efm.neighbors <= n, "EFM neighbors must lie in [1, n]");
    require(efm.delta_cut > 0.0 && efm.delta_cut < 0.5, "EFM delta_cut must lie in (0, 0.5)");
    require(efm.steps >= 1, "EFM steps must be positive");
    require(tau_split > 0.0 && tau_split < 1.0, "tau_split must lie in (0, 1)");
    KtsSchedule s = kts;
    s.tau_split = tau_split;
    s.validate();
    for (double a : alpha_grid) require(a >= 0.0, "alpha grid values must be non-negative");
    for (double b : beta_grid) require(b >= 0.0, "beta grid values must be non-negative");
    require(diagnostics.knn_k >= 1 && diagnostics.knn_k <= n, "knn k must lie in [1, n]");
    require(diagnostics.bandwidth > 0.0, "bandwidth must be positive");
    require(diagnostics.k_mem >= 2, "k_mem must be at least 2");
    require(diagnostics.tau_gap > 0.0, "tau_gap must be positive");
    for (double e : theory.eps) require(e > 0.0 && e < 0.5, "theory eps must lie in (0, 0.5)");
    for (int d : theory.dims) require(d >= 1, "theory dims must be positive");
    for (int m : theory.atom_counts) require(m >= 1, "theory atom counts must be positive");
    require(!output_dir.empty(), "output_dir must be set");
  }

  KtsSchedule schedule() const {
    KtsSchedule s = kts;
    s.tau_split = tau_split;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Config <-> JSON.

inline json solver_json(const SolverConfig& s) {
  return {{"method", to_string(s.method)}, {"steps", s.steps}, {"delta_cut", s.delta_cut}, {"seed", s.seed}};
}

inline json to_json(const ExperimentConfig& c) {
  return {{"profile", c.profile},
          {"dataset", {{"kind", to_string(c.kind)}, {"n", c.n}, {"seed", c.data_seed}, {"heldout_seed", c.heldout_seed}}},
          {"train",
           {{"learning_rate", c.train.learning_rate},
            {"weight_decay", c.train.weight_decay},
            {"batch_size", c.train.batch_size},
            {"iterations", c.train.iterations},
            {"seed", c.train.seed},
            {"hidden", c.train.hidden}}},
          {"solver", solver_json(c.solver)},
          {"spike_solver", solver_json(c.spike_solver)},
          {"efm",
           {{"neighbors", c.efm.neighbors},
            {"delta_cut", c.efm.delta_cut},
            {"method", to_string(c.efm.method)},
            {"steps", c.efm.steps}}},
          {"samples", c.samples},
          {"tau_split", c.tau_split},
          {"kts", {{"alpha0", c.kts.alpha0}, {"beta0", c.kts.beta0}, {"k", c.kts.k}}},
          {"kts_sweep", {{"alpha0", c.alpha_grid}, {"beta0", c.beta_grid}}},
          {"diagnostics",
           {{"knn_k", c.diagnostics.knn_k},
            {"bandwidth", c.diagnostics.bandwidth},
            {"tau_gap", c.diagnostics.tau_gap},
            {"k_mem", c.diagnostics.k_mem}}},
          {"theory",
           {{"eps", c.theory.eps},
            {"dims", c.theory.dims},
            {"atom_counts", c.theory.atom_counts},
            {"points_per_cell", c.theory.points_per_cell},
            {"seed", c.theory.seed}}},
          {"output_dir", c.output_dir}};
}

namespace detail {

/// Reads `obj[key]` into `out` when present; rejects keys not listed in `allowed`.
class JsonReader {
 public:
  JsonReader(const json& obj, std::string where, std::set<std::string> allowed) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw InvalidArgument(where_ + " must be an object");
    for (const auto& [k, v] : obj_.items())
      if (!allowed.count(k)) throw InvalidArgument("unknown key '" + k + "' in " + where_);
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidArgument("bad value for " + where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const std::string& key) const { return obj_.contains(key) ? &obj_.at(key) : nullptr; }

 private:
  const json& obj_;
  std::string where_;
};

inline void read_solver(const json& j, const std::string& where, SolverConfig& s) {
  JsonReader r(j, where, {"method", "steps", "delta_cut", "seed"});
  std::string m(to_string(s.method));
  r.get("method", m);
  s.method = parse_solver_method(m);
  r.get("steps", s.steps);
  r.get("delta_cut", s.delta_cut);
  r.get("seed", s.seed);
}

}  // namespace detail

/// Missing keys take the profile defaults (the "profile" key itself picks the base).
inline ExperimentConfig config_from_json(const json& j) {
  using detail::JsonReader;
  const JsonReader top(j, "config",
                       {"profile", "dataset", "train", "solver", "spike_solver", "efm", "samples", "tau_split", "kts",
                        "kts_sweep", "diagnostics", "theory", "output_dir"});
  std::string profile = "ci";
  top.get("profile", profile);
  ExperimentConfig c = ExperimentConfig::from_profile(profile);
  if (const json* d = top.sub("dataset")) {
    JsonReader r(*d, "dataset", {"kind", "n", "seed", "heldout_seed"});
    std::string kind(to_string(c.kind));
    r.get("kind", kind);
    c.kind = parse_dataset_kind(kind);
    r.get("n", c.n);
    r.get("seed", c.data_seed);
    r.get("heldout_seed", c.heldout_seed);
  }
  if (const json* t = top.sub("train")) {
    JsonReader r(*t, "train", {"learning_rate", "weight_decay", "batch_size", "iterations", "seed", "hidden"});
    r.get("learning_rate", c.train.learning_rate);
    r.get("weight_decay", c.train.weight_decay);
    r.get("batch_size", c.train.batch_size);
    r.get("iterations", c.train.iterations);
    r.get("seed", c.train.seed);
    r.get("hidden", c.train.hidden);
  }
  if (const json* s = top.sub("solver")) detail::read_solver(*s, "solver", c.solver);
  if (const json* s = top.sub("spike_solver")) detail::read_solver(*s, "spike_solver", c.spike_solver);
  if (const json* e = top.sub("efm")) {
    JsonReader r(*e, "efm", {"neighbors", "delta_cut", "method", "steps"});
    r.get("neighbors", c.efm.neighbors);
    r.get("delta_cut", c.efm.delta_cut);
    std::string m(to_string(c.efm.method));
    r.get("method", m);
    c.efm.method = parse_solver_method(m);
    r.get("steps", c.efm.steps);
  }
  top.get("samples", c.samples);
  top.get("tau_split", c.tau_split);
  if (const json* k = top.sub("kts")) {
    JsonReader r(*k, "kts", {"alpha0", "beta0", "k"});
    r.get("alpha0", c.kts.alpha0);
    r.get("beta0", c.kts.beta0);
    r.get("k", c.kts.k);
  }
  if (const json* k = top.sub("kts_sweep")) {
    JsonReader r(*k, "kts_sweep", {"alpha0", "beta0"});
    r.get("alpha0", c.alpha_grid);
    r.get("beta0", c.beta_grid);
  }
  if (const json* d = top.sub("diagnostics")) {
    JsonReader r(*d, "diagnostics", {"knn_k", "bandwidth", "tau_gap", "k_mem"});
    r.get("knn_k", c.diagnostics.knn_k);
    r.get("bandwidth", c.diagnostics.bandwidth);
    r.get("tau_gap", c.diagnostics.tau_gap);
    r.get("k_mem", c.diagnostics.k_mem);
  }
  if (const json* t = top.sub("theory")) {
    JsonReader r(*t, "theory", {"eps", "dims", "atom_counts", "points_per_cell", "seed"});
    r.get("eps", c.theory.eps);
    r.get("dims", c.theory.dims);
    r.get("atom_counts", c.theory.atom_counts);
    r.get("points_per_cell", c.theory.points_per_cell);
    r.get("seed", c.theory.seed);
  }
  top.get("output_dir", c.output_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Hashing and files.

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Canonical form: nlohmann::json objects keep keys sorted, so dump() is stable.
inline std::string hash_json(const json& j) { return hex64(fnv1a(j.dump())); }

inline void write_json_file(const fs::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  os << j.dump(2) << '\n';
}

inline json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw InvalidArgument("cannot open " + p.string());
  return json::parse(is);
}

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error("output directory is locked by another run (remove " + path_.string() +
                               " if no run is active)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      // Best effort: the lock is the file's existence, not its content.
    }
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Pipeline.

struct StageRecord {
  std::string name;
  std::string key;
  std::vector<std::string> outputs;  // relative to the output directory
  bool skipped = false;
  double seconds = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::vector<StageRecord> stages;

  /// Hash over everything except wall-clock and skip flags.
  std::string content_hash() const {
    json j = {{"config_hash", config_hash}, {"tool_version", tool_version}};
    for (const auto& s : stages) j["stages"].push_back({{"name", s.name}, {"key", s.key}, {"outputs", s.outputs}});
    return hash_json(j);
  }

  json to_json() const {
    json st = json::array();
    for (const auto& s : stages)
      st.push_back({{"name", s.name}, {"key", s.key}, {"outputs", s.outputs}, {"skipped", s.skipped}, {"seconds", s.seconds}});
    return {{"config_hash", config_hash},
            {"tool_version", tool_version},
            {"manifest_hash", content_hash()},
            {"stages", st}};
  }
};

using PipelineLog = std::function<void(const std::string&)>;

struct SampleArtifacts {
  std::string traces;
  std::string summary;
};

template <VelocityField F>
void write_sample_artifacts(const fs::path& dir, const std::string& stem, const F& field, const SolverConfig& solver,
                            std::size_t m, double tau_split, const std::string& field_name, const KtsSchedule& kts) {
  const SampleBatch b = sample_batch(field, m, solver, tau_split);
  {
    std::ofstream os(dir / ("traces_" + stem + ".csv"));
    if (!os) throw std::runtime_error("cannot write traces");
    write_traces_csv(os, b);
  }
  write_json_file(dir / ("summary_" + stem + ".json"), batch_summary_json(b, solver, tau_split, field_name, kts));
}

/// KPE and endpoints back from a summary file.
inline std::pair<std::vector<double>, std::vector<Point2>> read_summary(const fs::path& p) {
  const json j = read_json_file(p);
  std::vector<double> kpe;
  std::vector<Point2> ends;
  for (const auto& t : j.at("trajectories")) {
    kpe.push_back(t.at("kpe").get<double>());
    ends.push_back({t.at("endpoint").at(0).get<double>(), t.at("endpoint").at(1).get<double>()});
  }
  return {kpe, ends};
}

inline void emit_plots(const fs::path& dir, const std::vector<std::pair<std::string, std::vector<TraceRecord>>>& sets,
                       const LabeledDataset* data) {
  require(!sets.empty(), "empty trace set");
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::vector<NamedBand> power, energy;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    require(!sets[k].second.empty(), "empty trace set " + sets[k].first);
    power.push_back({sets[k].first, colors[k % 5], power_band(sets[k].second)});
    energy.push_back({sets[k].first, colors[k % 5], energy_band(sets[k].second)});
  }
  write_text_file((dir / "power.svg").string(), band_plot_svg("Instantaneous power", "t", "|v|^2", power));
  write_text_file((dir / "energy.svg").string(), band_plot_svg("Cumulative kinetic energy", "t", "KPE(t)", energy));
  if (data) {
    for (const auto& [name, traces] : sets) {
      NamedSample dense{"dense", {}}, sparse{"sparse", {}};
      for (const auto& r : traces) {
        const Point2 e{r.x.back(), r.y.back()};
        (is_dense(data->strata[nearest_index(data->points, e)]) ? dense : sparse).values.push_back(r.kpe());
      }
      std::vector<NamedSample> groups;
      if (!dense.values.empty()) groups.push_back(dense);
      if (!sparse.values.empty()) groups.push_back(sparse);
      write_text_file((dir / ("kpe_strata_" + name + ".svg")).string(),
                      box_plot_svg("KPE by endpoint stratum (" + name + ")", "KPE", groups));
    }
  }
}

struct PipelineChecks {
  bool inversion = false;
  bool efm_memorization = false;
  bool kts_direction = false;
  json detail;
  bool all() const { return inversion && efm_memorization && kts_direction; }
};

/// Criteria that can be read off the pipeline's own reports.
inline PipelineChecks evaluate_checks(const fs::path& dir) {
  PipelineChecks c;
  const json dv = read_json_file(dir / "diagnostics_vanilla.json");
  const json de = read_json_file(dir / "diagnostics_efm.json");
  const bool have_mwu = !dv.at("mwu_p").is_null();
  c.inversion = have_mwu && dv.at("mwu_p").get<double>() < 1e-3 && dv.at("cliffs_delta").get<double>() < 0.0 &&
                dv.at("rho_kde").get<double>() < -0.3;
  c.efm_memorization = de.at("f_mem").get<double>() >= 0.95 &&
                       de.at("f_mem").get<double>() - dv.at("f_mem").get<double>() >= 0.20;
  // KTS: read back the sweep table.
  std::ifstream is(dir / "kts_sweep.csv");
  std::string line;
  std::getline(is, line);
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() < 8 || f[0] != "kts") continue;
    SweepRow r;
    r.alpha0 = parse_double(f[1]);
    r.beta0 = parse_double(f[2]);
    r.f_mem = parse_double(f[4]);
    r.kpe_early = parse_double(f[5]);
    r.kpe_late = parse_double(f[6]);
    rows.push_back(r);
  }
  std::set<double> as, bs;
  for (const auto& r : rows) {
    as.insert(r.alpha0);
    bs.insert(r.beta0);
  }
  auto find = [&](double a, double b) -> const SweepRow* {
    for (const auto& r : rows)
      if (r.alpha0 == a && r.beta0 == b) return &r;
    return nullptr;
  };
  bool ok = !rows.empty();
  for (double b : bs) {
    const SweepRow* prev = nullptr;
    for (double a : as) {
      const SweepRow* r = find(a, b);
      if (!r) continue;
      if (prev && r->kpe_early < prev->kpe_early) ok = false;
      prev = r;
    }
  }
  for (double a : as) {
    const SweepRow* prev = nullptr;
    for (double b : bs) {
      const SweepRow* r = find(a, b);
      if (!r) continue;
      if (prev && r->kpe_late > prev->kpe_late) ok = false;
      prev = r;
    }
  }
  if (!as.empty() && !bs.empty()) {
    const SweepRow* base = find(*as.begin(), *bs.begin());
    const SweepRow* damp = find(*as.begin(), *bs.rbegin());
    if (base && damp && damp->f_mem > base->f_mem) ok = false;
  }
  c.kts_direction = ok;
  c.detail = {{"inversion", c.inversion}, {"efm_memorization", c.efm_memorization}, {"kts_direction", c.kts_direction}};
  return c;
}

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, PipelineLog log = {}) : cfg_(std::move(cfg)), log_(std::move(log)) {
    cfg_.validate();
    dir_ = cfg_.output_dir;
  }

  RunManifest run() {
    DirLock lock(dir_);
    fs::create_directories(dir_ / ".stages");
    write_json_file(dir_ / "config.json", to_json(cfg_));
    RunManifest man;
    man.config_hash = hash_json(to_json(cfg_));
    const json c = to_json(cfg_);

    const std::string k_data = key({c["dataset"], c["samples"]});
    stage(man, "data", k_data, {"data.csv", "heldout.csv"}, [&] {
      write_dataset_csv((dir_ / "data.csv").string(), generate(cfg_.kind, cfg_.n, cfg_.data_seed));
      write_dataset_csv((dir_ / "heldout.csv").string(),
                        generate(cfg_.kind, std::max<std::size_t>(cfg_.samples, 10), cfg_.heldout_seed));
    });
    const std::string k_train = key({k_data, c["train"]});
    stage(man, "train", k_train, {"model.ckpt.json", "loss.csv"}, [&] {
      const TrainResult r = train(data(), cfg_.train);
      save_checkpoint((dir_ / "model.ckpt.json").string(), r.params);
      write_loss_curve_csv((dir_ / "loss.csv").string(), r.loss_curve);
    });
    const std::string k_vanilla = key({k_train, c["solver"], c["kts"], c["samples"], c["tau_split"]});
    stage(man, "sample_vanilla", k_vanilla, {"traces_vanilla.csv", "summary_vanilla.json"}, [&] {
      const NeuralField base(model());
      const KtsSchedule s = cfg_.schedule();
      if (s.is_identity()) {
        write_sample_artifacts(dir_, "vanilla", base, cfg_.solver, cfg_.samples, cfg_.tau_split, "network", s);
      } else {
        write_sample_artifacts(dir_, "vanilla", shaped_field(base, s), cfg_.solver, cfg_.samples, cfg_.tau_split,
                               "network+kts", s);
      }
    });
    const std::string k_efm = key({k_data, c["efm"], c["samples"], c["solver"]["seed"], c["tau_split"]});
    stage(man, "sample_efm", k_efm, {"traces_efm.csv", "summary_efm.json"}, [&] {
      const EfmField f = EfmField::from_points(data().points, cfg_.efm.neighbors);
      write_sample_artifacts(dir_, "efm", f, efm_solver(), cfg_.samples, cfg_.tau_split, "efm", KtsSchedule{});
    });
    const std::string k_diag = key({k_vanilla, k_efm, c["diagnostics"]});
    stage(man, "diagnose", k_diag, {"diagnostics_vanilla.json", "diagnostics_efm.json"}, [&] {
      const auto held = heldout().points;
      for (const std::string stem : {"vanilla", "efm"}) {
        const auto [kpe, ends] = read_summary(dir_ / ("summary_" + stem + ".json"));
        write_json_file(dir_ / ("diagnostics_" + stem + ".json"), diagnose(kpe, ends, data(), cfg_.diagnostics, &held));
      }
    });
    const std::string k_theory = key({k_data, c["theory"], c["efm"]});
    stage(man, "verify_theory", k_theory, {"theory.json"}, [&] {
      write_json_file(dir_ / "theory.json", theory_report(data(), cfg_.theory));
    });
    const std::string k_sweep = key({k_train, c["solver"], c["kts_sweep"], c["kts"]["k"], c["samples"],
                                     c["tau_split"], c["diagnostics"]});
    stage(man, "kts_sweep", k_sweep, {"kts_sweep.csv"}, [&] {
      const NeuralField base(model());
      const auto rows = kts_sweep(base, data(), heldout().points, cfg_.samples, cfg_.solver, cfg_.alpha_grid,
                                  cfg_.beta_grid, cfg_.kts.k, cfg_.tau_split, cfg_.diagnostics);
      std::ofstream os(dir_ / "kts_sweep.csv");
      write_sweep_csv(os, rows);
    });
    const std::string k_spike = key({k_train, k_data, c["efm"], c["spike_solver"], c["samples"]});
    stage(man, "power_spike", k_spike, {"power_spike.json", "traces_spike_vanilla.csv", "summary_spike_vanilla.json"},
          [&] {
            const NeuralField base(model());
            write_sample_artifacts(dir_, "spike_vanilla", base, cfg_.spike_solver, cfg_.samples, cfg_.tau_split,
                                   "network", KtsSchedule{});
            const auto van = read_traces_csv((dir_ / "traces_spike_vanilla.csv").string());
            const auto efm = read_traces_csv((dir_ / "traces_efm.csv").string());
            write_json_file(dir_ / "power_spike.json", power_spike_report(van, efm));
          });
    const std::string k_plot = key({k_vanilla, k_efm, k_spike});
    stage(man, "plot", k_plot,
          {"power.svg", "energy.svg", "kpe_strata_vanilla.svg", "kpe_strata_efm.svg", "kpe_strata_vanilla_midpoint.svg"},
          [&] {
            const LabeledDataset d = data();
            emit_plots(dir_,
                       {{"vanilla", read_traces_csv((dir_ / "traces_vanilla.csv").string())},
                        {"efm", read_traces_csv((dir_ / "traces_efm.csv").string())},
                        {"vanilla_midpoint", read_traces_csv((dir_ / "traces_spike_vanilla.csv").string())}},
                       &d);
          });
    write_json_file(dir_ / "manifest.json", man.to_json());
    return man;
  }

  const fs::path& dir() const { return dir_; }

  static json power_spike_report(const std::vector<TraceRecord>& vanilla, const std::vector<TraceRecord>& efm) {
    auto peak = [](const std::vector<TraceRecord>& tr) {
      const SeriesBand b = power_band(tr);
      std::size_t arg = 0;
      for (std::size_t j = 1; j < b.mean.size(); ++j)
        if (b.mean[j] > b.mean[arg]) arg = j;
      return std::pair{b.mean[arg], b.t[arg]};
    };
    const auto [pv, tv] = peak(vanilla);
    const auto [pe, te] = peak(efm);
    return {{"vanilla_peak", pv}, {"vanilla_t_peak", tv}, {"efm_peak", pe},
            {"efm_t_peak", te},   {"peak_ratio", pv > 0.0 ? json(pe / pv) : json()}};
  }

  static json theory_report(const LabeledDataset& data, const TheorySettings& s) {
    TheorySweepConfig sc;
    sc.dims = s.dims;
    sc.atom_counts = s.atom_counts;
    sc.eps = s.eps;
    sc.points_per_cell = s.points_per_cell;
    sc.seed = s.seed;
    json out = {{"sweep", to_json(run_theory_sweep(sc))}};
    // Dataset atoms: energy-density bounds at bridge samples around random training points.
    const MixtureModel mix = MixtureModel::from_points(data.points);
    Rng rng = Rng::stream(s.seed, 0x5eed);
    json per_eps = json::array();
    for (double eps : s.eps) {
      std::vector<std::pair<Vec, double>> pts;
      for (int k = 0; k < 400; ++k) {
        const double t = 0.1 + 0.1 * static_cast<double>(k % 9);
        const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(mix.size())));
        Vec z = mix.mean(i, t);
        for (Eigen::Index q = 0; q < 2; ++q) z(q) += (1.0 - t) * rng.normal();
        pts.emplace_back(z, t);
      }
      const BoundCheckReport rep = check_energy_density_bounds(mix, pts, eps);
      per_eps.push_back({{"eps", eps}, {"checked", rep.checked}, {"skipped", rep.skipped}, {"pass_rate", rep.pass_rate()}});
    }
    out["dataset_atoms"] = per_eps;
    return out;
  }

 private:
  std::string key(const json& parts) const { return hash_json(json{{"v", kToolVersion}, {"parts", parts}}); }

  SolverConfig efm_solver() const {
    return {cfg_.efm.method, cfg_.efm.steps, cfg_.efm.delta_cut, cfg_.solver.seed};
  }

  LabeledDataset data() const {
    LabeledDataset d = read_dataset_csv((dir_ / "data.csv").string());
    d.seed = cfg_.data_seed;
    return d;
  }
  LabeledDataset heldout() const { return read_dataset_csv((dir_ / "heldout.csv").string()); }
  MlpParams model() const { return load_checkpoint((dir_ / "model.ckpt.json").string()); }

  void stage(RunManifest& man, const std::string& name, const std::string& k, std::vector<std::string> outputs,
             const std::function<void()>& body) {
    StageRecord rec{name, k, std::move(outputs), false, 0.0};
    const fs::path stamp = dir_ / ".stages" / (name + ".key");
    bool cached = fs::exists(stamp);
    if (cached) {
      std::ifstream is(stamp);
      std::string old;
      std::getline(is, old);
      cached = old == k;
    }
    for (const auto& o : rec.outputs) cached = cached && fs::exists(dir_ / o);
    if (cached) {
      rec.skipped = true;
      if (log_) log_("[" + name + "] up to date");
    } else {
      if (log_) log_("[" + name + "] running");
      std::error_code ec;
      fs::remove(stamp, ec);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        body();
      } catch (const std::exception& e) {
        throw StageFailed(name, e.what());
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (const auto& o : rec.outputs)
        if (!fs::exists(dir_ / o)) throw StageFailed(name, "missing output " + o);
      std::ofstream(stamp) << k << '\n';
    }
    man.stages.push_back(std::move(rec));
  }

  ExperimentConfig cfg_;
  PipelineLog log_;
  fs::path dir_;
};

}  // namespace kinflow
