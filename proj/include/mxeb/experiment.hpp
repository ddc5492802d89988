#pragma once

// Experiment orchestration behind the `mxeb` command line tool: JSON config,
// the study commands (sweep, convergence, delta-m, entropy) and the one-shot
// commands (train, chi, gradcheck), output persistence and the run manifest.
//
// Seeds. Everything is derived from the top-level `seed` by logical index:
//
//   circuit (L, p_index, c), attempt a   derive(derive(derive(derive(seed, circuit, L),
//                                               circuit, p_index), circuit, c), circuit, a)
//   single-circuit studies                circuit.seed, else derive(seed, circuit, 0),
//                                         scanned as derive(base, circuit, k) when a
//                                         site-count window is configured
//   rho / sigma records of a circuit      derive(circuit_seed, dataset, 0 / 1)
//   RNN for dataset size M                derive(circuit_seed, init, 2M + {0 rho, 1 sigma})
//   RNN chi at M                          derive(circuit_seed, sampler, M)
//   entropy trajectory of a circuit       derive(circuit_seed, run, 0)
//
// so outputs do not depend on the worker count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mxeb/circuit.hpp"
#include "mxeb/error.hpp"
#include "mxeb/format.hpp"
#include "mxeb/parallel.hpp"
#include "mxeb/rng.hpp"
#include "mxeb/rnn.hpp"
#include "mxeb/trajectory.hpp"
#include "mxeb/xeb.hpp"

namespace mxeb {

inline constexpr std::string_view kVersion = "0.1.0";

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_runtime = 2, exit_partial = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::size_t> default_m_grid() {
  return {100, 500, 1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000, 10000, 12000, 15000};
}

struct ExperimentConfig {
  std::string experiment;
  std::filesystem::path base_dir;  // relative paths in the config resolve here

  std::vector<int> num_qubits{8};
  std::vector<double> rates{0.1};
  std::size_t circuits = 100;  // M_C
  std::size_t runs = 5000;     // M
  std::vector<std::size_t> m_grid = default_m_grid();
  std::uint64_t seed = 0;
  int workers = 1;
  EstimatorKind estimator = EstimatorKind::histogram;
  int t_encoding = -1;  // -1: 2L
  int t_bulk = -1;
  InitialState rho_state = InitialState::all_plus;
  InitialState sigma_state = InitialState::all_zero;

  std::optional<std::string> circuit_file;
  std::optional<std::uint64_t> circuit_seed;
  std::size_t min_sites = 0;
  std::size_t max_sites = std::numeric_limits<std::size_t>::max();

  std::string reference = "auto";  // auto | exact | plateau | none
  std::size_t reference_runs = 600000;
  std::vector<double> epsilons{0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1};

  std::string training_table = "p0.1";
  double epoch_scale = 1.0;
  std::optional<SampleBudget> n_sample;  // overrides the table

  bool pair_average = true;
  InitialState entropy_state = InitialState::all_plus;

  double failure_threshold = 0.1;

  // train
  std::string train_records;
  std::optional<std::size_t> train_runs;
  std::optional<TrainingConfig> train_override;

  // chi
  std::string rho_model, sigma_model, rho_records, sigma_records;

  // gradcheck
  int gradcheck_hidden = 4;
  std::size_t gradcheck_sites = 4;
  std::size_t gradcheck_batch = 8;
  double gradcheck_epsilon = 1e-5;
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& obj, std::string_view where,
                       std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
T get_as(const json& j, std::string_view name) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("wrong type for '" + std::string(name) + "'");
  }
}

inline SampleBudget parse_budget(const json& j) {
  if (j.is_string() && j.get<std::string>() == "exact") return SampleBudget::exact();
  if (j.is_number_unsigned() && j.get<std::size_t>() > 0) return SampleBudget::finite(j.get<std::size_t>());
  throw ConfigError("n_sample must be \"exact\" or a positive integer");
}

inline json budget_json(const SampleBudget& b) {
  return b.count ? json(*b.count) : json("exact");
}

inline InitialState parse_state(const json& j, std::string_view name) {
  try {
    return parse_initial_state(get_as<std::string>(j, name));
  } catch (const Error&) {
    throw ConfigError("'" + std::string(name) + "' must be all-plus or all-zero");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(std::string_view text, std::filesystem::path base_dir = {}) {
  using detail::get_as;
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  detail::check_keys(j, "config",
                     {"format_version", "experiment", "L", "p", "M_C", "M", "M_grid", "seed",
                      "workers", "estimator", "T_encoding", "T_bulk", "initial_states", "circuit",
                      "reference", "epsilons", "training", "entropy", "failure_threshold", "train",
                      "chi", "gradcheck"});
  if (!j.contains("format_version") || j["format_version"] != 1) {
    throw ConfigError("config needs \"format_version\": 1");
  }
  ExperimentConfig c;
  c.base_dir = std::move(base_dir);
  if (j.contains("experiment")) c.experiment = get_as<std::string>(j["experiment"], "experiment");
  if (j.contains("L")) c.num_qubits = get_as<std::vector<int>>(j["L"], "L");
  if (j.contains("p")) c.rates = get_as<std::vector<double>>(j["p"], "p");
  if (j.contains("M_C")) c.circuits = get_as<std::size_t>(j["M_C"], "M_C");
  if (j.contains("M")) c.runs = get_as<std::size_t>(j["M"], "M");
  if (j.contains("M_grid")) c.m_grid = get_as<std::vector<std::size_t>>(j["M_grid"], "M_grid");
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j["seed"], "seed");
  if (j.contains("workers")) c.workers = get_as<int>(j["workers"], "workers");
  if (j.contains("estimator")) {
    try {
      c.estimator = parse_estimator(get_as<std::string>(j["estimator"], "estimator"));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("T_encoding")) c.t_encoding = get_as<int>(j["T_encoding"], "T_encoding");
  if (j.contains("T_bulk")) c.t_bulk = get_as<int>(j["T_bulk"], "T_bulk");
  if (j.contains("initial_states")) {
    const auto& s = j["initial_states"];
    detail::check_keys(s, "initial_states", {"rho", "sigma"});
    if (s.contains("rho")) c.rho_state = detail::parse_state(s["rho"], "initial_states.rho");
    if (s.contains("sigma")) c.sigma_state = detail::parse_state(s["sigma"], "initial_states.sigma");
  }
  if (j.contains("circuit")) {
    const auto& s = j["circuit"];
    detail::check_keys(s, "circuit", {"file", "seed", "min_sites", "max_sites"});
    if (s.contains("file")) c.circuit_file = get_as<std::string>(s["file"], "circuit.file");
    if (s.contains("seed")) c.circuit_seed = get_as<std::uint64_t>(s["seed"], "circuit.seed");
    if (s.contains("min_sites")) c.min_sites = get_as<std::size_t>(s["min_sites"], "circuit.min_sites");
    if (s.contains("max_sites")) c.max_sites = get_as<std::size_t>(s["max_sites"], "circuit.max_sites");
  }
  if (j.contains("reference")) {
    const auto& s = j["reference"];
    detail::check_keys(s, "reference", {"kind", "M"});
    if (s.contains("kind")) c.reference = get_as<std::string>(s["kind"], "reference.kind");
    if (s.contains("M")) c.reference_runs = get_as<std::size_t>(s["M"], "reference.M");
  }
  if (j.contains("epsilons")) c.epsilons = get_as<std::vector<double>>(j["epsilons"], "epsilons");
  if (j.contains("training")) {
    const auto& s = j["training"];
    detail::check_keys(s, "training", {"table", "epoch_scale", "n_sample"});
    if (s.contains("table")) c.training_table = get_as<std::string>(s["table"], "training.table");
    if (s.contains("epoch_scale")) c.epoch_scale = get_as<double>(s["epoch_scale"], "training.epoch_scale");
    if (s.contains("n_sample")) c.n_sample = detail::parse_budget(s["n_sample"]);
  }
  if (j.contains("entropy")) {
    const auto& s = j["entropy"];
    detail::check_keys(s, "entropy", {"pair_average", "initial_state"});
    if (s.contains("pair_average")) c.pair_average = get_as<bool>(s["pair_average"], "entropy.pair_average");
    if (s.contains("initial_state")) c.entropy_state = detail::parse_state(s["initial_state"], "entropy.initial_state");
  }
  if (j.contains("failure_threshold")) {
    c.failure_threshold = get_as<double>(j["failure_threshold"], "failure_threshold");
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    detail::check_keys(s, "train", {"records", "M", "hidden", "batch", "validation", "dropout", "epochs", "learning_rate"});
    if (s.contains("records")) c.train_records = get_as<std::string>(s["records"], "train.records");
    if (s.contains("M")) c.train_runs = get_as<std::size_t>(s["M"], "train.M");
    if (s.contains("hidden")) {
      TrainingConfig t;
      t.hidden = get_as<int>(s["hidden"], "train.hidden");
      t.batch_size = s.contains("batch") ? get_as<std::size_t>(s["batch"], "train.batch") : 100;
      t.validation_size = s.contains("validation") ? get_as<std::size_t>(s["validation"], "train.validation") : 0;
      t.dropout = s.contains("dropout") ? get_as<double>(s["dropout"], "train.dropout") : 0.0;
      t.epochs = s.contains("epochs") ? get_as<std::size_t>(s["epochs"], "train.epochs") : 100;
      t.learning_rate = s.contains("learning_rate") ? get_as<double>(s["learning_rate"], "train.learning_rate") : 1e-3;
      c.train_override = t;
    }
  }
  if (j.contains("chi")) {
    const auto& s = j["chi"];
    detail::check_keys(s, "chi", {"rho_model", "sigma_model", "rho_records", "sigma_records", "n_sample"});
    if (s.contains("rho_model")) c.rho_model = get_as<std::string>(s["rho_model"], "chi.rho_model");
    if (s.contains("sigma_model")) c.sigma_model = get_as<std::string>(s["sigma_model"], "chi.sigma_model");
    if (s.contains("rho_records")) c.rho_records = get_as<std::string>(s["rho_records"], "chi.rho_records");
    if (s.contains("sigma_records")) c.sigma_records = get_as<std::string>(s["sigma_records"], "chi.sigma_records");
    if (s.contains("n_sample")) c.n_sample = detail::parse_budget(s["n_sample"]);
  }
  if (j.contains("gradcheck")) {
    const auto& s = j["gradcheck"];
    detail::check_keys(s, "gradcheck", {"hidden", "N", "batch", "epsilon"});
    if (s.contains("hidden")) c.gradcheck_hidden = get_as<int>(s["hidden"], "gradcheck.hidden");
    if (s.contains("N")) c.gradcheck_sites = get_as<std::size_t>(s["N"], "gradcheck.N");
    if (s.contains("batch")) c.gradcheck_batch = get_as<std::size_t>(s["batch"], "gradcheck.batch");
    if (s.contains("epsilon")) c.gradcheck_epsilon = get_as<double>(s["epsilon"], "gradcheck.epsilon");
  }
  return c;
}

/// Effective configuration as JSON (recorded next to the outputs).
inline nlohmann::json config_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["experiment"] = c.experiment;
  j["L"] = c.num_qubits;
  j["p"] = c.rates;
  j["M_C"] = c.circuits;
  j["M"] = c.runs;
  j["M_grid"] = c.m_grid;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["estimator"] = std::string(to_string(c.estimator));
  j["T_encoding"] = c.t_encoding;
  j["T_bulk"] = c.t_bulk;
  j["initial_states"] = {{"rho", std::string(to_string(c.rho_state))},
                         {"sigma", std::string(to_string(c.sigma_state))}};
  nlohmann::json circ = nlohmann::json::object();
  if (c.circuit_file) circ["file"] = *c.circuit_file;
  if (c.circuit_seed) circ["seed"] = *c.circuit_seed;
  circ["min_sites"] = c.min_sites;
  circ["max_sites"] = c.max_sites;
  j["circuit"] = circ;
  j["reference"] = {{"kind", c.reference}, {"M", c.reference_runs}};
  j["epsilons"] = c.epsilons;
  nlohmann::json tr = {{"table", c.training_table}, {"epoch_scale", c.epoch_scale}};
  if (c.n_sample) tr["n_sample"] = detail::budget_json(*c.n_sample);
  j["training"] = tr;
  j["entropy"] = {{"pair_average", c.pair_average},
                  {"initial_state", std::string(to_string(c.entropy_state))}};
  j["failure_threshold"] = c.failure_threshold;
  return j;
}

// ---------------------------------------------------------------------------
// Output sink and manifest

inline void log_line(const std::string& msg) { std::cerr << "[mxeb] " << msg << std::endl; }

class OutputSink {
 public:
  explicit OutputSink(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw ConfigError("cannot create output directory " + root_.string() + ": " + ec.message());
  }

  const std::filesystem::path& root() const noexcept { return root_; }

  void write(const std::string& relative, const std::string& content) {
    const auto path = root_ / relative;
    std::filesystem::create_directories(path.parent_path());
    write_file(path, content);
    std::lock_guard lock(mutex_);
    files_[relative] = {hex64(fnv1a64(content)), content.size()};
  }

  void time(const std::string& phase, double seconds) {
    std::lock_guard lock(mutex_);
    timings_[phase] += seconds;
  }

  void note(const std::string& text) {
    std::lock_guard lock(mutex_);
    notes_.push_back(text);
  }

  void write_manifest(const std::string& command, const ExperimentConfig& cfg, int exit_code) {
    nlohmann::json m;
    m["format_version"] = 1;
    m["command"] = command;
    m["code_version"] = std::string(kVersion);
    const auto cfg_text = config_json(cfg).dump();
    m["config_hash"] = hex64(fnv1a64(cfg_text));
    m["seed"] = cfg.seed;
    m["workers"] = cfg.workers;
    m["exit_code"] = exit_code;
    nlohmann::json files = nlohmann::json::array();
    for (const auto& [path, info] : files_) {
      files.push_back({{"path", path}, {"fnv1a64", info.first}, {"bytes", info.second}});
    }
    m["files"] = files;
    m["timings_seconds"] = timings_;
    m["notes"] = notes_;
    write_file(root_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::filesystem::path root_;
  std::mutex mutex_;
  std::map<std::string, std::pair<std::string, std::size_t>> files_;
  std::map<std::string, double> timings_;
  std::vector<std::string> notes_;
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Shared pieces

namespace detail {

inline std::filesystem::path resolve(const ExperimentConfig& cfg, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || cfg.base_dir.empty() ? path : cfg.base_dir / path;
}

inline void validate_sizes(const ExperimentConfig& cfg) {
  if (cfg.num_qubits.empty() || cfg.rates.empty()) throw ConfigError("L and p lists must be non-empty");
  for (int l : cfg.num_qubits) {
    if (l < 2 || l > kMaxQubits || l % 2 != 0) {
      throw ConfigError("L=" + std::to_string(l) + " is infeasible (even, 2..24)");
    }
  }
  for (double p : cfg.rates) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p=" + format_double(p) + " outside [0, 1]");
  }
  if (cfg.t_encoding < -1 || cfg.t_bulk < -1) throw ConfigError("T_encoding/T_bulk must be >= 0");
  if (cfg.workers < 1) throw ConfigError("workers must be at least 1");
}

inline std::uint64_t grid_circuit_seed(std::uint64_t seed, int num_qubits, std::size_t p_index,
                                       std::size_t circuit, std::size_t attempt) {
  std::uint64_t s = derive_seed(seed, stream_tag::circuit, static_cast<std::uint64_t>(num_qubits));
  s = derive_seed(s, stream_tag::circuit, p_index);
  s = derive_seed(s, stream_tag::circuit, circuit);
  return derive_seed(s, stream_tag::circuit, attempt);
}

inline CircuitDescriptor select_circuit(const ExperimentConfig& cfg) {
  if (cfg.circuit_file) {
    const auto path = resolve(cfg, *cfg.circuit_file);
    std::string text;
    try {
      text = read_file(path);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    return deserialize_circuit(text);
  }
  validate_sizes(cfg);
  const int l = cfg.num_qubits.front();
  const double p = cfg.rates.front();
  const std::uint64_t base = cfg.circuit_seed ? *cfg.circuit_seed : derive_seed(cfg.seed, stream_tag::circuit);
  const bool windowed = cfg.min_sites > 0 || cfg.max_sites != std::numeric_limits<std::size_t>::max();
  for (std::uint64_t k = 0; k < 100000; ++k) {
    const std::uint64_t s = (k == 0) ? base : derive_seed(base, stream_tag::circuit, k);
    auto c = sample_circuit(l, p, s, cfg.t_encoding, cfg.t_bulk);
    const auto n = c.num_measurements();
    if (n >= cfg.min_sites && n <= cfg.max_sites) {
      if (windowed) log_line("circuit seed " + std::to_string(s) + " has N=" + std::to_string(n));
      return c;
    }
    if (!windowed) break;
  }
  throw ConfigError("no circuit with " + std::to_string(cfg.min_sites) + " <= N <= " +
                    std::to_string(cfg.max_sites) + " found");
}

struct PairedRecords {
  RecordDataset rho;
  RecordDataset sigma;
};

inline PairedRecords sample_pair(const TrajectoryEngine& engine, const std::string& hash,
                                 const ExperimentConfig& cfg, std::size_t count,
                                 std::uint64_t circuit_seed, int workers) {
  PairedRecords d;
  d.rho = batch_sample(engine, hash, cfg.rho_state, count,
                       derive_seed(circuit_seed, stream_tag::dataset, 0), cfg.sigma_state, workers);
  d.sigma = batch_sample(engine, hash, cfg.sigma_state, count,
                         derive_seed(circuit_seed, stream_tag::dataset, 1), cfg.sigma_state, workers);
  return d;
}

inline void check_grid(const std::vector<std::size_t>& grid) {
  if (grid.empty()) throw ConfigError("M_grid must be non-empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] == 0 || (i > 0 && grid[i] <= grid[i - 1])) {
      throw ConfigError("M_grid must be positive and strictly increasing");
    }
  }
}

inline ReferenceKind reference_kind(const ExperimentConfig& cfg, std::size_t sites) {
  if (cfg.reference == "exact") return ReferenceKind::exact_enumeration;
  if (cfg.reference == "plateau") return ReferenceKind::large_m_plateau;
  if (cfg.reference == "none") return ReferenceKind::none;
  if (cfg.reference == "auto") {
    return sites <= kMaxEnumerableSites ? ReferenceKind::exact_enumeration
                                        : ReferenceKind::large_m_plateau;
  }
  throw ConfigError("reference.kind must be auto, exact, plateau or none");
}

inline ReferenceValue compute_reference(const ExperimentConfig& cfg, const CircuitDescriptor& c,
                                        ReferenceKind kind, const PairedRecords& data) {
  ReferenceValue ref;
  ref.kind = kind;
  switch (kind) {
    case ReferenceKind::exact_enumeration:
      ref.chi = chi_exact(c, cfg.rho_state, cfg.sigma_state).chi;
      break;
    case ReferenceKind::large_m_plateau:
      ref.chi = chi_histogram(data.rho, data.sigma, cfg.reference_runs).chi;
      break;
    case ReferenceKind::none:
      break;
  }
  return ref;
}

inline std::string reference_csv(const ReferenceValue& ref, const CircuitDescriptor& c) {
  return "chi_ref,ref_kind,circuit_hash,L,p,N\n" +
         (ref.kind == ReferenceKind::none ? std::string("NA") : format_double(ref.chi)) + "," +
         std::string(to_string(ref.kind)) + "," + circuit_hash_hex(c) + "," +
         std::to_string(c.num_qubits) + "," + format_double(c.measurement_rate) + "," +
         std::to_string(c.num_measurements()) + "\n";
}

inline std::string circuit_path(const CircuitDescriptor& c) {
  return "circuits/" + circuit_hash_hex(c) + ".circuit";
}

inline std::vector<TrainingConfig> table_by_name(const std::string& name) {
  if (name == "p0.1") return training_table_p01();
  if (name == "p0.2") return training_table_p02();
  throw ConfigError("training.table must be p0.1 or p0.2");
}

inline TrainingConfig scaled(TrainingConfig t, const ExperimentConfig& cfg) {
  t.epochs = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                           static_cast<double>(t.epochs) * cfg.epoch_scale)));
  if (cfg.n_sample) t.n_sample = *cfg.n_sample;
  return t;
}

inline std::string opt_double(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("NA");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code; outputs go through the sink.

inline int cmd_sweep(const ExperimentConfig& cfg, OutputSink& out) {
  detail::validate_sizes(cfg);
  if (cfg.estimator == EstimatorKind::rnn) throw ConfigError("sweep supports the histogram and exact estimators");
  if (cfg.circuits < 1 || cfg.runs < 1) throw ConfigError("M_C and M must be positive");
  constexpr std::size_t kMaxAttempts = 10;

  struct Task {
    int num_qubits;
    std::size_t p_index;
    std::size_t circuit;
  };
  struct Outcome {
    std::optional<XebEstimate> estimate;
    std::optional<CircuitDescriptor> circuit;
    std::size_t resampled = 0;
    std::string error;
  };
  std::vector<Task> tasks;
  for (int l : cfg.num_qubits)
    for (std::size_t pi = 0; pi < cfg.rates.size(); ++pi)
      for (std::size_t c = 0; c < cfg.circuits; ++c) tasks.push_back({l, pi, c});

  std::vector<Outcome> results(tasks.size());
  std::mutex progress_mutex;
  std::size_t done = 0;
  Stopwatch clock;
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    auto& r = results[i];
    const double p = cfg.rates[t.p_index];
    for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const auto seed = detail::grid_circuit_seed(cfg.seed, t.num_qubits, t.p_index, t.circuit, attempt);
      auto c = sample_circuit(t.num_qubits, p, seed, cfg.t_encoding, cfg.t_bulk);
      try {
        XebEstimate e;
        if (cfg.estimator == EstimatorKind::exact) {
          e = chi_exact(c, cfg.rho_state, cfg.sigma_state);
        } else {
          const TrajectoryEngine engine(c);
          const auto data = detail::sample_pair(engine, circuit_hash_hex(c), cfg, cfg.runs, seed, 1);
          e = chi_histogram(data.rho, data.sigma);
        }
        e.num_qubits = t.num_qubits;
        e.measurement_rate = p;
        e.circuit_hash = circuit_hash_hex(c);
        r.estimate = e;
        r.circuit = std::move(c);
        break;
      } catch (const Error& err) {
        if (err.kind() == ErrorKind::degenerate_estimate) {
          ++r.resampled;
          continue;
        }
        r.error = err.what();
        break;
      }
    }
    if (!r.estimate && r.error.empty()) r.error = "degenerate after resampling";
    std::lock_guard lock(progress_mutex);
    ++done;
    if (done % std::max<std::size_t>(1, tasks.size() / 20) == 0 || done == tasks.size()) {
      log_line("sweep " + std::to_string(done) + "/" + std::to_string(tasks.size()) + " circuits, " +
               format_double(std::round(clock.seconds())) + " s");
    }
  });
  out.time("sweep", clock.seconds());

  std::vector<SweepRow> rows;
  std::string summary = "L,p,chi_mean,chi_std,n_circuits,n_failed,n_resampled\n";
  std::size_t failed_total = 0;
  std::size_t k = 0;
  for (int l : cfg.num_qubits) {
    for (std::size_t pi = 0; pi < cfg.rates.size(); ++pi) {
      std::vector<XebEstimate> ests;
      std::size_t failed = 0;
      std::size_t resampled = 0;
      for (std::size_t c = 0; c < cfg.circuits; ++c, ++k) {
        const auto& r = results[k];
        resampled += r.resampled;
        if (!r.estimate) {
          ++failed;
          log_line("L=" + std::to_string(l) + " p=" + format_double(cfg.rates[pi]) + " circuit " +
                   std::to_string(c) + " failed: " + r.error);
          continue;
        }
        rows.push_back({l, cfg.rates[pi], c, *r.estimate});
        ests.push_back(*r.estimate);
        out.write(detail::circuit_path(*r.circuit), serialize(*r.circuit));
      }
      failed_total += failed;
      std::optional<double> mean_v, std_v;
      if (ests.size() >= 2) {
        const auto a = chi_circuit_average(ests);
        mean_v = a.mean;
        std_v = a.std;
      } else if (ests.size() == 1) {
        mean_v = ests[0].chi;
      }
      summary += std::to_string(l) + "," + format_double(cfg.rates[pi]) + "," +
                 detail::opt_double(mean_v) + "," + detail::opt_double(std_v) + "," +
                 std::to_string(ests.size()) + "," + std::to_string(failed) + "," +
                 std::to_string(resampled) + "\n";
    }
  }
  out.write("sweep.csv", sweep_csv(rows));
  out.write("sweep_summary.csv", summary);
  const double fraction = static_cast<double>(failed_total) / static_cast<double>(tasks.size());
  if (failed_total > 0) out.note(std::to_string(failed_total) + " circuits failed and were excluded");
  if (fraction > cfg.failure_threshold) {
    log_line("failed fraction " + format_double(fraction) + " exceeds threshold");
    return exit_partial;
  }
  return exit_ok;
}

inline int cmd_convergence(const ExperimentConfig& cfg, OutputSink& out) {
  detail::check_grid(cfg.m_grid);
  Stopwatch clock;
  const auto c = detail::select_circuit(cfg);
  const auto hash = circuit_hash_hex(c);
  out.write(detail::circuit_path(c), serialize(c));
  const auto kind = detail::reference_kind(cfg, c.num_measurements());
  const std::size_t grid_max = cfg.m_grid.back();
  const std::size_t count =
      std::max(grid_max, kind == ReferenceKind::large_m_plateau ? cfg.reference_runs : 0);
  log_line("convergence on circuit " + hash + " (N=" + std::to_string(c.num_measurements()) +
           "), sampling " + std::to_string(count) + " records per state");
  const TrajectoryEngine engine(c);
  const auto data = detail::sample_pair(engine, hash, cfg, count, c.seed, cfg.workers);
  out.time("sampling", clock.seconds());
  const auto ref = detail::compute_reference(cfg, c, kind, data);
  const auto curve = accuracy_curve(ref, cfg.m_grid, EstimatorKind::histogram, [&](std::size_t m) {
    return std::optional<double>(chi_histogram(data.rho, data.sigma, m).chi);
  });
  const std::vector<AccuracyCurve> curves{curve};
  out.write("curve.csv", curve_csv(curves, hash));
  out.write("reference.csv", detail::reference_csv(ref, c));
  out.write("records/rho.records", serialize(prefix(data.rho, grid_max)));
  out.write("records/sigma.records", serialize(prefix(data.sigma, grid_max)));
  out.time("total", clock.seconds());
  return exit_ok;
}

inline int cmd_delta_m(const ExperimentConfig& cfg, OutputSink& out) {
  detail::check_grid(cfg.m_grid);
  if (cfg.epoch_scale <= 0.0) throw ConfigError("training.epoch_scale must be positive");
  if (cfg.epsilons.empty()) throw ConfigError("epsilons must be non-empty");
  for (double e : cfg.epsilons) {
    if (!(e > 0.0)) throw ConfigError("epsilons must be positive");
  }
  const auto table = detail::table_by_name(cfg.training_table);
  std::vector<TrainingConfig> per_m;
  for (auto m : cfg.m_grid) {
    const auto row = find_config(table, m);
    if (!row) throw ConfigError("training table " + cfg.training_table + " has no row for M=" + std::to_string(m));
    per_m.push_back(detail::scaled(*row, cfg));
  }

  Stopwatch clock;
  const auto c = detail::select_circuit(cfg);
  const auto hash = circuit_hash_hex(c);
  out.write(detail::circuit_path(c), serialize(c));
  const auto kind = detail::reference_kind(cfg, c.num_measurements());
  if (kind == ReferenceKind::none) throw ConfigError("delta-m needs a reference value");
  if (c.num_measurements() == 0) throw ConfigError("delta-m needs a circuit with measurements");
  const std::size_t grid_max = cfg.m_grid.back();
  const std::size_t count =
      std::max(grid_max, kind == ReferenceKind::large_m_plateau ? cfg.reference_runs : 0);
  log_line("delta-m on circuit " + hash + " (N=" + std::to_string(c.num_measurements()) + ")");
  const TrajectoryEngine engine(c);
  const auto data = detail::sample_pair(engine, hash, cfg, count, c.seed, cfg.workers);
  const auto ref = detail::compute_reference(cfg, c, kind, data);
  out.time("sampling", clock.seconds());

  const auto hist = accuracy_curve(ref, cfg.m_grid, EstimatorKind::histogram, [&](std::size_t m) {
    return std::optional<double>(chi_histogram(data.rho, data.sigma, m).chi);
  });

  // One training task per (M, which): 0 = rho model, 1 = sigma model.
  struct Trained {
    std::optional<TrainingResult> result;
    std::string error;
  };
  std::vector<Trained> trained(2 * cfg.m_grid.size());
  Stopwatch train_clock;
  parallel_for(trained.size(), cfg.workers, [&](std::size_t i) {
    const std::size_t gi = i / 2;
    const std::size_t which = i % 2;
    const std::size_t m = cfg.m_grid[gi];
    const auto& ds = which == 0 ? data.rho : data.sigma;
    const std::span<const MeasurementRecord> records(ds.records.data(), m);
    const auto seed = derive_seed(c.seed, stream_tag::init, 2 * m + which);
    Stopwatch t;
    try {
      trained[i].result = train(records, per_m[gi], seed);
    } catch (const Error& e) {
      trained[i].error = e.what();
    }
    log_line(std::string(which == 0 ? "rho" : "sigma") + " model M=" + std::to_string(m) + " " +
             (trained[i].result ? "trained" : "FAILED: " + trained[i].error) + " in " +
             format_double(std::round(t.seconds())) + " s");
  });
  out.time("training", train_clock.seconds());

  std::string training_csv = "M,model,hidden,batch,validation,dropout,epochs,best_epoch,best_val_nll,status\n";
  std::vector<std::size_t> rnn_grid;
  std::vector<double> rnn_chi;
  Stopwatch chi_clock;
  for (std::size_t gi = 0; gi < cfg.m_grid.size(); ++gi) {
    const std::size_t m = cfg.m_grid[gi];
    const auto& tc = per_m[gi];
    for (std::size_t which = 0; which < 2; ++which) {
      const auto& t = trained[2 * gi + which];
      const std::string name = which == 0 ? "rho" : "sigma";
      std::string best_epoch = "NA", best_val = "NA", status = "ok";
      if (t.result) {
        const auto& rep = t.result->report;
        best_epoch = std::to_string(rep.best_epoch);
        best_val = format_double(rep.validation_loss[rep.best_epoch - 1]);
        const auto stem = "models/" + name + "_M" + std::to_string(m);
        out.write(stem + ".rnn", serialize(t.result->model, tc.learning_rate));
        out.write(stem + "_loss.csv", training_curve_csv(rep));
      } else {
        status = "diverged";
      }
      training_csv += std::to_string(m) + "," + name + "," + std::to_string(tc.hidden) + "," +
                      std::to_string(tc.batch_size) + "," + std::to_string(tc.validation_size) +
                      "," + format_double(tc.dropout) + "," + std::to_string(tc.epochs) + "," +
                      best_epoch + "," + best_val + "," + status + "\n";
    }
    const auto& a = trained[2 * gi];
    const auto& b = trained[2 * gi + 1];
    if (!a.result || !b.result) {
      log_line("M=" + std::to_string(m) + " skipped for the RNN estimator");
      continue;
    }
    try {
      const auto e = chi_rnn(a.result->model, b.result->model, tc.n_sample,
                             derive_seed(c.seed, stream_tag::sampler, m));
      rnn_grid.push_back(m);
      rnn_chi.push_back(e.chi);
    } catch (const Error& e) {
      log_line("M=" + std::to_string(m) + " RNN estimate failed: " + e.what());
    }
  }
  out.time("rnn_chi", chi_clock.seconds());

  std::vector<AccuracyCurve> curves{hist};
  std::optional<AccuracyCurve> rnn;
  if (!rnn_grid.empty()) {
    std::size_t k = 0;
    rnn = accuracy_curve(ref, rnn_grid, EstimatorKind::rnn,
                         [&](std::size_t) { return std::optional<double>(rnn_chi[k++]); });
    curves.push_back(*rnn);
  }
  DeltaMReport report;
  for (double eps : cfg.epsilons) {
    DeltaMEntry e{eps, m_min(hist, eps), std::nullopt};
    if (rnn) e.m_min_rnn = m_min(*rnn, eps);
    report.entries.push_back(e);
  }
  out.write("curve.csv", curve_csv(curves, hash));
  out.write("delta_m.csv", delta_m_csv(report));
  out.write("reference.csv", detail::reference_csv(ref, c));
  out.write("training.csv", training_csv);
  out.write("records/rho.records", serialize(prefix(data.rho, grid_max)));
  out.write("records/sigma.records", serialize(prefix(data.sigma, grid_max)));
  if (cfg.epoch_scale != 1.0) {
    out.note("epoch counts scaled by " + format_double(cfg.epoch_scale) + " relative to the training table");
    if (cfg.epoch_scale < 1.0) {
      out.note("with reduced epochs the RNN estimate at the largest M is checked against 0.02 instead of 0.01");
    }
  }
  out.note("m_min is the first grid point within epsilon; later points may leave the band");
  out.time("total", clock.seconds());
  return rnn_grid.size() == cfg.m_grid.size() ? exit_ok : exit_partial;
}

inline int cmd_entropy(const ExperimentConfig& cfg, OutputSink& out) {
  detail::validate_sizes(cfg);
  if (cfg.circuits < 1) throw ConfigError("M_C must be positive");
  struct Task {
    int num_qubits;
    std::size_t p_index;
    std::size_t circuit;
  };
  std::vector<Task> tasks;
  for (int l : cfg.num_qubits)
    for (std::size_t pi = 0; pi < cfg.rates.size(); ++pi)
      for (std::size_t c = 0; c < cfg.circuits; ++c) tasks.push_back({l, pi, c});
  std::vector<EntropyTrace> traces(tasks.size());
  Stopwatch clock;
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    const auto seed = detail::grid_circuit_seed(cfg.seed, t.num_qubits, t.p_index, t.circuit, 0);
    const auto c = sample_circuit(t.num_qubits, cfg.rates[t.p_index], seed, cfg.t_encoding, cfg.t_bulk);
    traces[i] = entropy_trace(c, cfg.entropy_state, derive_seed(seed, stream_tag::run), cfg.pair_average);
  });
  out.time("entropy", clock.seconds());

  std::string csv = "L,p,t,S_mean,S_sem,n_circuits\n";
  std::size_t k = 0;
  for (int l : cfg.num_qubits) {
    for (std::size_t pi = 0; pi < cfg.rates.size(); ++pi) {
      const std::size_t n = cfg.circuits;
      const auto& first = traces[k].series;
      for (std::size_t s = 0; s < first.size(); ++s) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += traces[k + c].series[s].entropy;
        const double mu = acc / static_cast<double>(n);
        std::optional<double> sem;
        if (n >= 2) {
          double ss = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const double d = traces[k + c].series[s].entropy - mu;
            ss += d * d;
          }
          sem = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
        }
        csv += std::to_string(l) + "," + format_double(cfg.rates[pi]) + "," +
               format_double(first[s].layer) + "," + format_double(mu) + "," +
               detail::opt_double(sem) + "," + std::to_string(n) + "\n";
      }
      k += n;
    }
  }
  out.write("entropy.csv", csv);
  if (cfg.pair_average) out.note("entropy averaged over non-overlapping (odd, even) layer pairs");
  return exit_ok;
}

inline int cmd_train(const ExperimentConfig& cfg, OutputSink& out) {
  if (cfg.train_records.empty()) throw ConfigError("train.records is required");
  RecordDataset ds;
  try {
    ds = deserialize_records(read_file(detail::resolve(cfg, cfg.train_records)));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::io) throw ConfigError(e.what());
    throw;
  }
  const std::size_t m = cfg.train_runs.value_or(ds.size());
  if (m > ds.size()) throw ConfigError("train.M exceeds the dataset size");
  TrainingConfig tc;
  if (cfg.train_override) {
    tc = *cfg.train_override;
    tc.dataset_size = m;
  } else {
    const auto row = find_config(detail::table_by_name(cfg.training_table), m);
    if (!row) throw ConfigError("no training-table row for M=" + std::to_string(m) + "; give train.hidden etc.");
    tc = detail::scaled(*row, cfg);
  }
  Stopwatch clock;
  const auto result = train(std::span(ds.records.data(), m), tc, cfg.seed);
  out.time("training", clock.seconds());
  out.write("model.rnn", serialize(result.model, tc.learning_rate));
  out.write("loss.csv", training_curve_csv(result.report));
  return exit_ok;
}

inline int cmd_chi(const ExperimentConfig& cfg, OutputSink& out) {
  auto load = [&](const std::string& path, const char* what) {
    if (path.empty()) throw ConfigError(std::string("chi.") + what + " is required");
    try {
      return read_file(detail::resolve(cfg, path));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  };
  XebEstimate e;
  std::string n_sample = "NA";
  std::string hash = "NA";
  switch (cfg.estimator) {
    case EstimatorKind::rnn: {
      const auto rho = deserialize_model(load(cfg.rho_model, "rho_model"));
      const auto sigma = deserialize_model(load(cfg.sigma_model, "sigma_model"));
      const auto budget = cfg.n_sample.value_or(SampleBudget::exact());
      e = chi_rnn(rho, sigma, budget, derive_seed(cfg.seed, stream_tag::sampler));
      n_sample = budget.count ? std::to_string(*budget.count) : "exact";
      break;
    }
    case EstimatorKind::histogram: {
      const auto rho = deserialize_records(load(cfg.rho_records, "rho_records"));
      const auto sigma = deserialize_records(load(cfg.sigma_records, "sigma_records"));
      e = chi_histogram(rho, sigma);
      hash = e.circuit_hash;
      break;
    }
    case EstimatorKind::exact: {
      const auto c = detail::select_circuit(cfg);
      e = chi_exact(c, cfg.rho_state, cfg.sigma_state);
      hash = e.circuit_hash;
      out.write(detail::circuit_path(c), serialize(c));
      break;
    }
  }
  out.write("chi.csv", "estimator,chi,numerator,denominator,M,n_sample,circuit_hash\n" +
                           std::string(to_string(e.estimator)) + "," + format_double(e.chi) + "," +
                           format_double(e.numerator) + "," + format_double(e.denominator) + "," +
                           (e.runs ? std::to_string(*e.runs) : std::string("NA")) + "," + n_sample +
                           "," + hash + "\n");
  return exit_ok;
}

inline constexpr double kGradcheckTolerance = 1e-4;

inline int cmd_gradcheck(const ExperimentConfig& cfg, OutputSink& out) {
  if (cfg.gradcheck_hidden < 1 || cfg.gradcheck_sites < 1 || cfg.gradcheck_batch < 1) {
    throw ConfigError("gradcheck sizes must be positive");
  }
  const auto model = init_model(cfg.gradcheck_hidden, cfg.gradcheck_sites, 0.0, cfg.seed);
  SplitMix64 rng(derive_seed(cfg.seed, stream_tag::dataset));
  std::vector<MeasurementRecord> batch(cfg.gradcheck_batch);
  for (auto& r : batch) {
    r.bits.resize(cfg.gradcheck_sites);
    for (auto& b : r.bits) b = rng.bernoulli(0.5) ? 1 : 0;
  }
  const double err = gradient_check(model, batch, cfg.gradcheck_epsilon);
  const bool pass = err < kGradcheckTolerance;
  out.write("gradcheck.csv", "hidden,N,batch,epsilon_fd,max_rel_error,pass\n" +
                                 std::to_string(cfg.gradcheck_hidden) + "," +
                                 std::to_string(cfg.gradcheck_sites) + "," +
                                 std::to_string(cfg.gradcheck_batch) + "," +
                                 format_double(cfg.gradcheck_epsilon) + "," + format_double(err) +
                                 "," + (pass ? "true" : "false") + "\n");
  log_line("gradcheck max relative error " + format_double(err));
  return pass ? exit_ok : exit_runtime;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"sweep", "convergence", "delta-m", "entropy",
                                              "train", "chi", "gradcheck"};
  return names;
}

/// Output directory: explicit path, else $MXEB_OUTPUT_ROOT/<command>, else mxeb_out/<command>.
inline std::filesystem::path output_dir(const std::optional<std::string>& explicit_out,
                                        const std::string& command) {
  if (explicit_out) return *explicit_out;
  const char* env = std::getenv("MXEB_OUTPUT_ROOT");
  return std::filesystem::path(env && *env ? env : "mxeb_out") / command;
}

/// Runs one command end to end and maps failures onto exit codes.
inline int run_command(const std::string& command, ExperimentConfig cfg,
                       const std::filesystem::path& out_dir) {
  try {
    if (!cfg.experiment.empty() && cfg.experiment != command) {
      throw ConfigError("config is for '" + cfg.experiment + "', not '" + command + "'");
    }
    cfg.experiment = command;
    if (cfg.workers < 1) throw ConfigError("workers must be at least 1");
    OutputSink out(out_dir);
    Stopwatch clock;
    int code = exit_ok;
    try {
      if (command == "sweep") code = cmd_sweep(cfg, out);
      else if (command == "convergence") code = cmd_convergence(cfg, out);
      else if (command == "delta-m") code = cmd_delta_m(cfg, out);
      else if (command == "entropy") code = cmd_entropy(cfg, out);
      else if (command == "train") code = cmd_train(cfg, out);
      else if (command == "chi") code = cmd_chi(cfg, out);
      else if (command == "gradcheck") code = cmd_gradcheck(cfg, out);
      else throw ConfigError("unknown command '" + command + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      log_line(std::string("runtime failure: ") + e.what());
      code = exit_runtime;
    }
    out.time("wall", clock.seconds());
    out.write("config.json", config_json(cfg).dump(2) + "\n");
    out.write_manifest(command, cfg, code);
    return code;
  } catch (const ConfigError& e) {
    log_line(std::string("config error: ") + e.what());
    return exit_config;
  }
}

}  // namespace mxeb
