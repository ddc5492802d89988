#pragma once

// Cross-entropy benchmark
//
//   chi_C = sum_m p^rho_m p^sigma_m / sum_m (p^sigma_m)^2
//         = <p^sigma>_rho / <p^sigma>_sigma
//
// computed exactly by enumerating measurement branches, or estimated from
// sampled records (histogram estimator) or from trained generative models.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxeb/circuit.hpp"
#include "mxeb/error.hpp"
#include "mxeb/format.hpp"
#include "mxeb/trajectory.hpp"

namespace mxeb {

enum class EstimatorKind { exact, histogram, rnn };

inline std::string_view to_string(EstimatorKind k) noexcept {
  switch (k) {
    case EstimatorKind::exact: return "exact";
    case EstimatorKind::histogram: return "histogram";
    case EstimatorKind::rnn: return "rnn";
  }
  return "?";
}

inline EstimatorKind parse_estimator(std::string_view s) {
  if (s == "exact") return EstimatorKind::exact;
  if (s == "histogram") return EstimatorKind::histogram;
  if (s == "rnn") return EstimatorKind::rnn;
  throw Error(ErrorKind::invalid_argument, "unknown estimator '" + std::string(s) + "'");
}

struct XebEstimate {
  double chi = 0.0;
  EstimatorKind estimator = EstimatorKind::exact;
  std::optional<std::size_t> runs;  // M; absent for exact
  double numerator = 0.0;
  double denominator = 0.0;
  std::string circuit_hash;
  int num_qubits = 0;
  double measurement_rate = 0.0;
};

inline constexpr std::size_t kMaxEnumerableSites = 22;

namespace detail {

struct BranchSums {
  double cross = 0.0;  // sum p^rho p^sigma
  double self = 0.0;   // sum (p^sigma)^2
};

// Depth-first walk over measurement outcomes carrying both unnormalized
// states; branches with zero sigma weight contribute nothing and are cut.
inline void enumerate_branches(const CircuitProgram& prog, std::size_t layer, std::size_t slot,
                               StateVector& rho, StateVector& sigma, double w_rho, double w_sigma,
                               BranchSums& sums) {
  while (layer < prog.layers.size()) {
    const auto& l = prog.layers[layer];
    if (slot == 0) {
      for (const auto& g : l.gates) {
        rho.apply(g);
        sigma.apply(g);
      }
    }
    if (slot < l.measured.size()) {
      const int q = l.measured[slot];
      for (int bit = 0; bit < 2; ++bit) {
        StateVector s = sigma;
        const double ws = s.project_inplace(q, bit, false);
        if (ws == 0.0) continue;
        StateVector r = rho;
        const double wr = r.project_inplace(q, bit, false);
        enumerate_branches(prog, layer, slot + 1, r, s, wr, ws, sums);
      }
      return;
    }
    ++layer;
    slot = 0;
  }
  sums.cross += w_rho * w_sigma;
  sums.self += w_sigma * w_sigma;
}

// Same walk for one initial state, emitting each leaf probability in record
// index order (first site most significant).
inline void enumerate_leaves(const CircuitProgram& prog, std::size_t layer, std::size_t slot,
                             StateVector& state, double weight, std::uint64_t prefix,
                             std::vector<double>& out) {
  while (layer < prog.layers.size()) {
    const auto& l = prog.layers[layer];
    if (slot == 0) {
      for (const auto& g : l.gates) state.apply(g);
    }
    if (slot < l.measured.size()) {
      const int q = l.measured[slot];
      for (int bit = 0; bit < 2; ++bit) {
        StateVector s = state;
        const double w = s.project_inplace(q, bit, false);
        const std::uint64_t next = (prefix << 1) | static_cast<std::uint64_t>(bit);
        if (w == 0.0) continue;  // out[] is zero-initialized
        enumerate_leaves(prog, layer, slot + 1, s, w, next, out);
      }
      return;
    }
    ++layer;
    slot = 0;
  }
  out[prefix] = weight;
}

}  // namespace detail

/// Probability of every record under `init`, indexed by MeasurementRecord::index().
inline std::vector<double> enumerate_distribution(const CircuitDescriptor& c, InitialState init) {
  const auto n = c.num_measurements();
  if (n > kMaxEnumerableSites) {
    throw Error(ErrorKind::enumeration_infeasible, std::to_string(n) + " sites (limit 22)");
  }
  const auto prog = compile(c);
  std::vector<double> out(std::size_t{1} << n, 0.0);
  StateVector s = prepare(c.num_qubits, init);
  detail::enumerate_leaves(prog, 0, 0, s, 1.0, 0, out);
  return out;
}

inline XebEstimate chi_exact(const CircuitDescriptor& c, InitialState rho = InitialState::all_plus,
                             InitialState sigma = InitialState::all_zero) {
  const auto n = c.num_measurements();
  if (n > kMaxEnumerableSites) {
    throw Error(ErrorKind::enumeration_infeasible, std::to_string(n) + " sites (limit 22)");
  }
  const auto prog = compile(c);
  detail::BranchSums sums;
  StateVector r = prepare(c.num_qubits, rho);
  StateVector s = prepare(c.num_qubits, sigma);
  detail::enumerate_branches(prog, 0, 0, r, s, 1.0, 1.0, sums);
  if (!(sums.self > 0.0)) throw Error(ErrorKind::degenerate_estimate, "zero denominator");
  XebEstimate e;
  e.estimator = EstimatorKind::exact;
  e.numerator = sums.cross;
  e.denominator = sums.self;
  e.chi = n == 0 ? 1.0 : sums.cross / sums.self;
  e.circuit_hash = circuit_hash_hex(c);
  e.num_qubits = c.num_qubits;
  e.measurement_rate = c.measurement_rate;
  return e;
}

inline double mean(std::span<const double> xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
}

/// Histogram estimator from sigma-probabilities of rho-sampled records and of
/// sigma-sampled records. The two lists may differ in length.
inline XebEstimate chi_histogram(std::span<const double> sigma_prob_of_rho_records,
                                 std::span<const double> sigma_prob_of_sigma_records) {
  if (sigma_prob_of_rho_records.empty() || sigma_prob_of_sigma_records.empty()) {
    throw Error(ErrorKind::invalid_argument, "histogram estimator needs non-empty record lists");
  }
  XebEstimate e;
  e.estimator = EstimatorKind::histogram;
  e.numerator = mean(sigma_prob_of_rho_records);
  e.denominator = mean(sigma_prob_of_sigma_records);
  if (!(e.denominator > 0.0)) {
    throw Error(ErrorKind::degenerate_estimate, "all sigma-sampled records have zero probability");
  }
  e.chi = e.numerator / e.denominator;
  e.runs = sigma_prob_of_rho_records.size();
  return e;
}

/// Histogram estimator over the first `m` records of each dataset (both must
/// carry probabilities under the same replay state).
inline XebEstimate chi_histogram(const RecordDataset& rho_records,
                                 const RecordDataset& sigma_records, std::size_t m = 0) {
  if (!rho_records.replay_state || !sigma_records.replay_state ||
      *rho_records.replay_state != *sigma_records.replay_state) {
    throw Error(ErrorKind::invalid_argument, "datasets must carry probabilities under one state");
  }
  if (rho_records.circuit_hash != sigma_records.circuit_hash) {
    throw Error(ErrorKind::invalid_argument, "datasets come from different circuits");
  }
  const std::size_t mr = m ? m : rho_records.size();
  const std::size_t ms = m ? m : sigma_records.size();
  if (mr > rho_records.size() || ms > sigma_records.size()) {
    throw Error(ErrorKind::invalid_argument, "requested M exceeds dataset size");
  }
  auto e = chi_histogram(std::span(rho_records.replay_probabilities).first(mr),
                         std::span(sigma_records.replay_probabilities).first(ms));
  e.circuit_hash = rho_records.circuit_hash;
  return e;
}

struct CircuitAverage {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over circuits
  std::size_t count = 0;
};

inline CircuitAverage chi_circuit_average(std::span<const XebEstimate> estimates) {
  if (estimates.size() < 2) {
    throw Error(ErrorKind::invalid_argument, "circuit average needs at least two estimates");
  }
  for (const auto& e : estimates) {
    if (e.num_qubits != estimates[0].num_qubits ||
        e.measurement_rate != estimates[0].measurement_rate) {
      throw Error(ErrorKind::invalid_argument, "estimates mix different (L, p)");
    }
  }
  CircuitAverage a;
  a.count = estimates.size();
  // Shifted by the first value so identical inputs give exactly zero spread.
  const double shift = estimates[0].chi;
  double acc = 0.0;
  for (const auto& e : estimates) acc += e.chi - shift;
  const double offset = acc / static_cast<double>(a.count);
  a.mean = shift + offset;
  double ss = 0.0;
  for (const auto& e : estimates) {
    const double d = (e.chi - shift) - offset;
    ss += d * d;
  }
  a.std = std::sqrt(ss / static_cast<double>(a.count - 1));
  return a;
}

enum class ReferenceKind { exact_enumeration, large_m_plateau, none };

inline std::string_view to_string(ReferenceKind k) noexcept {
  switch (k) {
    case ReferenceKind::exact_enumeration: return "exact-enumeration";
    case ReferenceKind::large_m_plateau: return "large-M-plateau";
    case ReferenceKind::none: return "none";
  }
  return "?";
}

struct ReferenceValue {
  double chi = 0.0;
  ReferenceKind kind = ReferenceKind::exact_enumeration;
};

struct AccuracyPoint {
  std::size_t runs = 0;
  double chi = 0.0;
  double epsilon = 0.0;
};

struct AccuracyCurve {
  EstimatorKind estimator = EstimatorKind::histogram;
  ReferenceValue reference;
  std::vector<AccuracyPoint> points;
};

/// Evaluates `estimate_at(M)` over an increasing grid. The callable returns
/// std::nullopt when no estimate exists for M (e.g. a missing model).
inline AccuracyCurve accuracy_curve(
    const ReferenceValue& reference, std::span<const std::size_t> grid, EstimatorKind estimator,
    const std::function<std::optional<double>(std::size_t)>& estimate_at) {
  AccuracyCurve curve;
  curve.estimator = estimator;
  curve.reference = reference;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (i > 0 && grid[i] <= grid[i - 1]) {
      throw Error(ErrorKind::invalid_argument, "M grid must be strictly increasing");
    }
    const auto chi = estimate_at(grid[i]);
    if (!chi) throw Error(ErrorKind::missing_model, "no estimate for M=" + std::to_string(grid[i]));
    curve.points.push_back({grid[i], *chi, std::abs(reference.chi - *chi)});
  }
  return curve;
}

/// Smallest grid M whose epsilon is within `target`; later points are not
/// required to stay within it.
inline std::optional<std::size_t> m_min(const AccuracyCurve& curve, double target) {
  if (curve.points.empty()) throw Error(ErrorKind::empty_curve, "accuracy curve has no points");
  if (!(target > 0.0)) throw Error(ErrorKind::invalid_argument, "epsilon target must be positive");
  for (const auto& pt : curve.points) {
    if (pt.epsilon <= target) return pt.runs;
  }
  return std::nullopt;
}

struct DeltaMEntry {
  double epsilon = 0.0;
  std::optional<std::size_t> m_min_histogram;
  std::optional<std::size_t> m_min_rnn;

  /// Defined only when both estimators reach epsilon on the grid.
  std::optional<long long> delta_m() const {
    if (!m_min_histogram || !m_min_rnn) return std::nullopt;
    return static_cast<long long>(*m_min_histogram) - static_cast<long long>(*m_min_rnn);
  }
};

struct DeltaMReport {
  std::vector<DeltaMEntry> entries;
};

inline DeltaMReport delta_m_report(const AccuracyCurve& histogram, const AccuracyCurve& rnn,
                                   std::span<const double> epsilons) {
  DeltaMReport r;
  for (double eps : epsilons) r.entries.push_back({eps, m_min(histogram, eps), m_min(rnn, eps)});
  return r;
}

// CSV writers. Column order is part of the interface; floats use shortest
// round-trip decimal and absent values are written as NA.

struct SweepRow {
  int num_qubits = 0;
  double measurement_rate = 0.0;
  std::size_t circuit_index = 0;
  XebEstimate estimate;
};

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "L,p,circuit_index,chi,estimator,M,circuit_hash\n";
  for (const auto& r : rows) {
    out += std::to_string(r.num_qubits) + "," + format_double(r.measurement_rate) + "," +
           std::to_string(r.circuit_index) + "," + format_double(r.estimate.chi) + "," +
           std::string(to_string(r.estimate.estimator)) + "," +
           (r.estimate.runs ? std::to_string(*r.estimate.runs) : std::string("NA")) + "," +
           r.estimate.circuit_hash + "\n";
  }
  return out;
}

inline std::string curve_csv(std::span<const AccuracyCurve> curves, const std::string& circuit_hash) {
  std::string out = "M,chi,epsilon,estimator,ref_kind,circuit_hash\n";
  for (const auto& c : curves) {
    for (const auto& pt : c.points) {
      const bool has_ref = c.reference.kind != ReferenceKind::none;
      out += std::to_string(pt.runs) + "," + format_double(pt.chi) + "," +
             (has_ref ? format_double(pt.epsilon) : std::string("NA")) + "," + std::string(to_string(c.estimator)) + "," +
             std::string(to_string(c.reference.kind)) + "," + circuit_hash + "\n";
    }
  }
  return out;
}

inline std::string delta_m_csv(const DeltaMReport& report) {
  auto opt = [](const auto& v) { return v ? std::to_string(*v) : std::string("NA"); };
  std::string out = "epsilon,Mmin_hist,Mmin_rnn,deltaM\n";
  for (const auto& e : report.entries) {
    out += format_double(e.epsilon) + "," + opt(e.m_min_histogram) + "," + opt(e.m_min_rnn) + "," +
           opt(e.delta_m()) + "\n";
  }
  return out;
}

}  // namespace mxeb
