#pragma once

// Dense pure-state simulator for an open chain of L qubits.
//
// Basis convention: qubit 0 is the most significant bit of the basis index,
// so |q0 q1 ... q_{L-1}> sits at index sum_q b_q * 2^(L-1-q). Record
// serialization and entropy bipartitions both rely on this ordering.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mxeb/error.hpp"

namespace mxeb {

using cplx = std::complex<double>;

inline constexpr int kMaxQubits = 24;

namespace detail {

// std::complex operator* carries an inf/nan recovery path that blocks
// vectorization; amplitudes here are always finite.
inline cplx cmul(cplx a, cplx b) noexcept {
  return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

}  // namespace detail

struct SingleQubitGate {
  std::array<cplx, 4> matrix{};  // row-major 2x2
  int target = 0;
};

struct TwoQubitGate {
  // Row-major 4x4 in the local basis |b_i b_{i+1}>, b_i the high bit.
  std::array<cplx, 16> matrix{};
  int first = 0;  // acts on (first, first + 1)
};

/// Molmer-Sorensen XX rotation: cos(theta) I(x)I - i sin(theta) X(x)X.
inline TwoQubitGate ms_gate(double theta, int first = 0) {
  const double c = std::cos(theta);
  const cplx s{0.0, -std::sin(theta)};
  TwoQubitGate g;
  g.first = first;
  auto& m = g.matrix;
  m = {};
  m[0 * 4 + 0] = c;
  m[1 * 4 + 1] = c;
  m[2 * 4 + 2] = c;
  m[3 * 4 + 3] = c;
  m[0 * 4 + 3] = s;
  m[1 * 4 + 2] = s;
  m[2 * 4 + 1] = s;
  m[3 * 4 + 0] = s;
  return g;
}

/// Single-qubit rotation by `theta` about the equatorial axis at azimuth `phi`.
inline SingleQubitGate rotation_gate(double theta, double phi, int target = 0) {
  const double c = std::cos(theta / 2);
  const double s = std::sin(theta / 2);
  const cplx minus_i{0.0, -1.0};
  SingleQubitGate g;
  g.target = target;
  g.matrix = {cplx{c, 0.0}, minus_i * std::polar(1.0, -phi) * s,
              minus_i * std::polar(1.0, phi) * s, cplx{c, 0.0}};
  return g;
}

/// Kronecker product a (x) b of two single-qubit gates as a pair gate on (first, first+1).
inline TwoQubitGate kron(const SingleQubitGate& a, const SingleQubitGate& b, int first) {
  TwoQubitGate g;
  g.first = first;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      g.matrix[r * 4 + c] = a.matrix[(r >> 1) * 2 + (c >> 1)] * b.matrix[(r & 1) * 2 + (c & 1)];
    }
  }
  return g;
}

/// Matrix product lhs * rhs of two pair gates (rhs applied first).
inline TwoQubitGate compose(const TwoQubitGate& lhs, const TwoQubitGate& rhs) {
  TwoQubitGate g;
  g.first = rhs.first;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      cplx acc{};
      for (int k = 0; k < 4; ++k) acc += lhs.matrix[r * 4 + k] * rhs.matrix[k * 4 + c];
      g.matrix[r * 4 + c] = acc;
    }
  }
  return g;
}

/// max |(G^dagger G - I)_{rc}|
template <std::size_t N>
double unitarity_defect(const std::array<cplx, N * N>& m) {
  double worst = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    for (std::size_t c = 0; c < N; ++c) {
      cplx acc{};
      for (std::size_t k = 0; k < N; ++k) acc += std::conj(m[k * N + r]) * m[k * N + c];
      if (r == c) acc -= 1.0;
      worst = std::max(worst, std::abs(acc));
    }
  }
  return worst;
}

class StateVector {
 public:
  StateVector() = default;

  /// |0...0>
  explicit StateVector(int num_qubits) : num_qubits_(checked_size(num_qubits)) {
    amps_.assign(std::size_t{1} << num_qubits_, cplx{});
    amps_[0] = 1.0;
  }

  StateVector(int num_qubits, std::vector<cplx> amplitudes)
      : num_qubits_(checked_size(num_qubits)), amps_(std::move(amplitudes)) {
    if (amps_.size() != (std::size_t{1} << num_qubits_)) {
      throw Error(ErrorKind::invalid_argument, "amplitude count must be 2^L");
    }
  }

  static StateVector all_zero(int num_qubits) { return StateVector(num_qubits); }

  static StateVector all_plus(int num_qubits) {
    StateVector s(num_qubits);
    const double a = std::pow(2.0, -0.5 * num_qubits);
    std::fill(s.amps_.begin(), s.amps_.end(), cplx{a, 0.0});
    return s;
  }

  /// Computational basis state whose bits are given qubit-0-first.
  static StateVector basis(int num_qubits, std::uint64_t index) {
    StateVector s(num_qubits);
    s.amps_[0] = 0.0;
    s.amps_.at(index) = 1.0;
    return s;
  }

  int num_qubits() const noexcept { return num_qubits_; }
  std::size_t dimension() const noexcept { return amps_.size(); }
  std::span<const cplx> amplitudes() const noexcept { return amps_; }
  std::span<cplx> amplitudes() noexcept { return amps_; }
  const cplx& operator[](std::size_t i) const { return amps_[i]; }

  double norm_squared() const noexcept {
    double acc = 0.0;
    for (const auto& a : amps_) acc += std::norm(a);
    return acc;
  }

  void scale(double factor) noexcept {
    for (auto& a : amps_) a *= factor;
  }

  void apply(const SingleQubitGate& g) {
    check_qubit(g.target);
    const std::size_t bit = std::size_t{1} << (num_qubits_ - 1 - g.target);
    const auto& m = g.matrix;
    for (std::size_t base = 0; base < amps_.size(); base += 2 * bit) {
      for (std::size_t i = base; i < base + bit; ++i) {
        const cplx a0 = amps_[i];
        const cplx a1 = amps_[i + bit];
        amps_[i] = detail::cmul(m[0], a0) + detail::cmul(m[1], a1);
        amps_[i + bit] = detail::cmul(m[2], a0) + detail::cmul(m[3], a1);
      }
    }
  }

  void apply(const TwoQubitGate& g) {
    check_qubit(g.first);
    check_qubit(g.first + 1);
    const std::size_t lo = std::size_t{1} << (num_qubits_ - 2 - g.first);
    const std::size_t hi = lo << 1;
    const auto& m = g.matrix;
    for (std::size_t base = 0; base < amps_.size(); base += 2 * hi) {
      for (std::size_t i = base; i < base + lo; ++i) {
        const cplx a0 = amps_[i];
        const cplx a1 = amps_[i + lo];
        const cplx a2 = amps_[i + hi];
        const cplx a3 = amps_[i + hi + lo];
        amps_[i] = detail::cmul(m[0], a0) + detail::cmul(m[1], a1) + detail::cmul(m[2], a2) +
                   detail::cmul(m[3], a3);
        amps_[i + lo] = detail::cmul(m[4], a0) + detail::cmul(m[5], a1) +
                        detail::cmul(m[6], a2) + detail::cmul(m[7], a3);
        amps_[i + hi] = detail::cmul(m[8], a0) + detail::cmul(m[9], a1) +
                        detail::cmul(m[10], a2) + detail::cmul(m[11], a3);
        amps_[i + hi + lo] = detail::cmul(m[12], a0) + detail::cmul(m[13], a1) +
                             detail::cmul(m[14], a2) + detail::cmul(m[15], a3);
      }
    }
  }

  /// Squared norm of the component with `qubit` in state |1>; no normalization check.
  double weight_one(int qubit) const {
    check_qubit(qubit);
    const std::size_t bit = std::size_t{1} << (num_qubits_ - 1 - qubit);
    double acc = 0.0;
    for (std::size_t base = bit; base < amps_.size(); base += 2 * bit) {
      for (std::size_t i = base; i < base + bit; ++i) acc += std::norm(amps_[i]);
    }
    return acc;
  }

  /// Zeroes amplitudes inconsistent with `outcome` and returns the pre-projection
  /// squared norm of the kept branch. With `renormalize`, the result has unit norm.
  double project_inplace(int qubit, int outcome, bool renormalize) {
    check_qubit(qubit);
    if (outcome != 0 && outcome != 1) {
      throw Error(ErrorKind::invalid_argument, "measurement outcome must be 0 or 1");
    }
    const std::size_t bit = std::size_t{1} << (num_qubits_ - 1 - qubit);
    const std::size_t keep_offset = outcome ? bit : 0;
    const std::size_t drop_offset = outcome ? 0 : bit;
    double weight = 0.0;
    for (std::size_t base = 0; base < amps_.size(); base += 2 * bit) {
      for (std::size_t i = base; i < base + bit; ++i) {
        weight += std::norm(amps_[i + keep_offset]);
        amps_[i + drop_offset] = 0.0;
      }
    }
    if (renormalize) {
      if (!(weight > 0.0)) {
        throw Error(ErrorKind::degenerate_branch,
                    "cannot renormalize onto a zero-probability branch");
      }
      const double f = 1.0 / std::sqrt(weight);
      for (std::size_t base = 0; base < amps_.size(); base += 2 * bit) {
        for (std::size_t i = base; i < base + bit; ++i) amps_[i + keep_offset] *= f;
      }
    }
    return weight;
  }

 private:
  static int checked_size(int n) {
    if (n < 1 || n > kMaxQubits) {
      throw Error(ErrorKind::invalid_argument,
                  "qubit count " + std::to_string(n) + " outside [1, 24]");
    }
    return n;
  }

  void check_qubit(int q) const {
    if (q < 0 || q >= num_qubits_) {
      throw Error(ErrorKind::index_out_of_range,
                  "qubit " + std::to_string(q) + " not in [0, " + std::to_string(num_qubits_) + ")");
    }
  }

  int num_qubits_ = 0;
  std::vector<cplx> amps_;
};

inline constexpr double kNormTolerance = 1e-10;

inline void require_normalized(const StateVector& s) {
  const double n = s.norm_squared();
  if (std::abs(n - 1.0) > kNormTolerance) {
    throw Error(ErrorKind::unnormalized_state, "squared norm " + std::to_string(n) + " != 1");
  }
}

template <typename Gate>
StateVector apply_gate(StateVector state, const Gate& gate) {
  state.apply(gate);
  return state;
}

struct OutcomeProbabilities {
  double p0 = 0.0;
  double p1 = 0.0;
};

/// Born probabilities of a Z-basis measurement of `qubit`.
inline OutcomeProbabilities measurement_probability(const StateVector& state, int qubit) {
  require_normalized(state);
  const double p1 = std::clamp(state.weight_one(qubit), 0.0, 1.0);
  return {1.0 - p1, p1};
}

struct Projection {
  StateVector state;
  double branch_weight = 0.0;
};

inline Projection project(StateVector state, int qubit, int outcome, bool renormalize) {
  const double w = state.project_inplace(qubit, outcome, renormalize);
  return {std::move(state), w};
}

enum class EntropyBase { nats, bits };

inline constexpr double kEigenvalueFloor = 1e-12;

/// Von Neumann entropy of the leading `k` qubits, from the spectrum of the
/// reduced density matrix of whichever side of the cut is smaller.
inline double entanglement_entropy(const StateVector& state, int k,
                                   EntropyBase base = EntropyBase::nats) {
  const int n = state.num_qubits();
  if (k <= 0 || k >= n) {
    throw Error(ErrorKind::index_out_of_range,
                "subsystem size " + std::to_string(k) + " not in (0, " + std::to_string(n) + ")");
  }
  require_normalized(state);
  using Mat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Index rows = Eigen::Index{1} << k;
  const Eigen::Index cols = Eigen::Index{1} << (n - k);
  const Eigen::Map<const Mat> psi(state.amplitudes().data(), rows, cols);
  Eigen::MatrixXcd rho = rows <= cols ? Eigen::MatrixXcd(psi * psi.adjoint())
                                      : Eigen::MatrixXcd(psi.transpose() * psi.conjugate());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(rho, Eigen::EigenvaluesOnly);
  double s = 0.0;
  for (const double lambda : solver.eigenvalues()) {
    if (lambda > kEigenvalueFloor) s -= lambda * std::log(lambda);
  }
  if (base == EntropyBase::bits) s /= std::numbers::ln2;
  return s;
}

}  // namespace mxeb
