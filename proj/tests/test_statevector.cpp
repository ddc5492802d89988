#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "mxeb/rng.hpp"
#include "mxeb/statevector.hpp"

using namespace mxeb;

namespace {

constexpr double kPi = std::numbers::pi;
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

void expect_amp(const StateVector& s, std::size_t i, cplx want, double tol = 1e-12) {
  EXPECT_NEAR(s[i].real(), want.real(), tol) << "index " << i;
  EXPECT_NEAR(s[i].imag(), want.imag(), tol) << "index " << i;
}

StateVector random_state(int n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<cplx> a(std::size_t{1} << n);
  double norm = 0.0;
  for (auto& x : a) {
    x = {rng.uniform() - 0.5, rng.uniform() - 0.5};
    norm += std::norm(x);
  }
  for (auto& x : a) x /= std::sqrt(norm);
  return StateVector(n, std::move(a));
}

// Oracle: build the full 2^L x 2^L density matrix, trace out the trailing
// L-k qubits index by index, diagonalize.
double entropy_oracle(const StateVector& s, int k) {
  const int n = s.num_qubits();
  const std::size_t dim = s.dimension();
  Eigen::MatrixXcd full(dim, dim);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) full(i, j) = s[i] * std::conj(s[j]);
  const std::size_t da = std::size_t{1} << k;
  const std::size_t db = std::size_t{1} << (n - k);
  Eigen::MatrixXcd reduced = Eigen::MatrixXcd::Zero(da, da);
  for (std::size_t a1 = 0; a1 < da; ++a1)
    for (std::size_t a2 = 0; a2 < da; ++a2)
      for (std::size_t b = 0; b < db; ++b) reduced(a1, a2) += full(a1 * db + b, a2 * db + b);
  Eigen::ComplexEigenSolver<Eigen::MatrixXcd> solver(reduced);
  double h = 0.0;
  for (const auto& lam : solver.eigenvalues()) {
    if (lam.real() > 1e-14) h -= lam.real() * std::log(lam.real());
  }
  return h;
}

}  // namespace

TEST(MsGate, QuarterPiEntanglesBasisStates) {
  const auto g = ms_gate(kPi / 4);
  auto s = apply_gate(StateVector::basis(2, 0b00), g);
  expect_amp(s, 0b00, kInvSqrt2);
  expect_amp(s, 0b11, {0.0, -kInvSqrt2});
  expect_amp(s, 0b01, 0.0);
  expect_amp(s, 0b10, 0.0);

  s = apply_gate(StateVector::basis(2, 0b01), g);
  expect_amp(s, 0b01, kInvSqrt2);
  expect_amp(s, 0b10, {0.0, -kInvSqrt2});
}

TEST(MsGate, ZeroAngleIsIdentity) {
  const auto g = ms_gate(0.0);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_EQ(g.matrix[r * 4 + c], cplx(r == c ? 1.0 : 0.0));
}

TEST(RotationGate, NinetyDegreeRotations) {
  auto s = apply_gate(StateVector::basis(1, 0), rotation_gate(kPi / 2, 0.0));
  expect_amp(s, 0, kInvSqrt2);
  expect_amp(s, 1, {0.0, -kInvSqrt2});

  s = apply_gate(StateVector::basis(1, 0), rotation_gate(kPi / 2, kPi / 2));
  expect_amp(s, 0, kInvSqrt2);
  expect_amp(s, 1, kInvSqrt2);
}

TEST(RotationGate, ZeroThetaIsIdentityForAnyPhi) {
  for (double phi : {0.0, 0.3, kPi / 4, kPi / 2, 2.0}) {
    const auto g = rotation_gate(0.0, phi);
    EXPECT_EQ(g.matrix[0], cplx(1.0));
    EXPECT_EQ(g.matrix[3], cplx(1.0));
    EXPECT_NEAR(std::abs(g.matrix[1]), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(g.matrix[2]), 0.0, 1e-15);
  }
}

TEST(Gates, AreUnitary) {
  SplitMix64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const double theta = 2 * kPi * rng.uniform();
    const double phi = 2 * kPi * rng.uniform();
    EXPECT_LT(unitarity_defect<4>(ms_gate(theta).matrix), 1e-12);
    EXPECT_LT(unitarity_defect<2>(rotation_gate(theta, phi).matrix), 1e-12);
    const auto fused = compose(ms_gate(kPi / 4), kron(rotation_gate(kPi / 2, phi),
                                                     rotation_gate(kPi / 2, theta), 0));
    EXPECT_LT(unitarity_defect<4>(fused.matrix), 1e-12);
  }
}

TEST(ApplyGate, IdentityLeavesStateBitwise) {
  const auto s = random_state(3, 11);
  SingleQubitGate id;
  id.matrix = {1.0, 0.0, 0.0, 1.0};
  id.target = 1;
  const auto out = apply_gate(s, id);
  for (std::size_t i = 0; i < s.dimension(); ++i) EXPECT_EQ(out[i], s[i]);
}

TEST(ApplyGate, XOnQubitZeroFlipsMostSignificantBit) {
  SingleQubitGate x;
  x.matrix = {0.0, 1.0, 1.0, 0.0};
  x.target = 0;
  const auto s = apply_gate(StateVector::all_zero(2), x);
  expect_amp(s, 0b10, 1.0);
  expect_amp(s, 0b00, 0.0);
}

TEST(ApplyGate, MsComposes) {
  auto s = StateVector::all_zero(2);
  s.apply(ms_gate(kPi / 4));
  s.apply(ms_gate(kPi / 4));
  expect_amp(s, 0b11, {0.0, -1.0});
  expect_amp(s, 0b00, 0.0);
}

TEST(ApplyGate, OutOfRangeTargetThrows) {
  auto s = StateVector::all_zero(3);
  auto g = rotation_gate(1.0, 0.0, 3);
  EXPECT_THROW(s.apply(g), Error);
  auto pair = ms_gate(1.0, 2);
  try {
    s.apply(pair);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::index_out_of_range);
  }
}

TEST(ApplyGate, PreservesNorm) {
  SplitMix64 rng(3);
  auto s = random_state(6, 5);
  for (int i = 0; i < 200; ++i) {
    const double before = s.norm_squared();
    if (rng.uniform() < 0.5) {
      s.apply(rotation_gate(2 * kPi * rng.uniform(), 2 * kPi * rng.uniform(),
                            static_cast<int>(rng.below(6))));
    } else {
      s.apply(ms_gate(2 * kPi * rng.uniform(), static_cast<int>(rng.below(5))));
    }
    EXPECT_NEAR(s.norm_squared(), before, 1e-12);
  }
}

TEST(MeasurementProbability, BasicStates) {
  auto p = measurement_probability(StateVector::all_plus(1), 0);
  EXPECT_NEAR(p.p0, 0.5, 1e-12);
  EXPECT_NEAR(p.p1, 0.5, 1e-12);
  p = measurement_probability(StateVector::all_zero(1), 0);
  EXPECT_EQ(p.p0, 1.0);
  EXPECT_EQ(p.p1, 0.0);
  const auto bell = apply_gate(StateVector::all_zero(2), ms_gate(kPi / 4));
  p = measurement_probability(bell, 0);
  EXPECT_NEAR(p.p0, 0.5, 1e-12);
  EXPECT_NEAR(p.p1, 0.5, 1e-12);
}

TEST(MeasurementProbability, RejectsUnnormalizedState) {
  auto s = StateVector::all_plus(2);
  s.scale(0.5);
  try {
    measurement_probability(s, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unnormalized_state);
  }
}

TEST(Project, PlusToZeroRenormalized) {
  const auto r = project(StateVector::all_plus(1), 0, 0, true);
  EXPECT_NEAR(r.branch_weight, 0.5, 1e-12);
  expect_amp(r.state, 0, 1.0);
  expect_amp(r.state, 1, 0.0);
}

TEST(Project, ZeroProbabilityBranch) {
  const auto r = project(StateVector::all_zero(1), 0, 1, false);
  EXPECT_EQ(r.branch_weight, 0.0);
  EXPECT_EQ(r.state.norm_squared(), 0.0);
  try {
    project(StateVector::all_zero(1), 0, 1, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_branch);
  }
}

TEST(Project, BellStateUnnormalized) {
  const auto bell = apply_gate(StateVector::all_zero(2), ms_gate(kPi / 4));
  const auto r = project(bell, 0, 1, false);
  EXPECT_NEAR(r.branch_weight, 0.5, 1e-12);
  expect_amp(r.state, 0b11, {0.0, -kInvSqrt2});
  expect_amp(r.state, 0b00, 0.0);
}

TEST(Project, CompletenessOverRandomStates) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = random_state(5, seed);
    for (int q = 0; q < 5; ++q) {
      const double w0 = project(s, q, 0, false).branch_weight;
      const double w1 = project(s, q, 1, false).branch_weight;
      EXPECT_NEAR(w0 + w1, 1.0, 1e-10);
    }
  }
}

TEST(Entropy, ProductStateIsZero) {
  EXPECT_NEAR(entanglement_entropy(StateVector::all_plus(6), 3), 0.0, 1e-10);
  EXPECT_NEAR(entanglement_entropy(StateVector::all_zero(4), 2), 0.0, 1e-10);
}

TEST(Entropy, BellPairIsLogTwo) {
  const auto bell = apply_gate(StateVector::all_zero(2), ms_gate(kPi / 4));
  EXPECT_NEAR(entanglement_entropy(bell, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(entanglement_entropy(bell, 1, EntropyBase::bits), 1.0, 1e-12);
}

TEST(Entropy, MatchesFullDensityMatrixOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = random_state(4, 100 + seed);
    EXPECT_NEAR(entanglement_entropy(s, 2), entropy_oracle(s, 2), 1e-8);
    EXPECT_NEAR(entanglement_entropy(s, 1), entropy_oracle(s, 1), 1e-8);
    EXPECT_NEAR(entanglement_entropy(s, 3), entropy_oracle(s, 3), 1e-8);
  }
}

TEST(Entropy, SymmetricAndBounded) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int n = 6;
    const auto s = random_state(n, 200 + seed);
    for (int k = 1; k < n; ++k) {
      const double sa = entanglement_entropy(s, k);
      // S(first k) via reversing qubit order and taking the last k.
      std::vector<cplx> rev(s.dimension());
      for (std::size_t i = 0; i < s.dimension(); ++i) {
        std::size_t j = 0;
        for (int b = 0; b < n; ++b) j |= ((i >> b) & 1) << (n - 1 - b);
        rev[j] = s[i];
      }
      const double sb = entanglement_entropy(StateVector(n, rev), n - k);
      EXPECT_NEAR(sa, sb, 1e-8);
      EXPECT_GE(sa, -1e-10);
      EXPECT_LE(sa, std::min(k, n - k) * std::log(2.0) + 1e-8);
    }
  }
}

TEST(Entropy, SubsystemOutOfRange) {
  const auto s = StateVector::all_zero(4);
  EXPECT_THROW(entanglement_entropy(s, 0), Error);
  EXPECT_THROW(entanglement_entropy(s, 4), Error);
}
