#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mxeb/xeb.hpp"

using namespace mxeb;

namespace {

CircuitDescriptor circuit_with_sites(int L, double p, std::size_t lo, std::size_t hi,
                                     std::uint64_t seed = 0) {
  for (std::uint64_t s = seed;; ++s) {
    auto c = sample_circuit(L, p, s);
    if (c.num_measurements() >= lo && c.num_measurements() <= hi) return c;
  }
}

// Oracle: replay every record under both states and sum.
double chi_by_replay(const CircuitDescriptor& c) {
  const TrajectoryEngine e(c);
  const auto n = e.num_measurements();
  double cross = 0.0;
  double self = 0.0;
  for (std::uint64_t i = 0; i < (std::uint64_t{1} << n); ++i) {
    const auto m = MeasurementRecord::from_index(i, n);
    const double pr = e.replay(InitialState::all_plus, m);
    const double ps = e.replay(InitialState::all_zero, m);
    cross += pr * ps;
    self += ps * ps;
  }
  return cross / self;
}

XebEstimate estimate(double chi, int L = 8, double p = 0.1) {
  XebEstimate e;
  e.chi = chi;
  e.num_qubits = L;
  e.measurement_rate = p;
  return e;
}

AccuracyCurve curve_from(std::vector<std::size_t> grid, std::vector<double> chis, double ref) {
  std::size_t i = 0;
  return accuracy_curve({ref, ReferenceKind::exact_enumeration}, grid, EstimatorKind::histogram,
                        [&](std::size_t) { return std::optional<double>(chis[i++]); });
}

}  // namespace

TEST(ChiExact, MatchesBruteForceReplay) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto c = circuit_with_sites(4, 0.2, 1, 10, 31 * s);
    EXPECT_NEAR(chi_exact(c).chi, chi_by_replay(c), 1e-10);
  }
  const auto c = circuit_with_sites(8, 0.1, 10, 13, 5);
  EXPECT_NEAR(chi_exact(c).chi, chi_by_replay(c), 1e-9);
}

TEST(ChiExact, SameStateIsOne) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto c = circuit_with_sites(6, 0.2, 2, 14, 7 * s);
    EXPECT_NEAR(chi_exact(c, InitialState::all_plus, InitialState::all_plus).chi, 1.0, 1e-10);
    EXPECT_NEAR(chi_exact(c, InitialState::all_zero, InitialState::all_zero).chi, 1.0, 1e-10);
  }
}

TEST(ChiExact, NoSitesIsOne) {
  const auto e = chi_exact(sample_circuit(6, 0.0, 1));
  EXPECT_EQ(e.chi, 1.0);
  EXPECT_FALSE(e.runs.has_value());
}

TEST(ChiExact, InfeasibleBeyondLimit) {
  const auto c = sample_circuit(8, 1.0, 1);
  try {
    chi_exact(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::enumeration_infeasible);
  }
}

TEST(EnumerateDistribution, MatchesReplayAndSumsToOne) {
  const auto c = circuit_with_sites(6, 0.15, 6, 10, 3);
  const TrajectoryEngine e(c);
  for (auto init : {InitialState::all_plus, InitialState::all_zero}) {
    const auto d = enumerate_distribution(c, init);
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_NEAR(d[i], e.replay(init, MeasurementRecord::from_index(i, e.num_measurements())),
                  1e-14);
      total += d[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(ChiHistogram, SingleRecordIsRatio) {
  const auto c = circuit_with_sites(4, 0.2, 2, 4, 1);
  const TrajectoryEngine e(c);
  const auto d = enumerate_distribution(c, InitialState::all_zero);
  std::size_t best = 0;
  for (std::size_t i = 1; i < d.size(); ++i)
    if (d[i] > d[best]) best = i;
  const auto m = MeasurementRecord::from_index(best, e.num_measurements());
  const double ps = e.replay(InitialState::all_zero, m);
  const std::vector<double> a{ps};
  const std::vector<double> b{0.5 * ps};
  const auto est = chi_histogram(a, b);
  EXPECT_DOUBLE_EQ(est.chi, 2.0);
  EXPECT_EQ(*est.runs, 1u);
}

TEST(ChiHistogram, ZeroDenominatorIsReported) {
  const std::vector<double> a{0.1};
  const std::vector<double> b{0.0, 0.0};
  try {
    chi_histogram(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_estimate);
  }
  EXPECT_THROW(chi_histogram(std::span<const double>{}, b), Error);
}

TEST(ChiHistogram, SelfConsistencyAtWorkingPoint) {
  const auto c = circuit_with_sites(8, 0.1, 10, 16, 11);
  const TrajectoryEngine e(c);
  const auto h = circuit_hash_hex(c);
  const auto a = batch_sample(e, h, InitialState::all_zero, 5000, 1, InitialState::all_zero);
  const auto b = batch_sample(e, h, InitialState::all_zero, 5000, 2, InitialState::all_zero);
  EXPECT_NEAR(chi_histogram(a, b).chi, 1.0, 0.05);
}

TEST(ChiHistogram, NumeratorAndDenominatorUnbiased) {
  const auto c = circuit_with_sites(6, 0.2, 6, 10, 21);
  const TrajectoryEngine e(c);
  const auto h = circuit_hash_hex(c);
  const auto ex = chi_exact(c);
  const int reps = 100;
  std::vector<double> nums;
  std::vector<double> dens;
  for (int r = 0; r < reps; ++r) {
    const auto rho = batch_sample(e, h, InitialState::all_plus, 1000, derive_seed(5, 0, r),
                                  InitialState::all_zero);
    const auto sig = batch_sample(e, h, InitialState::all_zero, 1000, derive_seed(6, 0, r),
                                  InitialState::all_zero);
    const auto est = chi_histogram(rho, sig);
    nums.push_back(est.numerator);
    dens.push_back(est.denominator);
  }
  auto check = [&](const std::vector<double>& xs, double truth) {
    const double mu = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - mu) * (x - mu);
    const double se = std::sqrt(ss / (xs.size() - 1) / xs.size());
    EXPECT_LT(std::abs(mu - truth), 3 * se) << "mean " << mu << " truth " << truth;
  };
  check(nums, ex.numerator);
  check(dens, ex.denominator);
}

TEST(ChiHistogram, PrefixAndDatasetChecks) {
  const auto c = circuit_with_sites(6, 0.2, 3, 10, 2);
  const TrajectoryEngine e(c);
  const auto h = circuit_hash_hex(c);
  const auto rho = batch_sample(e, h, InitialState::all_plus, 100, 1, InitialState::all_zero);
  const auto sig = batch_sample(e, h, InitialState::all_zero, 100, 2, InitialState::all_zero);
  const auto full = chi_histogram(prefix(rho, 40), prefix(sig, 40));
  const auto pre = chi_histogram(rho, sig, 40);
  EXPECT_EQ(full.chi, pre.chi);
  EXPECT_EQ(*pre.runs, 40u);
  EXPECT_THROW(chi_histogram(rho, sig, 101), Error);
  const auto unpaired = batch_sample(e, h, InitialState::all_zero, 10, 2);
  EXPECT_THROW(chi_histogram(rho, unpaired), Error);
}

TEST(CircuitAverage, Arithmetic) {
  const std::vector<XebEstimate> same{estimate(0.7), estimate(0.7), estimate(0.7)};
  EXPECT_EQ(chi_circuit_average(same).std, 0.0);
  const std::vector<XebEstimate> two{estimate(0.8), estimate(1.0)};
  const auto a = chi_circuit_average(two);
  EXPECT_NEAR(a.mean, 0.9, 1e-15);
  EXPECT_NEAR(a.std, 0.14142135623730953, 1e-12);
}

TEST(CircuitAverage, RejectsMixedPointsAndTooFew) {
  const std::vector<XebEstimate> mixed{estimate(0.8, 8), estimate(1.0, 10)};
  EXPECT_THROW(chi_circuit_average(mixed), Error);
  const std::vector<XebEstimate> one{estimate(0.8)};
  EXPECT_THROW(chi_circuit_average(one), Error);
}

TEST(AccuracyCurve, EpsilonAndErrors) {
  const auto c = curve_from({10, 20, 30}, {0.5, 0.7, 0.6}, 0.6);
  EXPECT_NEAR(c.points[0].epsilon, 0.1, 1e-15);
  EXPECT_EQ(c.points[2].epsilon, 0.0);
  EXPECT_THROW(curve_from({10, 10}, {0.5, 0.5}, 0.6), Error);
  const std::vector<std::size_t> grid{1, 2};
  try {
    accuracy_curve({0.5, ReferenceKind::exact_enumeration}, grid, EstimatorKind::rnn,
                   [](std::size_t m) { return m == 2 ? std::nullopt : std::optional<double>(0.5); });
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_model);
  }
}

TEST(MMin, Basics) {
  const auto all_good = curve_from({10, 20, 30}, {0.6, 0.6, 0.6}, 0.6);
  EXPECT_EQ(*m_min(all_good, 0.01), 10u);
  const auto c = curve_from({10, 20, 30}, {0.3, 0.5, 0.58}, 0.6);
  EXPECT_FALSE(m_min(c, 0.01).has_value());
  EXPECT_EQ(*m_min(c, 0.1), 20u);
  EXPECT_THROW(m_min(c, 0.0), Error);
  AccuracyCurve empty;
  try {
    m_min(empty, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty_curve);
  }
}

TEST(MMin, MonotoneInEpsilon) {
  const auto c = curve_from({1, 2, 3, 4, 5, 6}, {0.1, 0.9, 0.4, 0.55, 0.62, 0.6}, 0.6);
  std::optional<std::size_t> prev;
  for (double eps = 0.001; eps < 1.0; eps *= 1.3) {
    const auto m = m_min(c, eps);
    if (prev) {
      ASSERT_TRUE(m.has_value());
      EXPECT_LE(*m, *prev);
    }
    if (m) prev = m;
  }
}

TEST(DeltaM, IdentityAndCsv) {
  const auto hist = curve_from({100, 200, 300}, {0.4, 0.55, 0.59}, 0.6);
  const auto rnn = curve_from({100, 200, 300}, {0.58, 0.6, 0.6}, 0.6);
  const std::vector<double> eps{0.005, 0.05, 0.5};
  const auto r = delta_m_report(hist, rnn, eps);
  for (const auto& e : r.entries) {
    if (e.delta_m()) {
      EXPECT_EQ(*e.delta_m(), static_cast<long long>(*e.m_min_histogram) -
                                  static_cast<long long>(*e.m_min_rnn));
    }
  }
  EXPECT_EQ(*r.entries[1].delta_m(), 100);
  EXPECT_FALSE(r.entries[0].m_min_histogram.has_value());
  EXPECT_EQ(delta_m_csv(r),
            "epsilon,Mmin_hist,Mmin_rnn,deltaM\n"
            "0.005,NA,200,NA\n"
            "0.05,200,100,100\n"
            "0.5,100,100,0\n");
}

TEST(Csv, SweepAndCurveColumns) {
  SweepRow row;
  row.num_qubits = 8;
  row.measurement_rate = 0.1;
  row.circuit_index = 3;
  row.estimate = estimate(0.25);
  row.estimate.estimator = EstimatorKind::histogram;
  row.estimate.runs = 5000;
  row.estimate.circuit_hash = "00000000deadbeef";
  const std::vector<SweepRow> rows{row};
  EXPECT_EQ(sweep_csv(rows),
            "L,p,circuit_index,chi,estimator,M,circuit_hash\n"
            "8,0.1,3,0.25,histogram,5000,00000000deadbeef\n");
  const std::vector<AccuracyCurve> curves{curve_from({10}, {0.5}, 0.75)};
  EXPECT_EQ(curve_csv(curves, "h"),
            "M,chi,epsilon,estimator,ref_kind,circuit_hash\n"
            "10,0.5,0.25,histogram,exact-enumeration,h\n");
}
