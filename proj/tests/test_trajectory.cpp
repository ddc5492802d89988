#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mxeb/trajectory.hpp"
#include "stats_util.hpp"

using namespace mxeb;

namespace {

// Small circuit with a number of sites in [lo, hi], scanning seeds.
CircuitDescriptor small_circuit(int L, double p, std::size_t lo, std::size_t hi,
                                std::uint64_t seed = 0, int t_enc = -1, int t_bulk = -1) {
  for (std::uint64_t s = seed;; ++s) {
    auto c = sample_circuit(L, p, s, t_enc, t_bulk);
    if (c.num_measurements() >= lo && c.num_measurements() <= hi) return c;
  }
}

// Brute-force: replay every record.
std::vector<double> replay_all(const TrajectoryEngine& e, InitialState init) {
  const auto n = e.num_measurements();
  std::vector<double> out(std::size_t{1} << n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = e.replay(init, MeasurementRecord::from_index(i, n));
  }
  return out;
}

}  // namespace

TEST(Record, IndexRoundTrip) {
  const auto r = MeasurementRecord::from_string("1011");
  EXPECT_EQ(r.index(), 0b1011u);
  EXPECT_EQ(MeasurementRecord::from_index(0b1011, 4), r);
  EXPECT_EQ(r.to_string(), "1011");
  EXPECT_EQ(MeasurementRecord{}.to_string(), "-");
  EXPECT_THROW(MeasurementRecord::from_string("10x"), Error);
}

TEST(RunSampling, ZeroRateGivesEmptyRecord) {
  const auto c = sample_circuit(6, 0.0, 3);
  EXPECT_TRUE(run_sampling(c, InitialState::all_plus, 1).bits.empty());
}

TEST(RunSampling, QubitHeldAtZeroGivesZero) {
  CircuitProgram prog;
  prog.num_qubits = 2;
  prog.layers.push_back({{}, {0, 1}});
  const TrajectoryEngine e(prog);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto run = e.sample(InitialState::all_zero, s);
    EXPECT_EQ(run.record.to_string(), "00");
    EXPECT_EQ(run.probability, 1.0);
  }
}

TEST(RunSampling, DeterministicGivenSeed) {
  const auto c = sample_circuit(6, 0.3, 5);
  for (std::uint64_t s = 0; s < 10; ++s) {
    EXPECT_EQ(run_sampling(c, InitialState::all_plus, s), run_sampling(c, InitialState::all_plus, s));
  }
}

TEST(RunSampling, SampledProbabilityMatchesReplay) {
  const auto c = small_circuit(6, 0.2, 4, 12, 10);
  const TrajectoryEngine e(c);
  for (auto init : {InitialState::all_plus, InitialState::all_zero}) {
    for (std::uint64_t s = 0; s < 30; ++s) {
      const auto run = e.sample(init, s);
      EXPECT_NEAR(run.probability, e.replay(init, run.record), 1e-12 * (1 + run.probability));
    }
  }
}

TEST(RunSampling, FrequenciesMatchReplayDistribution) {
  const auto c = small_circuit(4, 0.3, 4, 6, 1, 4, 4);
  const TrajectoryEngine e(c);
  const std::size_t n = e.num_measurements();
  for (auto init : {InitialState::all_plus, InitialState::all_zero}) {
    const auto probs = replay_all(e, init);
    std::vector<std::size_t> counts(probs.size(), 0);
    const std::size_t total = 100000;
    for (std::size_t j = 0; j < total; ++j) ++counts[e.sample(init, run_seed(77, j)).record.index()];
    const auto r = stats::chi2_test(counts, probs, total);
    EXPECT_TRUE(r.pass) << "chi2=" << r.statistic << " dof=" << r.dof << " N=" << n;
  }
}

TEST(Replay, EmptyRecordIsOne) {
  const auto c = sample_circuit(4, 0.0, 2);
  EXPECT_EQ(replay_probability(c, InitialState::all_plus, MeasurementRecord{}), 1.0);
}

TEST(Replay, LengthMismatch) {
  const auto c = small_circuit(4, 0.3, 2, 8);
  try {
    replay_probability(c, InitialState::all_plus, MeasurementRecord::from_string("0"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::length_mismatch);
  }
}

TEST(Replay, CompletenessL4) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = small_circuit(4, 0.3, 1, 10, seed * 17);
    const TrajectoryEngine e(c);
    for (auto init : {InitialState::all_plus, InitialState::all_zero}) {
      const auto probs = replay_all(e, init);
      double total = 0.0;
      for (double p : probs) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0 + 1e-12);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-8);
    }
  }
}

TEST(Replay, SingleMeasurementMatchesStatevector) {
  // Find a circuit with exactly one site, then rebuild the pre-measurement state.
  std::uint64_t s = 0;
  CircuitDescriptor c;
  do {
    c = sample_circuit(4, 0.05, s++, 4, 4);
  } while (c.num_measurements() != 1);
  const auto prog = compile(c);
  const auto site = c.sites[0];
  StateVector state = StateVector::all_plus(4);
  for (int t = 1; t <= site.layer; ++t)
    for (const auto& g : prog.layers[t - 1].gates) state.apply(g);
  const auto expect = measurement_probability(state, site.qubit);
  EXPECT_NEAR(replay_probability(c, InitialState::all_plus, MeasurementRecord::from_string("0")),
              expect.p0, 1e-12);
  EXPECT_NEAR(replay_probability(c, InitialState::all_plus, MeasurementRecord::from_string("1")),
              expect.p1, 1e-12);
}

TEST(Replay, BitwiseDeterministic) {
  const auto c = small_circuit(6, 0.2, 5, 10, 4);
  const auto m = run_sampling(c, InitialState::all_plus, 9);
  const double a = replay_probability(c, InitialState::all_zero, m);
  const double b = replay_probability(c, InitialState::all_zero, m);
  EXPECT_EQ(a, b);
}

TEST(Entropy, TraceShapeAndBounds) {
  const auto c = sample_circuit(6, 0.2, 8);
  const auto trace = entropy_trace(c, InitialState::all_plus, 3);
  ASSERT_EQ(trace.series.size(), static_cast<std::size_t>(c.depth()));
  for (std::size_t i = 0; i < trace.series.size(); ++i) {
    EXPECT_EQ(trace.series[i].layer, static_cast<double>(i + 1));
    EXPECT_GE(trace.series[i].entropy, -1e-10);
    EXPECT_LE(trace.series[i].entropy, 3 * std::log(2.0) + 1e-9);
  }
  const auto paired = pair_average(trace);
  EXPECT_TRUE(paired.pair_averaged);
  ASSERT_EQ(paired.series.size(), trace.series.size() / 2);
  EXPECT_EQ(paired.series[0].layer, 2.0);
  EXPECT_NEAR(paired.series[0].entropy, 0.5 * (trace.series[0].entropy + trace.series[1].entropy),
              1e-15);
}

TEST(Entropy, FullMeasurementLayerDisentangles) {
  auto c = sample_circuit(6, 1.0, 4);
  const auto trace = entropy_trace(c, InitialState::all_plus, 5);
  EXPECT_NEAR(trace.series.back().entropy, 0.0, 1e-9);
}

TEST(Entropy, UnmonitoredCircuitBuildsEntanglement) {
  const auto c = sample_circuit(8, 0.0, 2);
  double early = 0.0;
  double late = 0.0;
  const int n = 10;
  for (int k = 0; k < n; ++k) {
    const auto t = entropy_trace(sample_circuit(8, 0.0, 2 + k), InitialState::all_plus, 0);
    early += t.series[0].entropy / n;
    late += t.series.back().entropy / n;
  }
  EXPECT_LT(early, late);
  EXPECT_GT(late, 1.5);  // near the volume-law value for a 4|4 cut
  EXPECT_EQ(c.num_measurements(), 0u);
}

TEST(BatchSample, SingleRunMatchesRunSampling) {
  const auto c = small_circuit(6, 0.2, 3, 10, 2);
  const auto ds = batch_sample(c, InitialState::all_plus, 1, 123);
  EXPECT_EQ(ds.records[0], run_sampling(c, InitialState::all_plus, run_seed(123, 0)));
}

TEST(BatchSample, RegeneratesBitIdenticallyAcrossWorkerCounts) {
  const auto c = small_circuit(6, 0.2, 3, 10, 2);
  const auto a = batch_sample(c, InitialState::all_plus, 200, 9, InitialState::all_zero, 1);
  const auto b = batch_sample(c, InitialState::all_plus, 200, 9, InitialState::all_zero, 3);
  EXPECT_EQ(serialize(a), serialize(b));
  EXPECT_THROW(batch_sample(c, InitialState::all_plus, 0, 9), Error);
}

TEST(BatchSample, ReplayColumnUsesSecondState) {
  const auto c = small_circuit(6, 0.2, 3, 10, 2);
  const TrajectoryEngine e(c);
  const auto ds = batch_sample(c, InitialState::all_plus, 20, 4, InitialState::all_zero);
  for (std::size_t j = 0; j < ds.size(); ++j) {
    EXPECT_EQ(ds.replay_probabilities[j], e.replay(InitialState::all_zero, ds.records[j]));
  }
  const auto self = batch_sample(c, InitialState::all_zero, 20, 4, InitialState::all_zero);
  for (std::size_t j = 0; j < self.size(); ++j) {
    EXPECT_NEAR(self.replay_probabilities[j], e.replay(InitialState::all_zero, self.records[j]),
                1e-12 * (1 + self.replay_probabilities[j]));
  }
}

TEST(RecordFile, RoundTripIsBitExact) {
  const auto c = small_circuit(6, 0.2, 3, 10, 2);
  const auto ds = batch_sample(c, InitialState::all_plus, 50, 1, InitialState::all_zero);
  const auto text = serialize(ds);
  const auto back = deserialize_records(text);
  EXPECT_EQ(back.records, ds.records);
  EXPECT_EQ(back.replay_probabilities, ds.replay_probabilities);
  EXPECT_EQ(serialize(back), text);

  const auto plain = batch_sample(c, InitialState::all_zero, 5, 1);
  EXPECT_EQ(serialize(deserialize_records(serialize(plain))), serialize(plain));
}

TEST(RecordFile, EmptyRecords) {
  const auto c = sample_circuit(4, 0.0, 1);
  const auto ds = batch_sample(c, InitialState::all_plus, 3, 1, InitialState::all_zero);
  const auto back = deserialize_records(serialize(ds));
  EXPECT_EQ(back.records.size(), 3u);
  EXPECT_EQ(back.replay_probabilities[0], 1.0);
}

TEST(RecordFile, MalformedInput) {
  const auto c = small_circuit(6, 0.2, 3, 10, 2);
  auto text = serialize(batch_sample(c, InitialState::all_plus, 5, 1));
  EXPECT_THROW(deserialize_records(text.substr(0, text.size() - 3)), Error);
  auto bad = text;
  bad.replace(0, 14, "mxeb-records 9");
  try {
    deserialize_records(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::version_mismatch);
  }
  EXPECT_THROW(deserialize_records(text + "0101\n"), Error);
}
