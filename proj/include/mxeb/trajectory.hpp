#pragma once

// Executes a circuit descriptor: Born-rule sampling runs, unnormalized
// replay of a fixed record, and per-layer half-chain entropy traces.
//
// Record dataset format (version 1):
//
//   mxeb-records 1
//   circuit_hash <16 hex>
//   initial_state <all-plus|all-zero>
//   seed <u64>
//   M <count>
//   N <bits per record>
//   replay_state <all-plus|all-zero|none>
//   <bits> [<probability>]        M rows; bits is '-' when N = 0
//
// The probability column is present iff replay_state != none and holds the
// probability of the record under replay_state in shortest round-trip decimal.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mxeb/circuit.hpp"
#include "mxeb/error.hpp"
#include "mxeb/format.hpp"
#include "mxeb/parallel.hpp"
#include "mxeb/rng.hpp"
#include "mxeb/statevector.hpp"

namespace mxeb {

enum class InitialState { all_plus, all_zero };

inline std::string_view to_string(InitialState s) noexcept {
  return s == InitialState::all_plus ? "all-plus" : "all-zero";
}

inline InitialState parse_initial_state(std::string_view s) {
  if (s == "all-plus") return InitialState::all_plus;
  if (s == "all-zero") return InitialState::all_zero;
  throw Error(ErrorKind::malformed_input, "unknown initial state '" + std::string(s) + "'");
}

inline StateVector prepare(int num_qubits, InitialState s) {
  return s == InitialState::all_plus ? StateVector::all_plus(num_qubits)
                                     : StateVector::all_zero(num_qubits);
}

struct MeasurementRecord {
  std::vector<std::uint8_t> bits;

  std::size_t size() const noexcept { return bits.size(); }

  std::string to_string() const {
    if (bits.empty()) return "-";
    std::string s(bits.size(), '0');
    for (std::size_t i = 0; i < bits.size(); ++i) s[i] = bits[i] ? '1' : '0';
    return s;
  }

  static MeasurementRecord from_string(std::string_view s) {
    MeasurementRecord r;
    if (s == "-") return r;
    r.bits.reserve(s.size());
    for (char ch : s) {
      if (ch != '0' && ch != '1') {
        throw Error(ErrorKind::malformed_input, "record contains '" + std::string(1, ch) + "'");
      }
      r.bits.push_back(static_cast<std::uint8_t>(ch - '0'));
    }
    return r;
  }

  /// Record whose first site is the most significant bit of `index`.
  static MeasurementRecord from_index(std::uint64_t index, std::size_t n) {
    MeasurementRecord r;
    r.bits.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.bits[i] = static_cast<std::uint8_t>((index >> (n - 1 - i)) & 1);
    return r;
  }

  std::uint64_t index() const noexcept {
    std::uint64_t v = 0;
    for (auto b : bits) v = (v << 1) | b;
    return v;
  }

  friend bool operator==(const MeasurementRecord&, const MeasurementRecord&) = default;
};

/// One layer as the engine executes it: fused pair unitaries, then Z
/// measurements on `measured` in ascending order.
struct CompiledLayer {
  std::vector<TwoQubitGate> gates;
  std::vector<int> measured;
};

struct CircuitProgram {
  int num_qubits = 0;
  std::vector<CompiledLayer> layers;

  std::size_t num_measurements() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.measured.size();
    return n;
  }

  /// Number of leading layers without measurements.
  std::size_t unmonitored_prefix() const noexcept {
    std::size_t k = 0;
    while (k < layers.size() && layers[k].measured.empty()) ++k;
    return k;
  }
};

inline CircuitProgram compile(const CircuitDescriptor& c) {
  validate(c);
  CircuitProgram prog;
  prog.num_qubits = c.num_qubits;
  prog.layers.resize(c.depth());
  for (int t = 1; t <= c.depth(); ++t) {
    for (const auto& slot : gate_sequence(c, t)) {
      prog.layers[t - 1].gates.push_back(brick_unitary(slot.phi_first, slot.phi_second, slot.first));
    }
  }
  for (const auto& s : c.sites) prog.layers[s.layer - 1].measured.push_back(s.qubit);
  return prog;
}

struct SampledRecord {
  MeasurementRecord record;
  double probability = 1.0;  // product of the Born probabilities of the drawn outcomes
};

struct EntropyPoint {
  double layer = 0.0;
  double entropy = 0.0;  // nats
};

struct EntropyTrace {
  std::vector<EntropyPoint> series;
  int num_circuits = 1;
  bool pair_averaged = false;
};

/// Averages non-overlapping (odd, even) layer pairs; the pair is reported at
/// its even layer. A trailing unpaired layer is kept as is.
inline EntropyTrace pair_average(const EntropyTrace& trace) {
  EntropyTrace out;
  out.num_circuits = trace.num_circuits;
  out.pair_averaged = true;
  const auto& s = trace.series;
  for (std::size_t i = 0; i < s.size(); i += 2) {
    if (i + 1 < s.size()) {
      out.series.push_back({s[i + 1].layer, 0.5 * (s[i].entropy + s[i + 1].entropy)});
    } else {
      out.series.push_back(s[i]);
    }
  }
  return out;
}

/// Runs trajectories of one compiled circuit. The state after the
/// measurement-free prefix is computed once per initial state and reused.
class TrajectoryEngine {
 public:
  explicit TrajectoryEngine(CircuitProgram program)
      : program_(std::move(program)),
        prefix_(program_.unmonitored_prefix()),
        plus_(advance_prefix(InitialState::all_plus)),
        zero_(advance_prefix(InitialState::all_zero)) {}

  explicit TrajectoryEngine(const CircuitDescriptor& c) : TrajectoryEngine(compile(c)) {}

  const CircuitProgram& program() const noexcept { return program_; }
  std::size_t num_measurements() const noexcept { return program_.num_measurements(); }

  SampledRecord sample(InitialState init, std::uint64_t seed) const {
    SplitMix64 rng(seed);
    StateVector state = prefix_state(init);
    SampledRecord out;
    out.record.bits.reserve(num_measurements());
    for (std::size_t l = prefix_; l < program_.layers.size(); ++l) {
      const auto& layer = program_.layers[l];
      for (const auto& g : layer.gates) state.apply(g);
      for (int q : layer.measured) {
        const double p1 = std::clamp(state.weight_one(q), 0.0, 1.0);
        const int bit = rng.uniform() < p1 ? 1 : 0;
        out.probability *= bit ? p1 : 1.0 - p1;
        state.project_inplace(q, bit, true);
        out.record.bits.push_back(static_cast<std::uint8_t>(bit));
      }
    }
    return out;
  }

  /// Squared norm after all unitaries and unnormalized projectors for `m`.
  double replay(InitialState init, const MeasurementRecord& m) const {
    if (m.size() != num_measurements()) {
      throw Error(ErrorKind::length_mismatch, "record has " + std::to_string(m.size()) +
                                                  " bits, circuit has " +
                                                  std::to_string(num_measurements()) + " sites");
    }
    if (m.bits.empty()) return 1.0;
    StateVector state = prefix_state(init);
    std::size_t k = 0;
    double weight = 1.0;
    for (std::size_t l = prefix_; l < program_.layers.size(); ++l) {
      const auto& layer = program_.layers[l];
      for (const auto& g : layer.gates) state.apply(g);
      for (int q : layer.measured) {
        weight = state.project_inplace(q, m.bits[k++], false);
        if (weight == 0.0) return 0.0;
      }
      if (k == m.bits.size()) break;
    }
    return weight;
  }

  EntropyTrace entropy(InitialState init, std::uint64_t seed) const {
    SplitMix64 rng(seed);
    StateVector state = prepare(program_.num_qubits, init);
    EntropyTrace trace;
    const int half = program_.num_qubits / 2;
    for (std::size_t l = 0; l < program_.layers.size(); ++l) {
      const auto& layer = program_.layers[l];
      for (const auto& g : layer.gates) state.apply(g);
      for (int q : layer.measured) {
        const double p1 = std::clamp(state.weight_one(q), 0.0, 1.0);
        state.project_inplace(q, rng.uniform() < p1 ? 1 : 0, true);
      }
      trace.series.push_back({static_cast<double>(l + 1), entanglement_entropy(state, half)});
    }
    return trace;
  }

 private:
  StateVector advance_prefix(InitialState init) const {
    StateVector s = prepare(program_.num_qubits, init);
    for (std::size_t l = 0; l < prefix_; ++l) {
      for (const auto& g : program_.layers[l].gates) s.apply(g);
    }
    return s;
  }

  const StateVector& prefix_state(InitialState init) const {
    return init == InitialState::all_plus ? plus_ : zero_;
  }

  CircuitProgram program_;
  std::size_t prefix_ = 0;
  StateVector plus_;
  StateVector zero_;
};

inline MeasurementRecord run_sampling(const CircuitDescriptor& c, InitialState init,
                                      std::uint64_t seed) {
  return TrajectoryEngine(c).sample(init, seed).record;
}

inline double replay_probability(const CircuitDescriptor& c, InitialState init,
                                 const MeasurementRecord& m) {
  return TrajectoryEngine(c).replay(init, m);
}

inline EntropyTrace entropy_trace(const CircuitDescriptor& c, InitialState init, std::uint64_t seed,
                                  bool pair_averaged = false) {
  auto trace = TrajectoryEngine(c).entropy(init, seed);
  return pair_averaged ? pair_average(trace) : trace;
}

/// Per-run seed of run `j` in a batch keyed by `seed`.
inline std::uint64_t run_seed(std::uint64_t seed, std::uint64_t j) noexcept {
  return derive_seed(seed, stream_tag::run, j);
}

struct RecordDataset {
  std::string circuit_hash;
  InitialState initial_state = InitialState::all_plus;
  std::uint64_t seed = 0;
  std::size_t record_length = 0;
  std::optional<InitialState> replay_state;
  std::vector<MeasurementRecord> records;
  std::vector<double> replay_probabilities;  // parallel to records when replay_state is set

  std::size_t size() const noexcept { return records.size(); }
};

/// M independent runs; run j uses run_seed(seed, j). With `replay_state`,
/// each record is paired with its probability under that initial state.
/// When replay_state equals `init` the probability comes from the sampling
/// run itself (product of Born probabilities), which is the same quantity.
inline RecordDataset batch_sample(const TrajectoryEngine& engine, const std::string& circuit_hash,
                                  InitialState init, std::size_t count, std::uint64_t seed,
                                  std::optional<InitialState> replay_state = std::nullopt,
                                  int workers = 1) {
  if (count < 1) throw Error(ErrorKind::invalid_argument, "M must be at least 1");
  RecordDataset ds;
  ds.circuit_hash = circuit_hash;
  ds.initial_state = init;
  ds.seed = seed;
  ds.record_length = engine.num_measurements();
  ds.replay_state = replay_state;
  ds.records.resize(count);
  if (replay_state) ds.replay_probabilities.resize(count);
  parallel_for(count, workers, [&](std::size_t j) {
    auto run = engine.sample(init, run_seed(seed, j));
    if (replay_state) {
      ds.replay_probabilities[j] =
          *replay_state == init ? run.probability : engine.replay(*replay_state, run.record);
    }
    ds.records[j] = std::move(run.record);
  });
  return ds;
}

inline RecordDataset batch_sample(const CircuitDescriptor& c, InitialState init, std::size_t count,
                                  std::uint64_t seed,
                                  std::optional<InitialState> replay_state = std::nullopt,
                                  int workers = 1) {
  return batch_sample(TrajectoryEngine(c), circuit_hash_hex(c), init, count, seed, replay_state,
                      workers);
}

/// First `m` records of a dataset (the prefix shared by estimators at size m).
inline RecordDataset prefix(const RecordDataset& ds, std::size_t m) {
  if (m > ds.size()) throw Error(ErrorKind::invalid_argument, "prefix longer than dataset");
  RecordDataset out = ds;
  out.records.resize(m);
  if (out.replay_state) out.replay_probabilities.resize(m);
  return out;
}

inline std::string serialize(const RecordDataset& ds) {
  std::string out;
  out += "mxeb-records 1\n";
  out += "circuit_hash " + ds.circuit_hash + "\n";
  out += "initial_state " + std::string(to_string(ds.initial_state)) + "\n";
  out += "seed " + std::to_string(ds.seed) + "\n";
  out += "M " + std::to_string(ds.records.size()) + "\n";
  out += "N " + std::to_string(ds.record_length) + "\n";
  out += "replay_state " +
         std::string(ds.replay_state ? to_string(*ds.replay_state) : std::string_view("none")) + "\n";
  for (std::size_t j = 0; j < ds.records.size(); ++j) {
    out += ds.records[j].to_string();
    if (ds.replay_state) {
      out += ' ';
      out += format_double(ds.replay_probabilities[j]);
    }
    out += '\n';
  }
  return out;
}

inline RecordDataset deserialize_records(std::string_view text) {
  LineReader in(text);
  const auto header = split_ws(in.next());
  if (header.size() != 2 || header[0] != "mxeb-records") {
    throw Error(ErrorKind::malformed_input, "missing 'mxeb-records' header");
  }
  if (header[1] != "1") {
    throw Error(ErrorKind::version_mismatch, "record format version " + std::string(header[1]));
  }
  RecordDataset ds;
  ds.circuit_hash = std::string(in.expect("circuit_hash", 1)[0]);
  ds.initial_state = parse_initial_state(in.expect("initial_state", 1)[0]);
  ds.seed = parse_int<std::uint64_t>(in.expect("seed", 1)[0]);
  const auto m = parse_int<std::size_t>(in.expect("M", 1)[0]);
  ds.record_length = parse_int<std::size_t>(in.expect("N", 1)[0]);
  const auto replay = in.expect("replay_state", 1)[0];
  if (replay != "none") ds.replay_state = parse_initial_state(replay);
  ds.records.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto tokens = split_ws(in.next());
    const std::size_t want = ds.replay_state ? 2 : 1;
    if (tokens.size() != want) {
      throw Error(ErrorKind::malformed_input, "record row " + std::to_string(j) + " has " +
                                                  std::to_string(tokens.size()) + " columns");
    }
    auto rec = MeasurementRecord::from_string(tokens[0]);
    if (rec.size() != ds.record_length) {
      throw Error(ErrorKind::length_mismatch, "record row " + std::to_string(j));
    }
    ds.records.push_back(std::move(rec));
    if (ds.replay_state) ds.replay_probabilities.push_back(parse_double(tokens[1]));
  }
  if (!in.done()) throw Error(ErrorKind::malformed_input, "more rows than M");
  return ds;
}

}  // namespace mxeb
