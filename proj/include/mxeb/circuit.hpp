#pragma once

// Random brick-layer monitored circuit of the trapped-ion gate set.
//
// Layers are numbered 1..T with T = T_encoding + T_bulk. Odd layers pair
// (0,1),(2,3),...; even layers pair (1,2),(3,4),... and leave both edge
// qubits idle. Every pair gate is MS(pi/4) * (R(pi/2, phi_i) (x) R(pi/2, phi_{i+1})),
// with each phi drawn independently from {0, pi/4, pi/2}. Measurements only
// occur in bulk layers, after that layer's unitaries.
//
// File format (version 1), one item per line, '\n' terminated:
//
//   mxeb-circuit 1
//   L <even int>
//   T_encoding <int>
//   T_bulk <int>
//   measurement_rate <shortest decimal>
//   seed <u64>
//   layer <t> <tag_0> ... <tag_{L-1}>     for t = 1..T; tag in {0, pi/4, pi/2, -}
//   sites <N>
//   site <qubit> <layer>                  N lines, canonical order
//   hash <16 hex digits>                  FNV-1a 64 of every preceding byte

#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mxeb/error.hpp"
#include "mxeb/format.hpp"
#include "mxeb/rng.hpp"
#include "mxeb/statevector.hpp"

namespace mxeb {

enum class PhiAngle : std::uint8_t { zero = 0, quarter_pi = 1, half_pi = 2 };

inline double radians(PhiAngle a) noexcept {
  switch (a) {
    case PhiAngle::zero: return 0.0;
    case PhiAngle::quarter_pi: return std::numbers::pi / 4;
    case PhiAngle::half_pi: return std::numbers::pi / 2;
  }
  return 0.0;
}

inline std::string_view tag(PhiAngle a) noexcept {
  switch (a) {
    case PhiAngle::zero: return "0";
    case PhiAngle::quarter_pi: return "pi/4";
    case PhiAngle::half_pi: return "pi/2";
  }
  return "?";
}

inline std::optional<PhiAngle> parse_phi_tag(std::string_view s) {
  if (s == "0") return PhiAngle::zero;
  if (s == "pi/4") return PhiAngle::quarter_pi;
  if (s == "pi/2") return PhiAngle::half_pi;
  if (s == "-") return std::nullopt;
  throw Error(ErrorKind::malformed_input, "unknown angle tag '" + std::string(s) + "'");
}

struct MeasurementSite {
  int qubit = 0;
  int layer = 0;
  friend bool operator==(const MeasurementSite&, const MeasurementSite&) = default;
};

/// Pair gate slot within one layer.
struct GateSlot {
  int first = 0;  // acts on (first, first + 1)
  PhiAngle phi_first = PhiAngle::zero;
  PhiAngle phi_second = PhiAngle::zero;
  friend bool operator==(const GateSlot&, const GateSlot&) = default;
};

struct CircuitDescriptor {
  int num_qubits = 0;
  int t_encoding = 0;
  int t_bulk = 0;
  double measurement_rate = 0.0;
  std::uint64_t seed = 0;
  // phi[t - 1][q]; empty optional for a qubit idle in layer t.
  std::vector<std::vector<std::optional<PhiAngle>>> phi;
  std::vector<MeasurementSite> sites;

  int depth() const noexcept { return t_encoding + t_bulk; }
  std::size_t num_measurements() const noexcept { return sites.size(); }
  bool is_bulk(int layer) const noexcept { return layer > t_encoding && layer <= depth(); }

  friend bool operator==(const CircuitDescriptor&, const CircuitDescriptor&) = default;
};

/// First qubit of each pair acting in `layer` (1-based).
inline std::vector<int> pair_starts(int num_qubits, int layer) {
  std::vector<int> starts;
  for (int i = (layer % 2 == 1) ? 0 : 1; i + 1 < num_qubits; i += 2) starts.push_back(i);
  return starts;
}

inline void validate(const CircuitDescriptor& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::invalid_argument, msg); };
  if (c.num_qubits < 2 || c.num_qubits > kMaxQubits || c.num_qubits % 2 != 0) {
    fail("L must be even and in [2, 24]");
  }
  if (c.t_encoding < 0 || c.t_bulk < 0) fail("layer counts must be non-negative");
  if (!(c.measurement_rate >= 0.0 && c.measurement_rate <= 1.0)) fail("p must be in [0, 1]");
  if (c.phi.size() != static_cast<std::size_t>(c.depth())) fail("phi table must have T rows");
  for (int t = 1; t <= c.depth(); ++t) {
    const auto& row = c.phi[t - 1];
    if (row.size() != static_cast<std::size_t>(c.num_qubits)) fail("phi row must have L entries");
    std::vector<bool> active(c.num_qubits, false);
    for (int s : pair_starts(c.num_qubits, t)) active[s] = active[s + 1] = true;
    for (int q = 0; q < c.num_qubits; ++q) {
      if (active[q] != row[q].has_value()) {
        fail("phi presence at layer " + std::to_string(t) + ", qubit " + std::to_string(q) +
             " disagrees with the brick layout");
      }
    }
  }
  for (std::size_t i = 0; i < c.sites.size(); ++i) {
    const auto& s = c.sites[i];
    if (s.qubit < 0 || s.qubit >= c.num_qubits) fail("site qubit out of range");
    if (!c.is_bulk(s.layer)) fail("site outside the bulk phase");
    if (i > 0) {
      const auto& prev = c.sites[i - 1];
      if (!(prev.layer < s.layer || (prev.layer == s.layer && prev.qubit < s.qubit))) {
        fail("sites are not in canonical (layer, qubit) order");
      }
    }
  }
}

/// Samples a descriptor. Gate angles come from stream `phi` and measurement
/// placement from stream `sites`, both derived from `seed`; negative layer
/// counts select the default depth 2L.
inline CircuitDescriptor sample_circuit(int num_qubits, double measurement_rate, std::uint64_t seed,
                                        int t_encoding = -1, int t_bulk = -1) {
  if (num_qubits % 2 != 0) throw Error(ErrorKind::invalid_argument, "L must be even");
  CircuitDescriptor c;
  c.num_qubits = num_qubits;
  c.t_encoding = t_encoding < 0 ? 2 * num_qubits : t_encoding;
  c.t_bulk = t_bulk < 0 ? 2 * num_qubits : t_bulk;
  c.measurement_rate = measurement_rate;
  c.seed = seed;
  if (num_qubits < 2 || num_qubits > kMaxQubits) {
    throw Error(ErrorKind::invalid_argument, "L must be in [2, 24]");
  }
  if (!(measurement_rate >= 0.0 && measurement_rate <= 1.0)) {
    throw Error(ErrorKind::invalid_argument, "p must be in [0, 1]");
  }

  SplitMix64 phi_stream(derive_seed(seed, stream_tag::phi));
  c.phi.assign(c.depth(), std::vector<std::optional<PhiAngle>>(num_qubits));
  for (int t = 1; t <= c.depth(); ++t) {
    for (int s : pair_starts(num_qubits, t)) {
      c.phi[t - 1][s] = static_cast<PhiAngle>(phi_stream.below(3));
      c.phi[t - 1][s + 1] = static_cast<PhiAngle>(phi_stream.below(3));
    }
  }

  SplitMix64 site_stream(derive_seed(seed, stream_tag::sites));
  for (int t = c.t_encoding + 1; t <= c.depth(); ++t) {
    for (int q = 0; q < num_qubits; ++q) {
      if (site_stream.bernoulli(measurement_rate)) c.sites.push_back({q, t});
    }
  }
  return c;
}

inline std::vector<GateSlot> gate_sequence(const CircuitDescriptor& c, int layer) {
  if (layer < 1 || layer > c.depth()) {
    throw Error(ErrorKind::index_out_of_range, "layer " + std::to_string(layer) + " not in [1, " +
                                                   std::to_string(c.depth()) + "]");
  }
  std::vector<GateSlot> out;
  const auto& row = c.phi[layer - 1];
  for (int s : pair_starts(c.num_qubits, layer)) out.push_back({s, *row[s], *row[s + 1]});
  return out;
}

/// MS(pi/4) (R(pi/2, a) (x) R(pi/2, b)) on (first, first+1).
inline TwoQubitGate brick_unitary(PhiAngle a, PhiAngle b, int first) {
  const double half_pi = std::numbers::pi / 2;
  return compose(ms_gate(std::numbers::pi / 4, first),
                 kron(rotation_gate(half_pi, radians(a)), rotation_gate(half_pi, radians(b)), first));
}

namespace detail {

inline std::string circuit_body(const CircuitDescriptor& c) {
  std::string out;
  out += "mxeb-circuit 1\n";
  out += "L " + std::to_string(c.num_qubits) + "\n";
  out += "T_encoding " + std::to_string(c.t_encoding) + "\n";
  out += "T_bulk " + std::to_string(c.t_bulk) + "\n";
  out += "measurement_rate " + format_double(c.measurement_rate) + "\n";
  out += "seed " + std::to_string(c.seed) + "\n";
  for (int t = 1; t <= c.depth(); ++t) {
    out += "layer " + std::to_string(t);
    for (const auto& a : c.phi[t - 1]) {
      out += ' ';
      out += a ? tag(*a) : std::string_view("-");
    }
    out += '\n';
  }
  out += "sites " + std::to_string(c.sites.size()) + "\n";
  for (const auto& s : c.sites) {
    out += "site " + std::to_string(s.qubit) + " " + std::to_string(s.layer) + "\n";
  }
  return out;
}

}  // namespace detail

inline std::uint64_t content_hash(const CircuitDescriptor& c) {
  return fnv1a64(detail::circuit_body(c));
}

inline std::string circuit_hash_hex(const CircuitDescriptor& c) { return hex64(content_hash(c)); }

inline std::string serialize(const CircuitDescriptor& c) {
  auto body = detail::circuit_body(c);
  const auto h = fnv1a64(body);
  body += "hash " + hex64(h) + "\n";
  return body;
}

inline CircuitDescriptor deserialize_circuit(std::string_view text) {
  LineReader in(text);
  const auto header = split_ws(in.next());
  if (header.size() != 2 || header[0] != "mxeb-circuit") {
    throw Error(ErrorKind::malformed_input, "missing 'mxeb-circuit' header");
  }
  if (header[1] != "1") {
    throw Error(ErrorKind::version_mismatch,
                "circuit format version " + std::string(header[1]) + " (expected 1)");
  }
  CircuitDescriptor c;
  c.num_qubits = parse_int<int>(in.expect("L", 1)[0]);
  c.t_encoding = parse_int<int>(in.expect("T_encoding", 1)[0]);
  c.t_bulk = parse_int<int>(in.expect("T_bulk", 1)[0]);
  c.measurement_rate = parse_double(in.expect("measurement_rate", 1)[0]);
  c.seed = parse_int<std::uint64_t>(in.expect("seed", 1)[0]);
  if (c.num_qubits < 2 || c.num_qubits > kMaxQubits || c.t_encoding < 0 || c.t_bulk < 0) {
    throw Error(ErrorKind::malformed_input, "header values out of range");
  }
  for (int t = 1; t <= c.depth(); ++t) {
    const auto tokens = in.expect("layer", static_cast<std::size_t>(c.num_qubits) + 1);
    if (parse_int<int>(tokens[0]) != t) {
      throw Error(ErrorKind::malformed_input, "layer rows out of order");
    }
    auto& row = c.phi.emplace_back();
    for (int q = 0; q < c.num_qubits; ++q) row.push_back(parse_phi_tag(tokens[q + 1]));
  }
  const auto n = parse_int<std::size_t>(in.expect("sites", 1)[0]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto tokens = in.expect("site", 2);
    c.sites.push_back({parse_int<int>(tokens[0]), parse_int<int>(tokens[1])});
  }
  const std::size_t body_end = in.offset();
  const auto stored = parse_hex64(in.expect("hash", 1)[0]);
  const auto actual = fnv1a64(text.substr(0, body_end));
  if (stored != actual) {
    throw Error(ErrorKind::hash_mismatch,
                "stored " + hex64(stored) + " but content hashes to " + hex64(actual));
  }
  if (!in.done()) throw Error(ErrorKind::malformed_input, "trailing content after hash");
  try {
    validate(c);
  } catch (const Error& e) {
    throw Error(ErrorKind::malformed_input, e.what());
  }
  return c;
}

}  // namespace mxeb
