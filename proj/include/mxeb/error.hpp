#pragma once

#include <stdexcept>
#include <string>

namespace mxeb {

enum class ErrorKind {
  index_out_of_range,
  unnormalized_state,
  degenerate_branch,
  invalid_argument,
  malformed_input,
  version_mismatch,
  hash_mismatch,
  length_mismatch,
  enumeration_infeasible,
  degenerate_estimate,
  missing_model,
  empty_curve,
  divergence,
  zero_probability,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::index_out_of_range: return "index-out-of-range";
    case ErrorKind::unnormalized_state: return "unnormalized-state";
    case ErrorKind::degenerate_branch: return "degenerate-branch";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::malformed_input: return "malformed-input";
    case ErrorKind::version_mismatch: return "version-mismatch";
    case ErrorKind::hash_mismatch: return "hash-mismatch";
    case ErrorKind::length_mismatch: return "length-mismatch";
    case ErrorKind::enumeration_infeasible: return "enumeration-infeasible";
    case ErrorKind::degenerate_estimate: return "degenerate-estimate";
    case ErrorKind::missing_model: return "missing-model";
    case ErrorKind::empty_curve: return "empty-curve";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::zero_probability: return "zero-probability";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Library-wide exception; `kind()` lets callers branch on the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mxeb
