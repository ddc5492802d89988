#pragma once

// Text helpers shared by the file formats: shortest round-trip decimal
// printing and strict line-oriented parsing.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mxeb/error.hpp"

namespace mxeb {

/// Shortest decimal string that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::malformed_input, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view s) {
  Int v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::malformed_input, "not an integer: '" + std::string(s) + "'");
  }
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(std::string_view s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (s.size() != 16 || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::malformed_input, "bad hash '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

/// Sequential reader over '\n'-terminated lines of an in-memory document.
class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  bool done() const noexcept { return pos_ >= text_.size(); }
  std::size_t offset() const noexcept { return pos_; }
  std::size_t line_number() const noexcept { return line_; }

  std::string_view next() {
    if (done()) throw Error(ErrorKind::malformed_input, "unexpected end of input");
    const auto nl = text_.find('\n', pos_);
    const auto end = nl == std::string_view::npos ? text_.size() : nl;
    auto line = text_.substr(pos_, end - pos_);
    pos_ = nl == std::string_view::npos ? text_.size() : nl + 1;
    ++line_;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
  }

  /// Reads `key value...` and checks the key; returns the value tokens.
  std::vector<std::string_view> expect(std::string_view key, std::size_t values) {
    const auto tokens = split_ws(next());
    if (tokens.empty() || tokens[0] != key || tokens.size() != values + 1) {
      throw Error(ErrorKind::malformed_input,
                  "line " + std::to_string(line_) + ": expected '" + std::string(key) + "' with " +
                      std::to_string(values) + " value(s)");
    }
    return {tokens.begin() + 1, tokens.end()};
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error(ErrorKind::io, "short write to '" + path + "'");
}

}  // namespace mxeb
