// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tilefuse {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not conform to an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN/Inf, or a finite-difference evaluation did.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition (bad arguments, unknown ids, bad files).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A configuration is internally inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Dims = std::vector<std::size_t>;

inline std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << ')';
  return os.str();
}

inline std::size_t dims_count(const Dims& d) {
  std::size_t n = 1;
  for (auto e : d) n *= e;
  return n;
}

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

[[noreturn]] inline void shape_fail(const std::string& op, const Dims& a, const Dims& b) {
  throw ShapeError(op + ": incompatible dims " + dims_str(a) + " vs " + dims_str(b));
}

}  // namespace tilefuse
