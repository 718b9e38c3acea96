#pragma once

#include <stdexcept>
#include <string>

namespace hybriddyn {

/// Base of all library errors; `kind()` is a stable machine-readable tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct DimensionMismatchError : Error {
  explicit DimensionMismatchError(const std::string& what) : Error("DimensionMismatch", what) {}
};

struct NonSpdError : Error {
  explicit NonSpdError(const std::string& what) : Error("NonSPD", what) {}
};

struct DegenerateModeError : Error {
  explicit DegenerateModeError(const std::string& what) : Error("DegenerateMode", what) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error("DomainError", what) {}
};

struct FilterUnderflowError : Error {
  explicit FilterUnderflowError(const std::string& what) : Error("FilterUnderflow", what) {}
};

struct AllRegimesCollapsedError : Error {
  explicit AllRegimesCollapsedError(const std::string& what)
      : Error("AllRegimesCollapsed", what) {}
};

struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& what) : Error("NonFinite", what) {}
};

struct DegenerateWeightsError : Error {
  explicit DegenerateWeightsError(const std::string& what) : Error("DegenerateWeights", what) {}
};

struct UnsupportedEnvError : Error {
  explicit UnsupportedEnvError(const std::string& what) : Error("UnsupportedEnv", what) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error("ParseError", what) {}
};

}  // namespace hybriddyn
