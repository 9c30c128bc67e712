#pragma once

#include <stdexcept>
#include <string>

namespace gradflow {

// All failures surface as typed exceptions so callers can tell a bad file
// from a bad shape from a bad number.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct GeometryError : Error {
  explicit GeometryError(const std::string& msg) : Error("geometry error: " + msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

struct LabelError : Error {
  explicit LabelError(const std::string& msg) : Error("label error: " + msg) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error("usage error: " + msg) {}
};

struct BatchSizeError : Error {
  explicit BatchSizeError(const std::string& msg) : Error("batch-size error: " + msg) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& msg) : Error("parse error: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace gradflow
