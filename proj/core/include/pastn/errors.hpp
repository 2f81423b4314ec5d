#pragma once

#include <stdexcept>
#include <string>

namespace pastn {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched tensor extents; messages name both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (node id, axis, split position).
class IndexError : public Error {
 public:
  using Error::Error;
};

// A numeric argument outside its valid domain.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Invalid model / run configuration detected at construction time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input files; messages carry the offending row where known.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A dataset that cannot support the requested operation.
class DataError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated (wrong call sequence, missing gradient).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss; the message names the batch.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace pastn
