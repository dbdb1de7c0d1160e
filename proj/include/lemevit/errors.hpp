#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lemevit {

/// Incompatible tensor shapes passed to a kernel or op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid architecture or attention configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller-supplied data that violates an input requirement (image size, grid extents).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: calling an operation in a state where its precondition cannot hold.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed checkpoint or tensor file. Carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Bad command-line or API usage (unknown format, too few iterations).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values encountered where finite ones are required (e.g. a NaN loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lemevit
