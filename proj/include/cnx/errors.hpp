#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cnx {

/// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation was requested in the wrong lifecycle state (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A model or plan payload could not be decoded. `offset` is the byte position of the failure.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Non-finite values appeared where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Path enumeration refused because the path count exceeds the guard.
class PathGuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pruning request that cannot be honoured (e.g. would empty a layer).
class PruneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cnx
