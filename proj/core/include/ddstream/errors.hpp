#pragma once

#include <stdexcept>
#include <string>

namespace ddstream {

// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A call made in a state the contract forbids (e.g. streaming a
// non-causal head, stepping past the truncation limit).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class FormatErrorKind {
  kBadMagic,
  kBadVersion,
  kTruncated,
  kDimensionOverflow,
  kEmpty,
  kShapeMismatch,
  kMissingParameter,
  kBadValue,
  kIo,
};

const char* ToString(FormatErrorKind kind);

// Malformed or unreadable file content. `kind` lets callers tell the
// failure modes apart without parsing the message.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace ddstream
