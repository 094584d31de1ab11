#pragma once

#include <stdexcept>
#include <string>

namespace coopertrim {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or length disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value violates a documented invariant (NaN, out of range, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

enum class DecodeFailure { kBadMagic, kUnknownVersion, kTruncated, kTrailingBits, kMalformed };

inline const char* to_string(DecodeFailure f) {
  switch (f) {
    case DecodeFailure::kBadMagic: return "bad magic";
    case DecodeFailure::kUnknownVersion: return "unknown version";
    case DecodeFailure::kTruncated: return "truncated";
    case DecodeFailure::kTrailingBits: return "nonzero trailing mask bits";
    case DecodeFailure::kMalformed: return "malformed stream";
  }
  return "?";
}

class DecodeError : public Error {
 public:
  DecodeError(DecodeFailure failure, const std::string& detail)
      : Error(std::string(to_string(failure)) + ": " + detail), failure_(failure) {}
  DecodeFailure failure() const noexcept { return failure_; }

 private:
  DecodeFailure failure_;
};

}  // namespace coopertrim
