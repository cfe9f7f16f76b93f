#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace autoprom {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied something the contract rejects (bad shape, bad config,
/// inconsistent files). The CLI maps this family to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Malformed serialized data. Carries the byte offset where decoding failed.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training or inference had to stop (NaN loss, I/O failure mid-run).
/// The CLI maps this to exit code 3.
class RuntimeAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace autoprom
