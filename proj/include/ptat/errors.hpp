#pragma once

#include <stdexcept>
#include <string>

namespace ptat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible operand shapes. The message always names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, a loss component, or a training batch.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad user input: configuration fields, strategy tags, argument ranges.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  enum class Kind { format, missing_blob, dimension_mismatch, checksum };
  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class SnapshotError : public Error {
 public:
  // hash covers both a config-hash mismatch and a payload CRC mismatch.
  enum class Kind { io, format, version, hash, truncated };
  SnapshotError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace ptat
