#pragma once

#include <stdexcept>
#include <string>

namespace crossfi {

// Exit codes used by the command-line tool.
enum class ExitCode : int { ok = 0, config = 2, data = 3, runtime = 4 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::runtime; }
};

// Invalid configuration, flags, or manifest schema.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

class SchemaError : public ConfigError {
 public:
  SchemaError(const std::string& field, const std::string& what)
      : ConfigError("field '" + field + "': " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class InsufficientSupportError : public DataError {
 public:
  using DataError::DataError;
};

class EmptySessionError : public DataError {
 public:
  using DataError::DataError;
};

class NormalizerError : public Error {
 public:
  using Error::Error;
};

class PoolSizeError : public Error {
 public:
  using Error::Error;
};

// A class has no template and no fallback at inference time.
class CoverageError : public Error {
 public:
  CoverageError(int label, const std::string& what)
      : Error(what), label_(label) {}
  int label() const noexcept { return label_; }

 private:
  int label_;
};

class ArchiveError : public DataError {
 public:
  using DataError::DataError;
};

class VersionMismatchError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

}  // namespace crossfi
