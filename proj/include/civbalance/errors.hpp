#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace civb {

enum class ErrorKind {
  config,
  shape,
  numeric,
  convergence,
  degenerate_group,
  ingestion,
  io,
  argument,
  experiment,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error(ErrorKind::argument, what) {}
};

// A loss or intermediate value became NaN/Inf; `stage` names where.
class NumericError : public Error {
 public:
  NumericError(std::string stage, const std::string& what)
      : Error(ErrorKind::numeric, stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(double violation, const std::string& what)
      : Error(ErrorKind::convergence, what), violation_(violation) {}
  double violation() const noexcept { return violation_; }

 private:
  double violation_;
};

class DegenerateGroupError : public Error {
 public:
  explicit DegenerateGroupError(const std::string& what) : Error(ErrorKind::degenerate_group, what) {}
};

// Malformed covariate table. Row and column are 1-based; 0 means "not applicable".
class IngestionError : public Error {
 public:
  IngestionError(std::size_t row, std::size_t column, const std::string& what)
      : Error(ErrorKind::ingestion, "row " + std::to_string(row) + ", column " + std::to_string(column) +
                                        ": " + what),
        row_(row),
        column_(column) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error(ErrorKind::io, what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace civb
