#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sul {

// Every failure raised by the library derives from Error so callers can
// catch one type at the boundary (the CLI maps subclasses to exit codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class SingularTimeError : public Error {
 public:
  SingularTimeError(const std::string& what, double t)
      : Error(what + " (t = " + std::to_string(t) + ")"), t_(t) {}
  double time() const noexcept { return t_; }

 private:
  double t_;
};

class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& what, std::size_t pivot)
      : Error(what + " (pivot " + std::to_string(pivot) + ")"), pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

class NumericInputError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced during a computation. `iteration` is -1 when the
// failure is not tied to a training iteration.
class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& what, long iteration = -1)
      : Error(iteration >= 0 ? what + " (iteration " + std::to_string(iteration) + ")" : what),
        iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

// ODE integration ran out of steps; carries the last accepted state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, double last_t, std::vector<double> last_state)
      : Error(what), last_t_(last_t), last_state_(std::move(last_state)) {}
  double last_time() const noexcept { return last_t_; }
  const std::vector<double>& last_state() const noexcept { return last_state_; }

 private:
  double last_t_;
  std::vector<double> last_state_;
};

class EmptyClassError : public Error {
 public:
  using Error::Error;
};

class UndefinedOverlapError : public Error {
 public:
  using Error::Error;
};

// Configuration validation failure; `path` is the dotted key path.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace sul
