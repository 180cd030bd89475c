#pragma once

#include <stdexcept>
#include <string>

namespace dsqp {

/// Coarse error category. The CLI maps each kind onto a process exit code.
enum class ErrorKind { Config, Numerical, Data };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// (I - diag(rho) W) is numerically singular on one spatial block.
class SingularSystem : public NumericalError {
 public:
  SingularSystem(int block, const std::string& what)
      : NumericalError("singular spatial system in block " + std::to_string(block) + ": " + what),
        block_(block) {}
  int block() const noexcept { return block_; }

 private:
  int block_;
};

class NonstationaryDraw : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IllConditioned : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class FilterDivergence : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// A sweep step failed; carries the 1-based step number of the sampler order.
class SweepError : public NumericalError {
 public:
  SweepError(int step, const std::string& step_name, const std::string& what)
      : NumericalError("sweep step " + std::to_string(step) + " (" + step_name + "): " + what),
        step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class UnbalancedPanel : public DataError {
 public:
  using DataError::DataError;
};

class SchemaMismatch : public DataError {
 public:
  using DataError::DataError;
};

class RunTooShort : public Error {
 public:
  explicit RunTooShort(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

}  // namespace dsqp
