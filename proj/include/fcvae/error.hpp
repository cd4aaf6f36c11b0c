#pragma once

#include <stdexcept>
#include <string>

namespace fcvae {

// Root of every error the library throws. The CLI maps `is_validation()`
// errors to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool is_validation() const noexcept { return false; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  bool is_validation() const noexcept override { return true; }
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class InvalidMaskError : public Error {
 public:
  using Error::Error;
};

class PhaseError : public Error {
 public:
  using Error::Error;
};

class SequencingError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class VersionError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class CompatibilityError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(std::string term, std::size_t step)
      : Error("non-finite " + term + " at step " + std::to_string(step)),
        term_(std::move(term)),
        step_(step) {}
  const std::string& term() const noexcept { return term_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::string term_;
  std::size_t step_;
};

}  // namespace fcvae
