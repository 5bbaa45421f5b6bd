#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace steerkit {

// Process exit codes used by the CLI: 0 success, 2 insufficient data,
// 3 transport, 4 format. Everything else maps to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

class TransportError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

// Optimizer blow-up; carries the per-iteration losses seen so far.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& msg, std::vector<double> trace)
      : NumericError(msg), loss_trace(std::move(trace)) {}
  std::vector<double> loss_trace;
};

}  // namespace steerkit
