#pragma once

#include <stdexcept>
#include <string>

namespace reliscope {

// All library failures derive from Error. The exit_code groups map onto the
// CLI contract: 2 invalid input, 3 insufficient data, 4 numerical failure.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg, int exit_code = 2)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

class InvalidInputError : public Error {
 public:
  explicit InvalidInputError(const std::string& msg) : Error(msg, 2) {}
};

class InsufficientDataError : public Error {
 public:
  explicit InsufficientDataError(const std::string& msg) : Error(msg, 3) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

class EmptyEvaluationSetError : public InsufficientDataError {
 public:
  EmptyEvaluationSetError() : InsufficientDataError("empty evaluation set") {}
};

class ClassAbsentError : public InsufficientDataError {
 public:
  explicit ClassAbsentError(const std::string& which)
      : InsufficientDataError("class absent from truth: " + which) {}
};

class InsufficientSamplesError : public InsufficientDataError {
 public:
  explicit InsufficientSamplesError(const std::string& msg)
      : InsufficientDataError(msg) {}
};

class IsolatedSampleError : public NumericError {
 public:
  explicit IsolatedSampleError(const std::string& msg) : NumericError(msg) {}
};

class SurrogateDegenerateError : public NumericError {
 public:
  explicit SurrogateDegenerateError(const std::string& msg)
      : NumericError(msg) {}
};

class UnsupportedExplainerError : public InvalidInputError {
 public:
  explicit UnsupportedExplainerError(const std::string& msg)
      : InvalidInputError(msg) {}
};

class TrainingDivergedError : public NumericError {
 public:
  TrainingDivergedError(int epoch, const std::string& msg)
      : NumericError(msg), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class CheckpointError : public InvalidInputError {
 public:
  explicit CheckpointError(const std::string& msg) : InvalidInputError(msg) {}
};

}  // namespace reliscope
