#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ekd {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// data_pipeline

class MalformedFileError : public Error {
 public:
  using Error::Error;
};

class CorruptRecordError : public Error {
 public:
  CorruptRecordError(std::size_t record, int label, int bound)
      : Error("corrupt record " + std::to_string(record) + ": label " + std::to_string(label) +
              " outside [0, " + std::to_string(bound) + ")"),
        record_(record) {}
  std::size_t record_index() const noexcept { return record_; }

 private:
  std::size_t record_;
};

class InfeasibleFractionError : public Error {
 public:
  using Error::Error;
};

// model_zoo

class InvalidSpecError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  ShapeError(std::string layer, const std::string& what)
      : Error(layer + ": " + what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

// distill_losses

class InvalidInputError : public Error {
 public:
  using Error::Error;
};


// training_engine

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

// Branch/teacher count disagreement; also a configuration error for callers
// of the training stage.
class PairingError : public ConfigurationError {
 public:
  using ConfigurationError::ConfigurationError;
};

class DivergedError : public Error {
 public:
  explicit DivergedError(int epoch)
      : Error("training diverged (non-finite loss) in epoch " + std::to_string(epoch)),
        epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class CheckpointVersionError : public Error {
 public:
  using Error::Error;
};

class TruncatedFileError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
 public:
  ShapeMismatchError(std::string tensor, const std::string& what)
      : Error("tensor '" + tensor + "': " + what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

// experiment_cli

class ConfigParseError : public Error {
 public:
  ConfigParseError(int line, const std::string& what)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class MissingDatasetError : public Error {
 public:
  using Error::Error;
};

class ComparabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace ekd
