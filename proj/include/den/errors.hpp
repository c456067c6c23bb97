#pragma once

#include <stdexcept>
#include <string>

namespace den {

// Base of every error raised by the library. Callers that only need to know
// "something failed" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class MissingHeadError : public Error { using Error::Error; };
class SequencingError : public Error { using Error::Error; };
class OracleError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
// Config problem; the message carries the field path or line.
class ConfigError : public Error { using Error::Error; };

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int epoch, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Divergence inside an experiment, tagged with the learner and stage.
class RunDiverged : public Error {
 public:
  RunDiverged(const std::string& learner, int stage, const std::string& what)
      : Error("learner '" + learner + "' diverged at stage " + std::to_string(stage) + ": " + what) {}
};

}  // namespace den
