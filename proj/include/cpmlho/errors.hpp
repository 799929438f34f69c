#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>

namespace cpmlho {

struct RunLog;

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad IDX magic or otherwise unparseable file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File shorter than its header promises.
class TruncationError : public Error {
 public:
  using Error::Error;
};

/// Image and label files disagree on the record count.
class PairingError : public Error {
 public:
  using Error::Error;
};

/// Bad values inside otherwise well-formed data (e.g. a label out of range).
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A loss, gap or gradient became non-finite. Carries the step index and,
/// when raised from a full training run, the log accumulated so far.
class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }
  const std::shared_ptr<const RunLog>& partial_log() const noexcept { return partial_; }
  void attach_log(std::shared_ptr<const RunLog> log) { partial_ = std::move(log); }

 private:
  std::size_t step_;
  std::shared_ptr<const RunLog> partial_;
};

}  // namespace cpmlho
