#pragma once

#include <stdexcept>
#include <string>

namespace cpgc {

/// Tensor shapes that cannot be combined by the requested operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Argument outside an operation's mathematical domain (log of a non-positive
/// value, division by zero, out-of-vocabulary token).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A slice whose Euclidean norm is too small to normalize.
struct DegenerateNormError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Caller broke a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Optimization produced a non-finite loss.
struct TrainingFailure : std::runtime_error {
  TrainingFailure(const std::string& what, long iteration)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration(iteration) {}
  long iteration;
};

/// A metric with an empty denominator, e.g. ASR with no initially correct pair.
struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Filesystem or format problem, always carrying the offending path.
struct FileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cpgc
