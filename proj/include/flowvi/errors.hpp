#pragma once

#include <stdexcept>
#include <string>

namespace flowvi {

/// A recorded value or intermediate result became NaN/Inf. Training loops
/// catch this, skip the batch and keep going; repeated failures abort.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// API misuse: wrong shapes, cross-tape inputs, bad preconditions.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

/// Every importance weight underflowed to zero (all log-weights -inf/NaN).
class DegenerateWeights : public std::runtime_error {
 public:
  explicit DegenerateWeights(const std::string& what) : std::runtime_error(what) {}
};

/// The singular-regime batch construction could not reach the requested
/// weight separation. Carries the best ratio that was achieved.
class ConstructionError : public std::runtime_error {
 public:
  ConstructionError(const std::string& what, double achieved_ratio)
      : std::runtime_error(what), achieved_ratio(achieved_ratio) {}
  double achieved_ratio;
};

/// Malformed config, metrics CSV or binary file. Carries a line number
/// when one makes sense (0 otherwise).
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what, long line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line(line) {}
  long line;
};

}  // namespace flowvi
