#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kinflow {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a training loss turns non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t iteration, double loss)
      : std::runtime_error("training diverged at iteration " + std::to_string(iteration) +
                           " (loss=" + std::to_string(loss) + ")"),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Raised when an ODE integration produces a non-finite state.
class IntegrationDiverged : public std::runtime_error {
 public:
  explicit IntegrationDiverged(std::size_t step)
      : std::runtime_error("integration produced a non-finite state at step " +
                           std::to_string(step)),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// A statistic that has no value for the given input (constant ranks, zero spread).
class UndefinedStatistic : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace kinflow
