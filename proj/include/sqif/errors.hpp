#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sqif {

/// Bad input: malformed data, dimension mismatch, out-of-domain values,
/// inconsistent persisted state. Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed (singular system after ridging, Newton
/// divergence). Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}

  NumericalError(const std::string& what, Eigen::VectorXd best_iterate,
                 double residual_norm, std::vector<double> trace)
      : std::runtime_error(what), best_iterate_(std::move(best_iterate)),
        residual_norm_(residual_norm), trace_(std::move(trace)) {}

  const Eigen::VectorXd& best_iterate() const noexcept { return best_iterate_; }
  double residual_norm() const noexcept { return residual_norm_; }
  /// Residual norm at each Newton iterate.
  const std::vector<double>& trace() const noexcept { return trace_; }

private:
  Eigen::VectorXd best_iterate_;
  double residual_norm_ = 0.0;
  std::vector<double> trace_;
};

} // namespace sqif
