#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "sqif/engine.hpp"
#include "sqif/errors.hpp"
#include "sqif/offline.hpp"

namespace sqif {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_quantile(double u) {
  if (!(u > 0.0 && u < 1.0))
    throw ValidationError("normal quantile needs u in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), u);
}

/// Two-sided p-value of a standard-normal statistic.
inline double two_sided_p(double z) {
  if (std::isinf(z))
    return 0.0;
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

/// Estimated covariance {S' V^{-1} S}^{-1} of a converged fit.
inline Eigen::MatrixXd covariance(const QifSystem& sys, double ridge_eps = 1e-8,
                                  bool* ridged = nullptr) {
  return godambe_inverse(sys, ridge_eps, ridged);
}

inline Eigen::MatrixXd covariance(const EngineState& state) {
  return covariance(state.current().system, state.config.ridge_eps);
}

struct FitReport {
  int batch_index = 0;
  double t = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
  Eigen::VectorXd std_err;
  Eigen::VectorXd ci_lower, ci_upper;
  Eigen::VectorXd wald_z;
  Eigen::VectorXd p_values;
  double level = 0.95;
  double q_used = 0.0;
  int n_iterations = 0;
};

/// Fills standard errors, Wald intervals, z statistics and p-values.
inline void confidence_intervals(FitReport& r, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw ValidationError("confidence level must lie in (0,1)");
  const Eigen::Index p = r.beta.size();
  if (r.cov.rows() != p || r.cov.cols() != p)
    throw ValidationError("covariance shape does not match coefficients");
  const double z = normal_quantile(0.5 * (1.0 + level));
  r.level = level;
  r.std_err.resize(p);
  r.ci_lower.resize(p);
  r.ci_upper.resize(p);
  r.wald_z.resize(p);
  r.p_values.resize(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const double se = std::sqrt(std::max(r.cov(k, k), 0.0));
    r.std_err[k] = se;
    r.ci_lower[k] = r.beta[k] - z * se;
    r.ci_upper[k] = r.beta[k] + z * se;
    if (se > 0.0) {
      r.wald_z[k] = r.beta[k] / se;
    } else {
      r.wald_z[k] = r.beta[k] == 0.0 ? 0.0 : std::copysign(INFINITY, r.beta[k]);
    }
    r.p_values[k] = two_sided_p(r.wald_z[k]);
  }
}

inline FitReport make_report(const Eigen::VectorXd& beta, const Eigen::MatrixXd& cov,
                             double level) {
  FitReport r;
  r.beta = beta;
  r.cov = cov;
  confidence_intervals(r, level);
  return r;
}

/// Report for the currently selected bundle of a stream.
inline FitReport make_report(const EngineState& state, double level = 0.95) {
  const Bundle& b = state.current();
  FitReport r = make_report(b.beta, covariance(state), level);
  r.batch_index = b.batch_count;
  r.t = b.t_prev;
  r.q_used = b.q;
  r.n_iterations = b.iterations;
  return r;
}

} // namespace sqif
