#pragma once

// GLM mean/variance machinery for marginal models with canonical links.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "sqif/errors.hpp"

namespace sqif {

enum class Family { GaussianIdentity, BernoulliLogit, PoissonLog };

inline constexpr double kLogitEtaClamp = 35.0;
inline constexpr double kPoissonMeanFloor = 1e-12;
// exp(709) is the largest finite power of e in binary64.
inline constexpr double kPoissonEtaMax = 709.0;

inline std::string_view family_name(Family f) {
  switch (f) {
  case Family::GaussianIdentity: return "gaussian";
  case Family::BernoulliLogit: return "logistic";
  case Family::PoissonLog: return "poisson";
  }
  return "unknown";
}

inline Family parse_family(std::string_view name) {
  if (name == "gaussian" || name == "gaussian_identity" || name == "linear")
    return Family::GaussianIdentity;
  if (name == "logistic" || name == "bernoulli" || name == "bernoulli_logit" ||
      name == "binomial")
    return Family::BernoulliLogit;
  if (name == "poisson" || name == "poisson_log")
    return Family::PoissonLog;
  throw ValidationError("unknown family '" + std::string(name) + "'");
}

/// Fixed model description shared by every batch of a stream.
struct ModelSpec {
  Family family = Family::GaussianIdentity;
  int p = 0;       ///< number of regression coefficients
  int s_count = 2; ///< 1: identity basis only, 2: identity + AR(1) off-diagonals

  int score_dim() const { return p * s_count; }
  bool operator==(const ModelSpec&) const = default;
};

/// One subject's observations collected at a single update time.
struct Batch {
  std::string subject_id;
  int batch_index = 1;
  double t = 0.0;
  Eigen::MatrixXd X; ///< n_j x p
  Eigen::VectorXd y; ///< n_j
  Eigen::Index size() const { return y.size(); }
};

/// A single observation (covariate row and outcome).
struct Observation {
  Eigen::VectorXd x;
  double y = 0.0;
};

/// Batches for one update time keyed by subject id. Iteration order (sorted
/// ids) is the fixed reduction order for every aggregate.
using SubjectBatches = std::map<std::string, Batch>;

struct MeanDeriv {
  Eigen::VectorXd mu;
  Eigen::VectorXd a_diag; ///< v(mu), floored for the Poisson family
  Eigen::MatrixXd D;      ///< d mu / d beta, n_j x p
};

inline double link_inverse(double eta, Family family) {
  switch (family) {
  case Family::GaussianIdentity:
    return eta;
  case Family::BernoulliLogit: {
    const double e = std::clamp(eta, -kLogitEtaClamp, kLogitEtaClamp);
    // Stable for both signs.
    if (e >= 0.0)
      return 1.0 / (1.0 + std::exp(-e));
    const double z = std::exp(e);
    return z / (1.0 + z);
  }
  case Family::PoissonLog:
    return std::exp(std::min(eta, kPoissonEtaMax));
  }
  return eta;
}

inline double variance_fn(double mu, Family family) {
  switch (family) {
  case Family::GaussianIdentity:
    return 1.0;
  case Family::BernoulliLogit:
    if (!(mu > 0.0 && mu < 1.0))
      throw ValidationError("Bernoulli variance requires mean in (0,1), got " +
                            std::to_string(mu));
    return mu * (1.0 - mu);
  case Family::PoissonLog:
    if (!(mu >= 0.0))
      throw ValidationError("Poisson variance requires nonnegative mean, got " +
                            std::to_string(mu));
    return mu;
  }
  return 1.0;
}

/// d mu / d eta at the mean mu; equals v(mu) for canonical links.
inline double mean_slope(double mu, Family family) {
  switch (family) {
  case Family::GaussianIdentity: return 1.0;
  case Family::BernoulliLogit: return mu * (1.0 - mu);
  case Family::PoissonLog: return mu;
  }
  return 1.0;
}

/// Mean, variance and slope of a single observation at linear predictor eta.
struct PointMoments {
  double mu;
  double a;     ///< working variance, strictly positive
  double slope; ///< d mu / d eta
};

inline PointMoments point_moments(double eta, Family family) {
  const double mu = link_inverse(eta, family);
  double a = variance_fn(mu, family);
  if (family == Family::PoissonLog)
    a = std::max(a, kPoissonMeanFloor);
  return {mu, a, mean_slope(mu, family)};
}

inline MeanDeriv mean_deriv(const Eigen::Ref<const Eigen::MatrixXd>& X,
                            const Eigen::Ref<const Eigen::VectorXd>& beta,
                            Family family) {
  if (X.cols() != beta.size())
    throw ValidationError("mean_deriv: design has " + std::to_string(X.cols()) +
                          " columns but beta has " + std::to_string(beta.size()));
  const Eigen::Index n = X.rows();
  MeanDeriv out;
  out.mu.resize(n);
  out.a_diag.resize(n);
  out.D.resize(n, X.cols());
  const Eigen::VectorXd eta = X * beta;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (!std::isfinite(eta[k])) {
      std::ostringstream msg;
      msg << "mean_deriv: non-finite linear predictor at row " << k + 1;
      throw NumericalError(msg.str());
    }
    const PointMoments pm = point_moments(eta[k], family);
    out.mu[k] = pm.mu;
    out.a_diag[k] = pm.a;
    out.D.row(k) = pm.slope * X.row(k);
  }
  return out;
}

inline MeanDeriv mean_deriv(const Batch& batch, const Eigen::VectorXd& beta,
                            Family family) {
  return mean_deriv(batch.X, beta, family);
}

/// Checks the structural and family-domain invariants of a batch.
inline void validate_batch(const Batch& batch, Family family) {
  const auto where = [&] {
    return "batch " + std::to_string(batch.batch_index) + " of subject '" +
           batch.subject_id + "'";
  };
  if (batch.X.rows() != batch.y.size())
    throw ValidationError(where() + ": X has " + std::to_string(batch.X.rows()) +
                          " rows but y has " + std::to_string(batch.y.size()));
  if (batch.y.size() < 1)
    throw ValidationError(where() + ": empty batch");
  if (!std::isfinite(batch.t))
    throw ValidationError(where() + ": non-finite batch time");
  if (!batch.X.allFinite() || !batch.y.allFinite())
    throw ValidationError(where() + ": non-finite entries");
  for (Eigen::Index k = 0; k < batch.y.size(); ++k) {
    const double v = batch.y[k];
    if (family == Family::BernoulliLogit && v != 0.0 && v != 1.0)
      throw ValidationError(where() + ": outcome at row " + std::to_string(k + 1) +
                            " is not in {0,1}");
    if (family == Family::PoissonLog && (v < 0.0 || v != std::floor(v)))
      throw ValidationError(where() + ": outcome at row " + std::to_string(k + 1) +
                            " is not a nonnegative integer");
  }
}

inline Observation first_observation(const Batch& b) {
  return {b.X.row(0).transpose(), b.y[0]};
}

inline Observation last_observation(const Batch& b) {
  const Eigen::Index k = b.y.size() - 1;
  return {b.X.row(k).transpose(), b.y[k]};
}

} // namespace sqif
