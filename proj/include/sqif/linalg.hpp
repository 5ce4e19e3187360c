#pragma once

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "sqif/errors.hpp"

namespace sqif {

/// Cholesky factor of a symmetric positive (semi)definite matrix. When the
/// plain factorization fails or is singular to working precision the matrix
/// is replaced by M + eps * mean(diag(M)) * I and `ridged` is set.
struct SpdFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  bool ridged = false;

  template <class Rhs>
  auto solve(const Eigen::MatrixBase<Rhs>& rhs) const {
    return llt.solve(rhs);
  }
};

inline bool llt_usable(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return llt.info() == Eigen::Success &&
         llt.rcond() > std::numeric_limits<double>::epsilon();
}

inline SpdFactor factor_spd(const Eigen::MatrixXd& m, double ridge_eps,
                            const char* what) {
  SpdFactor f;
  f.llt.compute(m);
  if (llt_usable(f.llt))
    return f;
  double scale = m.diagonal().mean();
  if (!(scale > 0.0) || !std::isfinite(scale))
    scale = 1.0;
  Eigen::MatrixXd ridged = m;
  ridged.diagonal().array() += ridge_eps * scale;
  f.llt.compute(ridged);
  f.ridged = true;
  if (f.llt.info() != Eigen::Success)
    throw NumericalError(std::string(what) + ": factorization failed after ridge");
  return f;
}

/// Inverse of an SPD matrix, symmetrized.
inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m, double ridge_eps,
                                   const char* what, bool* ridged = nullptr) {
  const SpdFactor f = factor_spd(m, ridge_eps, what);
  if (ridged)
    *ridged = f.ridged;
  Eigen::MatrixXd inv = f.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  return 0.5 * (inv + inv.transpose());
}

inline double max_abs(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

} // namespace sqif
