#pragma once

// Gauss-Newton iteration for over-identified estimating equations of the
// form S(beta)' V(beta)^{-1} U(beta) = 0, with U, S, V re-evaluated at every
// iterate:
//
//   beta <- beta + {S' V^{-1} S}^{-1} S' V^{-1} U.

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sqif/errors.hpp"
#include "sqif/linalg.hpp"

namespace sqif {

struct SolverConfig {
  double tol = 1e-8;       ///< max-abs bound on both the step and S'V^{-1}U
  int max_iter = 100;
  double ridge_eps = 1e-8; ///< relative ridge for singular V or information
  double damping = 1.0;    ///< step multiplier in (0, 1]
  bool check_h_pd = false; ///< warn when the stability matrix H_b is not PD

  void validate() const {
    if (!(tol > 0.0))
      throw ValidationError("solver tol must be positive");
    if (max_iter < 1)
      throw ValidationError("solver max_iter must be >= 1");
    if (!(ridge_eps > 0.0))
      throw ValidationError("solver ridge_eps must be positive");
    if (!(damping > 0.0 && damping <= 1.0))
      throw ValidationError("solver damping must lie in (0, 1]");
  }
  bool operator==(const SolverConfig&) const = default;
};

/// Aggregated score U, negative gradient S and variability V at one beta.
struct QifSystem {
  Eigen::VectorXd u;
  Eigen::MatrixXd s;
  Eigen::MatrixXd v;

  bool all_finite() const { return u.allFinite() && s.allFinite() && v.allFinite(); }
};

/// Pieces of one Gauss-Newton step.
struct NewtonStep {
  Eigen::VectorXd residual; ///< S' V^{-1} U
  Eigen::VectorXd step;     ///< {S' V^{-1} S}^{-1} S' V^{-1} U
  bool ridged = false;
};

inline NewtonStep newton_step(const QifSystem& sys, double ridge_eps) {
  NewtonStep out;
  const SpdFactor vf = factor_spd(sys.v, ridge_eps, "variability matrix");
  const Eigen::MatrixXd vinv_s = vf.solve(sys.s);
  out.residual.noalias() = vinv_s.transpose() * sys.u;
  Eigen::MatrixXd info = sys.s.transpose() * vinv_s;
  info = 0.5 * (info + info.transpose());
  const SpdFactor inf = factor_spd(info, ridge_eps, "information matrix");
  out.step = inf.solve(out.residual);
  out.ridged = vf.ridged || inf.ridged;
  return out;
}

struct SolveResult {
  Eigen::VectorXd beta;
  QifSystem system;      ///< evaluated at beta
  int iterations = 0;    ///< number of steps taken
  double residual = 0.0; ///< max-abs of S'V^{-1}U at beta
  bool ridged = false;   ///< any factorization needed the ridge
  std::vector<double> trace;
};

/// Solves S'V^{-1}U = 0 starting from `beta0`. `eval(beta)` returns the
/// QifSystem at beta and may throw NumericalError for infeasible points,
/// which are treated like non-finite blocks: the step is halved.
template <class Eval>
SolveResult solve_estimating_equation(Eval&& eval, Eigen::VectorXd beta0,
                                      const SolverConfig& config, const std::string& what) {
  config.validate();
  SolveResult r;
  r.beta = std::move(beta0);
  r.system = eval(r.beta);
  if (!r.system.all_finite())
    throw NumericalError(what + ": non-finite blocks at the starting point");

  Eigen::VectorXd best = r.beta;
  double best_res = std::numeric_limits<double>::infinity();

  for (int it = 0; it <= config.max_iter; ++it) {
    const NewtonStep ns = newton_step(r.system, config.ridge_eps);
    r.ridged = r.ridged || ns.ridged;
    r.residual = max_abs(ns.residual);
    r.trace.push_back(r.residual);
    if (r.residual < best_res) {
      best_res = r.residual;
      best = r.beta;
    }
    if (!std::isfinite(r.residual) || !ns.step.allFinite())
      break;
    if (r.residual < config.tol && max_abs(ns.step) < config.tol) {
      r.iterations = it;
      return r;
    }
    if (it == config.max_iter)
      break;

    double scale = config.damping;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving, scale *= 0.5) {
      Eigen::VectorXd trial = r.beta + scale * ns.step;
      try {
        QifSystem sys = eval(trial);
        if (sys.all_finite()) {
          r.beta = std::move(trial);
          r.system = std::move(sys);
          accepted = true;
          break;
        }
      } catch (const NumericalError&) {
      }
    }
    if (!accepted)
      break;
  }

  std::ostringstream msg;
  msg << what << ": Newton iteration did not converge within " << config.max_iter
      << " iterations (best residual " << best_res << ")";
  throw NumericalError(msg.str(), best, best_res, r.trace);
}

} // namespace sqif
