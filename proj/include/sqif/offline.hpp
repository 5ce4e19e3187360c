#pragma once

// Dense reference implementation of the time-weighted QIF on cumulative data.
//
// For each subject the whole response history is concatenated and the
// N_b x N_b matrices W_b = diag(q^{t_b - t_j} I_{n_j}), A^{-1/2}, M1 = I and
// M2 are formed explicitly:
//
//   U*_s = D' A^{-1/2} M_s A^{-1/2} W_b (y - mu),
//   S*_s = D' A^{-1/2} M_s A^{-1/2} W_b D.
//
// This path shares nothing with score_blocks and serves as the oracle for
// the batch decomposition and for initialization of a stream.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sqif/errors.hpp"
#include "sqif/linalg.hpp"
#include "sqif/model.hpp"
#include "sqif/score_blocks.hpp"
#include "sqif/solver.hpp"

namespace sqif {

inline constexpr Eigen::Index kDenseGuard = 5000;

/// All batches of a stream up to some batch b.
struct CumulativeData {
  std::vector<double> times;          ///< t_1 < ... < t_b
  std::vector<SubjectBatches> rounds; ///< rounds[j] holds every subject's batch j

  std::size_t batch_count() const { return rounds.size(); }

  /// Prefix containing the first `b` batches.
  CumulativeData prefix(std::size_t b) const {
    CumulativeData out;
    out.times.assign(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(b));
    out.rounds.assign(rounds.begin(), rounds.begin() + static_cast<std::ptrdiff_t>(b));
    return out;
  }

  void validate(const ModelSpec& model) const {
    if (rounds.empty())
      throw ValidationError("cumulative data has no batches");
    if (times.size() != rounds.size())
      throw ValidationError("cumulative data: one time per batch required");
    for (std::size_t j = 1; j < times.size(); ++j)
      if (!(times[j] > times[j - 1]))
        throw ValidationError("cumulative data: batch times must be strictly increasing");
    const SubjectBatches& first = rounds.front();
    if (first.empty())
      throw ValidationError("cumulative data: no subjects");
    for (const SubjectBatches& round : rounds) {
      if (round.size() != first.size())
        throw ValidationError("cumulative data: subject set changes across batches");
      auto it = first.begin();
      for (const auto& [id, batch] : round) {
        if (id != it->first)
          throw ValidationError("cumulative data: subject '" + id +
                                "' is not present in every batch");
        ++it;
        if (batch.X.cols() != model.p)
          throw ValidationError("cumulative data: subject '" + id + "' has " +
                                std::to_string(batch.X.cols()) + " covariates, expected " +
                                std::to_string(model.p));
        validate_batch(batch, model.family);
      }
    }
  }
};

/// Dense extended score and gradient for one subject's concatenated history.
struct DenseSubjectTerms {
  Eigen::VectorXd u; ///< length p*S
  Eigen::MatrixXd s; ///< (p*S) x p
};

inline DenseSubjectTerms dense_subject_terms(const CumulativeData& data, const std::string& id,
                                             const Eigen::VectorXd& beta, double q,
                                             Family family, BasisSet basis) {
  const std::size_t b = data.batch_count();
  const double t_b = data.times.back();
  Eigen::Index n_total = 0;
  for (const SubjectBatches& round : data.rounds)
    n_total += round.at(id).size();
  if (n_total > kDenseGuard)
    throw ValidationError("dense oracle: " + std::to_string(n_total) +
                          " observations per subject exceeds the guard of " +
                          std::to_string(kDenseGuard));
  const Eigen::Index p = beta.size();

  Eigen::MatrixXd X(n_total, p);
  Eigen::VectorXd y(n_total);
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n_total, n_total);
  Eigen::Index row = 0;
  for (std::size_t j = 0; j < b; ++j) {
    const Batch& batch = data.rounds[j].at(id);
    const double wj = std::pow(q, t_b - data.times[j]);
    X.middleRows(row, batch.size()) = batch.X;
    y.segment(row, batch.size()) = batch.y;
    for (Eigen::Index k = 0; k < batch.size(); ++k)
      W(row + k, row + k) = wj;
    row += batch.size();
  }

  const MeanDeriv md = mean_deriv(X, beta, family);
  Eigen::MatrixXd A_inv_sqrt = Eigen::MatrixXd::Zero(n_total, n_total);
  for (Eigen::Index k = 0; k < n_total; ++k)
    A_inv_sqrt(k, k) = 1.0 / std::sqrt(md.a_diag[k]);

  std::vector<Eigen::MatrixXd> basis_mats;
  basis_mats.push_back(Eigen::MatrixXd::Identity(n_total, n_total));
  if (basis.s_count == 2) {
    Eigen::MatrixXd M2 = Eigen::MatrixXd::Zero(n_total, n_total);
    for (Eigen::Index k = 0; k + 1 < n_total; ++k) {
      M2(k, k + 1) = 1.0;
      M2(k + 1, k) = 1.0;
    }
    basis_mats.push_back(std::move(M2));
  }

  // Right factors A^{-1/2} W r and A^{-1/2} W D.
  const Eigen::VectorXd wr = A_inv_sqrt * (W * (y - md.mu));
  const Eigen::MatrixXd wd = A_inv_sqrt * (W * md.D);
  const Eigen::MatrixXd left = md.D.transpose() * A_inv_sqrt; // p x N

  DenseSubjectTerms out;
  out.u.resize(p * basis.s_count);
  out.s.resize(p * basis.s_count, p);
  for (int s = 0; s < basis.s_count; ++s) {
    out.u.segment(s * p, p) = left * (basis_mats[s] * wr);
    out.s.middleRows(s * p, p) = left * (basis_mats[s] * wd);
  }
  return out;
}

/// Sum over subjects of the dense extended score at beta.
inline Eigen::VectorXd dense_extended_score(const CumulativeData& data,
                                            const Eigen::VectorXd& beta, double q,
                                            Family family, BasisSet basis) {
  Eigen::VectorXd total = Eigen::VectorXd::Zero(beta.size() * basis.s_count);
  for (const auto& [id, batch] : data.rounds.front())
    total += dense_subject_terms(data, id, beta, q, family, basis).u;
  return total;
}

inline QifSystem dense_system(const CumulativeData& data, const Eigen::VectorXd& beta,
                              double q, Family family, BasisSet basis) {
  const Eigen::Index d = beta.size() * basis.s_count;
  QifSystem sys{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, beta.size()),
                Eigen::MatrixXd::Zero(d, d)};
  for (const auto& [id, batch] : data.rounds.front()) {
    const DenseSubjectTerms t = dense_subject_terms(data, id, beta, q, family, basis);
    sys.u += t.u;
    sys.s += t.s;
    sys.v.noalias() += t.u * t.u.transpose();
  }
  return sys;
}

struct OfflineFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov; ///< {S*' V*^{-1} S*}^{-1}
  QifSystem system;
  int iterations = 0;
  double residual = 0.0;
  bool ridged = false;
};

inline Eigen::MatrixXd godambe_inverse(const QifSystem& sys, double ridge_eps,
                                       bool* ridged = nullptr) {
  const SpdFactor vf = factor_spd(sys.v, ridge_eps, "variability matrix");
  Eigen::MatrixXd info = sys.s.transpose() * vf.solve(sys.s);
  info = 0.5 * (info + info.transpose());
  bool inner_ridged = false;
  Eigen::MatrixXd cov = spd_inverse(info, ridge_eps, "Godambe information", &inner_ridged);
  if (ridged)
    *ridged = vf.ridged || inner_ridged;
  return cov;
}

/// Minimizes the cumulative time-weighted QIF on dense matrices.
inline OfflineFit offline_fit(const CumulativeData& data, double q, const ModelSpec& model,
                              const SolverConfig& config = {},
                              const Eigen::VectorXd* start = nullptr) {
  if (!(q > 0.0 && q < 1.0))
    throw ValidationError("decay q must lie in (0,1)");
  data.validate(model);
  const BasisSet basis(model.s_count);
  auto eval = [&](const Eigen::VectorXd& beta) {
    return dense_system(data, beta, q, model.family, basis);
  };
  Eigen::VectorXd beta0 = start ? *start : Eigen::VectorXd::Zero(model.p);
  SolveResult r = solve_estimating_equation(eval, std::move(beta0), config, "offline QIF fit");
  OfflineFit fit;
  fit.beta = std::move(r.beta);
  fit.system = std::move(r.system);
  fit.iterations = r.iterations;
  fit.residual = r.residual;
  bool cov_ridged = false;
  fit.cov = godambe_inverse(fit.system, config.ridge_eps, &cov_ridged);
  fit.ridged = r.ridged || cov_ridged;
  return fit;
}

} // namespace sqif
