#pragma once

// Batch-level pieces of the extended QIF score under the AR(1) basis
// {M1 = I, M2 = ones on the first off-diagonals}.
//
// For the cumulative response of one subject, M2 restricted to batch j is the
// n_j x n_j off-diagonal stencil M2_j, and the coupling between consecutive
// batches j and j+1 is the single entry linking the last observation of j to
// the first observation of j+1. The streaming path therefore needs
//
//   within:  u1 = G' w,        u2 = G' M2_j w,
//            s1 = G' G,        s2 = G' M2_j G,
//   cross:   u_fwd = d_L c r_F,  u_bwd = d_F c r_L,
//            s_fwd = c d_L d_F', s_bwd = s_fwd',
//
// with G = A^{-1/2} D, w = A^{-1/2} (y - mu) and c = (a_L a_F)^{-1/2}.
// M2_j is applied as the neighbour sum v[k-1] + v[k+1] and never formed.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sqif/errors.hpp"
#include "sqif/model.hpp"

namespace sqif {

struct BasisSet {
  int s_count = 2;

  explicit BasisSet(int s = 2) : s_count(s) {
    if (s != 1 && s != 2)
      throw ValidationError("basis count must be 1 or 2, got " + std::to_string(s));
  }
};

struct WithinBlocks {
  Eigen::VectorXd u1, u2;
  Eigen::MatrixXd s1, s2;
};

struct CrossBlocks {
  Eigen::VectorXd u_fwd; ///< last obs of the earlier batch against first of the later
  Eigen::VectorXd u_bwd; ///< first obs of the later batch against last of the earlier
  Eigen::MatrixXd s_fwd, s_bwd;
};

/// All eight blocks for one subject and one pair of consecutive batches.
struct BlockScores {
  WithinBlocks within;
  CrossBlocks cross;
};

namespace detail {

/// (M2 v)_k = v_{k-1} + v_{k+1} over the rows of v.
template <class Derived>
Eigen::Matrix<double, Eigen::Dynamic, Derived::ColsAtCompileTime>
offdiag_stencil(const Eigen::MatrixBase<Derived>& v) {
  const Eigen::Index n = v.rows();
  Eigen::Matrix<double, Eigen::Dynamic, Derived::ColsAtCompileTime> out(n, v.cols());
  out.setZero();
  if (n >= 2) {
    out.topRows(n - 1) += v.bottomRows(n - 1);
    out.bottomRows(n - 1) += v.topRows(n - 1);
  }
  return out;
}

} // namespace detail

/// Within-batch blocks from precomputed mean/derivative quantities.
inline WithinBlocks within_batch_blocks(const MeanDeriv& md,
                                        const Eigen::Ref<const Eigen::VectorXd>& y,
                                        BasisSet basis = BasisSet{2}) {
  const Eigen::ArrayXd inv_sqrt_a = md.a_diag.array().rsqrt();
  const Eigen::MatrixXd G = inv_sqrt_a.matrix().asDiagonal() * md.D;
  const Eigen::VectorXd w = ((y - md.mu).array() * inv_sqrt_a).matrix();
  const Eigen::Index p = md.D.cols();

  WithinBlocks out;
  out.u1.noalias() = G.transpose() * w;
  out.s1.noalias() = G.transpose() * G;
  if (basis.s_count == 2) {
    out.u2.noalias() = G.transpose() * detail::offdiag_stencil(w);
    out.s2.noalias() = G.transpose() * detail::offdiag_stencil(G);
  } else {
    out.u2 = Eigen::VectorXd::Zero(p);
    out.s2 = Eigen::MatrixXd::Zero(p, p);
  }
  return out;
}

inline WithinBlocks within_batch_blocks(const Batch& batch, const Eigen::VectorXd& beta,
                                        Family family, BasisSet basis = BasisSet{2}) {
  return within_batch_blocks(mean_deriv(batch, beta, family), batch.y, basis);
}

inline CrossBlocks cross_batch_blocks(const Observation& prev_last,
                                      const Observation& next_first,
                                      const Eigen::VectorXd& beta, Family family) {
  if (prev_last.x.size() != beta.size() || next_first.x.size() != beta.size())
    throw ValidationError("cross_batch_blocks: dimension mismatch");
  if (!prev_last.x.allFinite() || !next_first.x.allFinite() ||
      !std::isfinite(prev_last.y) || !std::isfinite(next_first.y))
    throw ValidationError("cross_batch_blocks: non-finite observation");

  const PointMoments L = point_moments(prev_last.x.dot(beta), family);
  const PointMoments F = point_moments(next_first.x.dot(beta), family);
  const Eigen::VectorXd d_L = L.slope * prev_last.x;
  const Eigen::VectorXd d_F = F.slope * next_first.x;
  const double c = 1.0 / std::sqrt(L.a * F.a);
  const double r_L = prev_last.y - L.mu;
  const double r_F = next_first.y - F.mu;

  CrossBlocks out;
  out.u_fwd = (c * r_F) * d_L;
  out.u_bwd = (c * r_L) * d_F;
  out.s_fwd = c * d_L * d_F.transpose();
  out.s_bwd = out.s_fwd.transpose();
  return out;
}

/// Stacks the identity-basis block above the off-diagonal-basis block.
inline Eigen::VectorXd stack_extended(const Eigen::VectorXd& u1, const Eigen::VectorXd& u2) {
  if (u1.size() != u2.size())
    throw ValidationError("stack_extended: block sizes differ");
  Eigen::VectorXd out(u1.size() + u2.size());
  out << u1, u2;
  return out;
}

inline Eigen::MatrixXd stack_gradient(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2) {
  if (s1.rows() != s2.rows() || s1.cols() != s2.cols())
    throw ValidationError("stack_gradient: block shapes differ");
  Eigen::MatrixXd out(s1.rows() + s2.rows(), s1.cols());
  out << s1, s2;
  return out;
}

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> split_extended(const Eigen::VectorXd& u) {
  if (u.size() % 2 != 0)
    throw ValidationError("split_extended: odd length");
  const Eigen::Index p = u.size() / 2;
  return {u.head(p), u.tail(p)};
}

/// Current-batch contribution for one subject to the stacked score and
/// gradient: stack(u1, u2 + u_fwd + w_prev * u_bwd). `prev_last` is null for
/// the first batch of a stream; `w_prev` is the decay weight on the previous
/// batch relative to this one.
struct BatchContribution {
  Eigen::VectorXd u; ///< length p * s_count
  Eigen::MatrixXd s; ///< (p * s_count) x p
};

inline BatchContribution batch_contribution(const Batch& batch, const Observation* prev_last,
                                            double w_prev, const Eigen::VectorXd& beta,
                                            Family family, BasisSet basis);

/// Scratch buffers reused across subjects by add_batch_contribution.
struct BlockWorkspace {
  std::vector<double> g; ///< rows of A^{-1/2} D, row-major n x p
  std::vector<double> w; ///< A^{-1/2} (y - mu)
  std::vector<double> eta;
};

namespace detail {

// P > 0 fixes the coefficient dimension at compile time; P == 0 reads it from
// beta. Only the upper triangles of the symmetric within-batch gradient blocks
// are accumulated and then mirrored.
template <int P>
void batch_kernel(const Batch& batch, const Observation* prev_last, double w_prev,
                  const Eigen::VectorXd& beta, Family family, BasisSet basis,
                  BlockWorkspace& ws, Eigen::Ref<Eigen::VectorXd> u_out,
                  Eigen::Ref<Eigen::MatrixXd> s_out) {
  const Eigen::Index n = batch.size();
  const Eigen::Index p = P > 0 ? P : beta.size();
  const auto un = static_cast<std::size_t>(n), up = static_cast<std::size_t>(p);
  ws.g.resize(un * up);
  ws.w.resize(un);
  ws.eta.resize(un);
  const double* X = batch.X.data(); // column-major
  for (Eigen::Index k = 0; k < n; ++k) {
    double eta = 0.0;
    for (Eigen::Index c = 0; c < p; ++c)
      eta += X[k + c * n] * beta[c];
    if (!std::isfinite(eta))
      throw NumericalError("non-finite linear predictor at row " + std::to_string(k + 1) +
                           " of subject '" + batch.subject_id + "'");
    const PointMoments pm = point_moments(eta, family);
    const double isa = 1.0 / std::sqrt(pm.a);
    const double gs = pm.slope * isa;
    ws.eta[static_cast<std::size_t>(k)] = eta;
    ws.w[static_cast<std::size_t>(k)] = (batch.y[k] - pm.mu) * isa;
    double* gk = ws.g.data() + static_cast<std::size_t>(k) * up;
    for (Eigen::Index c = 0; c < p; ++c)
      gk[c] = gs * X[k + c * n];
  }

  u_out.setZero();
  s_out.setZero();
  const bool two = basis.s_count == 2;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double* ga = ws.g.data() + static_cast<std::size_t>(k) * up;
    const double wa = ws.w[static_cast<std::size_t>(k)];
    for (Eigen::Index c = 0; c < p; ++c) {
      u_out[c] += ga[c] * wa;
      for (Eigen::Index e = c; e < p; ++e)
        s_out(c, e) += ga[c] * ga[e];
    }
    // Off-diagonal stencil: the pair (k, k+1) contributes symmetrically.
    if (two && k + 1 < n) {
      const double* gb = ga + up;
      const double wb = ws.w[static_cast<std::size_t>(k + 1)];
      for (Eigen::Index c = 0; c < p; ++c) {
        u_out[p + c] += ga[c] * wb + gb[c] * wa;
        for (Eigen::Index e = c; e < p; ++e)
          s_out(p + c, e) += ga[c] * gb[e] + gb[c] * ga[e];
      }
    }
  }
  for (Eigen::Index c = 0; c < p; ++c)
    for (Eigen::Index e = 0; e < c; ++e) {
      s_out(c, e) = s_out(e, c);
      if (two)
        s_out(p + c, e) = s_out(p + e, c);
    }
  if (!two || !prev_last)
    return;

  const PointMoments L = point_moments(prev_last->x.dot(beta), family);
  const PointMoments F = point_moments(ws.eta[0], family);
  const double c_LF = 1.0 / std::sqrt(L.a * F.a);
  const double r_L = prev_last->y - L.mu;
  const double r_F = batch.y[0] - F.mu;
  for (Eigen::Index c = 0; c < p; ++c) {
    const double dLc = L.slope * prev_last->x[c];
    const double dFc = F.slope * X[c * n];
    u_out[p + c] += c_LF * (r_F * dLc + w_prev * r_L * dFc);
    for (Eigen::Index e = 0; e < p; ++e) {
      const double dLe = L.slope * prev_last->x[e];
      const double dFe = F.slope * X[e * n];
      s_out(p + c, e) += c_LF * (dLc * dFe + w_prev * dFc * dLe);
    }
  }
}

} // namespace detail

/// Allocation-free equivalent of batch_contribution: writes the current-batch
/// stacked score into `u_out` and gradient into `s_out` (overwriting them).
inline void add_batch_contribution(const Batch& batch, const Observation* prev_last,
                                   double w_prev, const Eigen::VectorXd& beta, Family family,
                                   BasisSet basis, BlockWorkspace& ws,
                                   Eigen::Ref<Eigen::VectorXd> u_out,
                                   Eigen::Ref<Eigen::MatrixXd> s_out) {
  switch (beta.size()) {
  case 1: return detail::batch_kernel<1>(batch, prev_last, w_prev, beta, family, basis, ws, u_out, s_out);
  case 2: return detail::batch_kernel<2>(batch, prev_last, w_prev, beta, family, basis, ws, u_out, s_out);
  case 3: return detail::batch_kernel<3>(batch, prev_last, w_prev, beta, family, basis, ws, u_out, s_out);
  case 4: return detail::batch_kernel<4>(batch, prev_last, w_prev, beta, family, basis, ws, u_out, s_out);
  default: return detail::batch_kernel<0>(batch, prev_last, w_prev, beta, family, basis, ws, u_out, s_out);
  }
}

inline BatchContribution batch_contribution(const Batch& batch, const Observation* prev_last,
                                            double w_prev, const Eigen::VectorXd& beta,
                                            Family family, BasisSet basis) {
  const WithinBlocks wb = within_batch_blocks(batch, beta, family, basis);
  BatchContribution c;
  if (basis.s_count == 1) {
    c.u = wb.u1;
    c.s = wb.s1;
    return c;
  }
  Eigen::VectorXd u2 = wb.u2;
  Eigen::MatrixXd s2 = wb.s2;
  if (prev_last) {
    const CrossBlocks cb = cross_batch_blocks(*prev_last, first_observation(batch), beta, family);
    u2 += cb.u_fwd + w_prev * cb.u_bwd;
    s2 += cb.s_fwd + w_prev * cb.s_bwd;
  }
  c.u = stack_extended(wb.u1, u2);
  c.s = stack_gradient(wb.s1, s2);
  return c;
}

} // namespace sqif
