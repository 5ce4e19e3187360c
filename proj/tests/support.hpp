#pragma once

#include <random>
#include <string>

#include <Eigen/Dense>

#include "sqif/model.hpp"
#include "sqif/offline.hpp"

namespace sqif::test {

using Rng = std::mt19937_64;

inline double draw_y(Rng& rng, double eta, Family f) {
  const double mu = link_inverse(eta, f);
  switch (f) {
  case Family::GaussianIdentity: return mu + std::normal_distribution<double>(0.0, 1.5)(rng);
  case Family::BernoulliLogit: return std::bernoulli_distribution(mu)(rng) ? 1.0 : 0.0;
  case Family::PoissonLog: return static_cast<double>(std::poisson_distribution<int>(mu)(rng));
  }
  return 0.0;
}

inline Batch random_batch(Rng& rng, const std::string& id, int index, double t, Eigen::Index n,
                          const Eigen::VectorXd& beta, Family f) {
  std::normal_distribution<double> z(0.0, 1.0);
  Batch b;
  b.subject_id = id;
  b.batch_index = index;
  b.t = t;
  b.X.resize(n, beta.size());
  b.y.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    b.X(k, 0) = 1.0;
    for (Eigen::Index c = 1; c < beta.size(); ++c)
      b.X(k, c) = 0.7 * z(rng);
    b.y[k] = draw_y(rng, b.X.row(k).dot(beta), f);
  }
  return b;
}

/// Random cumulative data; batch sizes vary in [n_min, n_max] per subject and
/// batch, times are increasing with random gaps.
inline CumulativeData random_stream(Rng& rng, Family f, int m, int b, int n_min, int n_max,
                                    const Eigen::VectorXd& beta, bool unit_times = false) {
  CumulativeData data;
  std::uniform_int_distribution<int> nd(n_min, n_max);
  std::uniform_real_distribution<double> gap(0.5, 2.0);
  double t = 1.0;
  for (int j = 0; j < b; ++j) {
    if (j > 0)
      t += unit_times ? 1.0 : gap(rng);
    data.times.push_back(t);
    SubjectBatches round;
    for (int i = 0; i < m; ++i) {
      const std::string id = "s" + std::to_string(100 + i);
      round.emplace(id, random_batch(rng, id, j + 1, t, nd(rng), beta, f));
    }
    data.rounds.push_back(std::move(round));
  }
  return data;
}

inline double rel_err(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double scale = want.norm();
  return scale > 0.0 ? (got - want).norm() / scale : (got - want).norm();
}

} // namespace sqif::test
