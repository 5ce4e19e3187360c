#include <gtest/gtest.h>

#include <cmath>

#include "sqif/offline.hpp"
#include "sqif/score_blocks.hpp"
#include "support.hpp"

using namespace sqif;
using test::rel_err;

namespace {

const Family kFamilies[] = {Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog};

Eigen::MatrixXd dense_m2(Eigen::Index n) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k + 1 < n; ++k)
    m(k, k + 1) = m(k + 1, k) = 1.0;
  return m;
}

Observation obs(std::initializer_list<double> x, double y) {
  Observation o;
  o.x = Eigen::Map<const Eigen::VectorXd>(x.begin(), static_cast<Eigen::Index>(x.size()));
  o.y = y;
  return o;
}

} // namespace

TEST(BasisSet, OnlyOneOrTwo) {
  EXPECT_NO_THROW(BasisSet{1});
  EXPECT_NO_THROW(BasisSet{2});
  EXPECT_THROW(BasisSet{3}, ValidationError);
  EXPECT_THROW(BasisSet{0}, ValidationError);
}

TEST(WithinBlocks, SingleObservationHasNoOffDiagonal) {
  test::Rng rng(1);
  Eigen::VectorXd beta = Eigen::Vector3d(0.2, -0.4, 0.1);
  for (Family f : kFamilies) {
    const Batch b = test::random_batch(rng, "a", 1, 1.0, 1, beta, f);
    const WithinBlocks w = within_batch_blocks(b, beta, f);
    EXPECT_TRUE(w.u2.isZero(0.0));
    EXPECT_TRUE(w.s2.isZero(0.0));
    EXPECT_FALSE(w.s1.isZero(0.0));
  }
}

TEST(WithinBlocks, LeastSquaresRootZeroesU1) {
  test::Rng rng(2);
  const Batch b = test::random_batch(rng, "a", 1, 1.0, 12, Eigen::Vector3d(1, 2, 3),
                                        Family::GaussianIdentity);
  const Eigen::VectorXd ls = b.X.colPivHouseholderQr().solve(b.y);
  const WithinBlocks w = within_batch_blocks(b, ls, Family::GaussianIdentity);
  EXPECT_LT(w.u1.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(WithinBlocks, StencilMatchesDenseM2) {
  test::Rng rng(3);
  for (Family f : kFamilies) {
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::VectorXd beta = Eigen::Vector3d(0.3, -0.5, 0.4);
      const Batch b = test::random_batch(rng, "a", 1, 1.0, 5, beta, f);
      const MeanDeriv md = mean_deriv(b, beta, f);
      const Eigen::MatrixXd Ais = md.a_diag.array().rsqrt().matrix().asDiagonal();
      const Eigen::MatrixXd M2 = dense_m2(5);
      const Eigen::VectorXd u2 = md.D.transpose() * Ais * M2 * Ais * (b.y - md.mu);
      const Eigen::MatrixXd s2 = md.D.transpose() * Ais * M2 * Ais * md.D;
      const Eigen::VectorXd u1 = md.D.transpose() * Ais * Ais * (b.y - md.mu);
      const WithinBlocks w = within_batch_blocks(b, beta, f);
      EXPECT_LT(rel_err(w.u2, u2), 1e-12);
      EXPECT_LT(rel_err(w.s2, s2), 1e-12);
      EXPECT_LT(rel_err(w.u1, u1), 1e-12);
    }
  }
}

TEST(WithinBlocks, IdentityOnlyBasisZeroesSecondBlock) {
  test::Rng rng(4);
  Eigen::VectorXd beta = Eigen::Vector2d(0.3, 0.1);
  const Batch b = test::random_batch(rng, "a", 1, 1.0, 6, beta, Family::PoissonLog);
  const WithinBlocks w = within_batch_blocks(b, beta, Family::PoissonLog, BasisSet{1});
  EXPECT_TRUE(w.u2.isZero(0.0));
  EXPECT_TRUE(w.s2.isZero(0.0));
}

TEST(CrossBlocks, ZeroForwardResidual) {
  const Eigen::VectorXd beta = Eigen::Vector2d(0.4, -0.3);
  for (Family f : kFamilies) {
    Observation first = obs({1.0, 0.7}, 0.0);
    first.y = link_inverse(first.x.dot(beta), f);
    const CrossBlocks c = cross_batch_blocks(obs({1.0, -0.2}, 1.0), first, beta, f);
    EXPECT_LT(c.u_fwd.cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(CrossBlocks, UnitGaussianExample) {
  const Eigen::VectorXd beta = Eigen::Vector3d::Zero();
  const CrossBlocks c =
      cross_batch_blocks(obs({1, 0, 0}, 0.0), obs({1, 0, 0}, 2.0), beta, Family::GaussianIdentity);
  EXPECT_TRUE(c.u_fwd.isApprox(Eigen::Vector3d(2, 0, 0)));
  EXPECT_TRUE(c.u_bwd.isZero(0.0));
}

TEST(CrossBlocks, BackwardGradientIsTranspose) {
  test::Rng rng(6);
  std::normal_distribution<double> z;
  for (Family f : kFamilies) {
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::VectorXd beta(3), xl(3), xf(3);
      for (int k = 0; k < 3; ++k) {
        beta[k] = 0.3 * z(rng);
        xl[k] = z(rng);
        xf[k] = z(rng);
      }
      const CrossBlocks c = cross_batch_blocks({xl, 1.0}, {xf, 0.0}, beta, f);
      EXPECT_TRUE(c.s_bwd == c.s_fwd.transpose());
    }
  }
}

TEST(CrossBlocks, RejectsNonFinite) {
  const Eigen::VectorXd beta = Eigen::Vector2d::Zero();
  EXPECT_THROW(cross_batch_blocks(obs({1.0, NAN}, 0.0), obs({1, 1}, 0.0), beta,
                                  Family::GaussianIdentity),
               ValidationError);
  EXPECT_THROW(cross_batch_blocks(obs({1.0, 2.0, 3.0}, 0.0), obs({1, 1}, 0.0), beta,
                                  Family::GaussianIdentity),
               ValidationError);
}

TEST(CrossBlocks, TwoBatchesOfTwoMatchDenseAssembly) {
  test::Rng rng(7);
  Eigen::MatrixXd M2(4, 4);
  M2 << 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0;
  for (Family f : kFamilies) {
    const Eigen::VectorXd beta = Eigen::Vector3d(0.2, 0.5, -0.3);
    const Batch b1 = test::random_batch(rng, "a", 1, 1.0, 2, beta, f);
    const Batch b2 = test::random_batch(rng, "a", 2, 2.0, 2, beta, f);
    Eigen::MatrixXd X(4, 3);
    X << b1.X, b2.X;
    Eigen::VectorXd y(4);
    y << b1.y, b2.y;
    const MeanDeriv md = mean_deriv(X, beta, f);
    const Eigen::MatrixXd Ais = md.a_diag.array().rsqrt().matrix().asDiagonal();
    const Eigen::VectorXd dense_u = md.D.transpose() * Ais * M2 * Ais * (y - md.mu);
    const Eigen::MatrixXd dense_s = md.D.transpose() * Ais * M2 * Ais * md.D;

    const WithinBlocks w1 = within_batch_blocks(b1, beta, f);
    const WithinBlocks w2 = within_batch_blocks(b2, beta, f);
    const CrossBlocks c = cross_batch_blocks(last_observation(b1), first_observation(b2), beta, f);
    EXPECT_LT(rel_err(w1.u2 + w2.u2 + c.u_fwd + c.u_bwd, dense_u), 1e-12);
    EXPECT_LT(rel_err(w1.s2 + w2.s2 + c.s_fwd + c.s_bwd, dense_s), 1e-12);
  }
}

TEST(Stacking, OrderZerosAndRoundTrip) {
  const Eigen::VectorXd a = Eigen::Vector2d(1, 2), b = Eigen::Vector2d(3, 4);
  EXPECT_EQ(stack_extended(a, b), Eigen::Vector4d(1, 2, 3, 4));
  EXPECT_TRUE(stack_extended(Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()).isZero(0.0));
  const auto [u1, u2] = split_extended(stack_extended(a, b));
  EXPECT_EQ(u1, a);
  EXPECT_EQ(u2, b);
  const Eigen::MatrixXd s1 = Eigen::Matrix2d::Identity(), s2 = 2 * Eigen::Matrix2d::Ones();
  const Eigen::MatrixXd s = stack_gradient(s1, s2);
  EXPECT_EQ(s.topRows(2), s1);
  EXPECT_EQ(s.bottomRows(2), s2);
  EXPECT_THROW(stack_extended(a, Eigen::Vector3d::Zero()), ValidationError);
  EXPECT_THROW(stack_gradient(s1, Eigen::Matrix3d::Zero()), ValidationError);
  EXPECT_THROW(split_extended(Eigen::Vector3d::Zero()), ValidationError);
}

TEST(BatchContribution, KernelMatchesComposedBlocks) {
  test::Rng rng(8);
  std::uniform_int_distribution<int> nd(1, 7);
  for (Family f : kFamilies) {
    for (int p = 1; p <= 5; ++p) {
      for (int s = 1; s <= 2; ++s) {
        Eigen::VectorXd beta = Eigen::VectorXd::LinSpaced(p, 0.3, -0.2);
        const Batch prev = test::random_batch(rng, "a", 1, 1.0, nd(rng), beta, f);
        const Batch cur = test::random_batch(rng, "a", 2, 2.0, nd(rng), beta, f);
        const Observation last = last_observation(prev);
        BlockWorkspace ws;
        Eigen::VectorXd u(p * s);
        Eigen::MatrixXd g(p * s, p);
        for (const Observation* pl : {static_cast<const Observation*>(nullptr), &last}) {
          const BatchContribution ref = batch_contribution(cur, pl, 0.37, beta, f, BasisSet{s});
          add_batch_contribution(cur, pl, 0.37, beta, f, BasisSet{s}, ws, u, g);
          EXPECT_LT(rel_err(u, ref.u), 1e-13) << family_name(f) << " p=" << p << " s=" << s;
          EXPECT_LT(rel_err(g, ref.s), 1e-13) << family_name(f) << " p=" << p << " s=" << s;
        }
      }
    }
  }
}

// At fixed beta the recursion U_b = w U_{b-1} + contribution_b reproduces the
// dense time-weighted score.
TEST(BatchContribution, RecursionMatchesDenseScore) {
  test::Rng rng(9);
  for (Family f : kFamilies) {
    for (double q : {0.1, 0.5, 0.9}) {
      const Eigen::VectorXd beta = Eigen::Vector3d(0.1, 0.4, -0.2);
      const CumulativeData data = test::random_stream(rng, f, 4, 5, 1, 5, beta);
      Eigen::VectorXd total = Eigen::VectorXd::Zero(6);
      for (const auto& [id, first] : data.rounds.front()) {
        Eigen::VectorXd u = batch_contribution(first, nullptr, 0.0, beta, f, BasisSet{2}).u;
        for (std::size_t j = 1; j < data.batch_count(); ++j) {
          const double w = std::pow(q, data.times[j] - data.times[j - 1]);
          const Observation last = last_observation(data.rounds[j - 1].at(id));
          u = w * u + batch_contribution(data.rounds[j].at(id), &last, w, beta, f, BasisSet{2}).u;
        }
        total += u;
      }
      const Eigen::VectorXd dense = dense_extended_score(data, beta, q, f, BasisSet{2});
      EXPECT_LT(rel_err(total, dense), 1e-10) << family_name(f) << " q=" << q;
    }
  }
}

TEST(BatchContribution, GaussianGradientIsExactNegativeJacobian) {
  test::Rng rng(10);
  const Eigen::VectorXd beta = Eigen::Vector3d(0.1, -0.4, 0.8);
  const Batch prev = test::random_batch(rng, "a", 1, 1.0, 4, beta, Family::GaussianIdentity);
  const Batch cur = test::random_batch(rng, "a", 2, 2.0, 5, beta, Family::GaussianIdentity);
  const Observation last = last_observation(prev);
  const auto u_at = [&](const Eigen::VectorXd& b) {
    return batch_contribution(cur, &last, 0.6, b, Family::GaussianIdentity, BasisSet{2}).u;
  };
  const Eigen::MatrixXd s =
      batch_contribution(cur, &last, 0.6, beta, Family::GaussianIdentity, BasisSet{2}).s;
  Eigen::MatrixXd fd(6, 3);
  for (int c = 0; c < 3; ++c) {
    Eigen::VectorXd bp = beta, bm = beta;
    bp[c] += 1e-5;
    bm[c] -= 1e-5;
    fd.col(c) = -(u_at(bp) - u_at(bm)) / 2e-5;
  }
  EXPECT_LT(rel_err(s, fd), 1e-8);
}
