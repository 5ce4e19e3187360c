#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "sqif/model.hpp"
#include "support.hpp"

using namespace sqif;

TEST(LinkInverse, CanonicalValues) {
  EXPECT_DOUBLE_EQ(link_inverse(0.0, Family::BernoulliLogit), 0.5);
  EXPECT_DOUBLE_EQ(link_inverse(1.7, Family::GaussianIdentity), 1.7);
  EXPECT_DOUBLE_EQ(link_inverse(0.0, Family::PoissonLog), 1.0);
}

TEST(LinkInverse, SaturatesWithoutNan) {
  for (double eta : {-1e300, -800.0, -40.0, 40.0, 800.0, 1e300}) {
    const double b = link_inverse(eta, Family::BernoulliLogit);
    EXPECT_TRUE(std::isfinite(b));
    EXPECT_GT(b, 0.0);
    EXPECT_LT(b, 1.0);
    EXPECT_TRUE(std::isfinite(link_inverse(eta, Family::PoissonLog)));
  }
  EXPECT_NEAR(link_inverse(-3.0, Family::BernoulliLogit) + link_inverse(3.0, Family::BernoulliLogit),
              1.0, 1e-15);
}

TEST(VarianceFn, CanonicalValues) {
  EXPECT_DOUBLE_EQ(variance_fn(0.5, Family::BernoulliLogit), 0.25);
  EXPECT_DOUBLE_EQ(variance_fn(3.0, Family::PoissonLog), 3.0);
  EXPECT_DOUBLE_EQ(variance_fn(-2.1, Family::GaussianIdentity), 1.0);
}

TEST(VarianceFn, BernoulliDomain) {
  EXPECT_THROW(variance_fn(0.0, Family::BernoulliLogit), ValidationError);
  EXPECT_THROW(variance_fn(1.2, Family::BernoulliLogit), ValidationError);
  EXPECT_THROW(variance_fn(-1.0, Family::PoissonLog), ValidationError);
}

TEST(ParseFamily, NamesAndAliases) {
  EXPECT_EQ(parse_family("gaussian"), Family::GaussianIdentity);
  EXPECT_EQ(parse_family("logistic"), Family::BernoulliLogit);
  EXPECT_EQ(parse_family("poisson"), Family::PoissonLog);
  for (Family f : {Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog})
    EXPECT_EQ(parse_family(family_name(f)), f);
  EXPECT_THROW(parse_family("gamma"), ValidationError);
}

TEST(MeanDeriv, IdentityGivesDEqualX) {
  test::Rng rng(3);
  Eigen::VectorXd beta(3);
  beta << 0.3, -1.0, 2.0;
  const Batch b = test::random_batch(rng, "a", 1, 1.0, 7, beta, Family::GaussianIdentity);
  const MeanDeriv md = mean_deriv(b, beta, Family::GaussianIdentity);
  EXPECT_EQ(md.D, b.X);
  EXPECT_TRUE((md.a_diag.array() == 1.0).all());
  EXPECT_TRUE(md.mu.isApprox(b.X * beta));
}

TEST(MeanDeriv, LogitAtZero) {
  Eigen::MatrixXd X(1, 3);
  X << 1, 0, 0;
  Eigen::VectorXd beta(3);
  beta << 0.0, 0.4, -0.2;
  const MeanDeriv md = mean_deriv(X, beta, Family::BernoulliLogit);
  EXPECT_DOUBLE_EQ(md.mu[0], 0.5);
  EXPECT_DOUBLE_EQ(md.a_diag[0], 0.25);
  EXPECT_TRUE(md.D.row(0).isApprox(0.25 * X.row(0)));
}

TEST(MeanDeriv, MatchesFiniteDifferences) {
  test::Rng rng(11);
  std::normal_distribution<double> z(0.0, 0.6);
  for (Family f : {Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog}) {
    for (int rep = 0; rep < 20; ++rep) {
      Eigen::MatrixXd X(6, 4);
      for (Eigen::Index k = 0; k < X.size(); ++k)
        X.data()[k] = z(rng);
      Eigen::VectorXd beta(4);
      for (Eigen::Index k = 0; k < 4; ++k)
        beta[k] = z(rng);
      const MeanDeriv md = mean_deriv(X, beta, f);
      const double h = 1e-6;
      for (Eigen::Index c = 0; c < 4; ++c) {
        Eigen::VectorXd bp = beta, bm = beta;
        bp[c] += h;
        bm[c] -= h;
        const Eigen::VectorXd fd =
            (mean_deriv(X, bp, f).mu - mean_deriv(X, bm, f).mu) / (2.0 * h);
        EXPECT_LT(test::rel_err(md.D.col(c), fd), 1e-5) << family_name(f) << " col " << c;
      }
    }
  }
}

TEST(MeanDeriv, PositiveVarianceAndDeterminism) {
  test::Rng rng(5);
  Eigen::VectorXd beta(2);
  beta << 0.1, 0.8;
  for (Family f : {Family::BernoulliLogit, Family::PoissonLog}) {
    const Batch b = test::random_batch(rng, "a", 1, 1.0, 30, beta, f);
    const MeanDeriv one = mean_deriv(b, beta, f);
    const MeanDeriv two = mean_deriv(b, beta, f);
    EXPECT_TRUE((one.a_diag.array() > 0.0).all());
    EXPECT_EQ(0, std::memcmp(one.D.data(), two.D.data(), sizeof(double) * one.D.size()));
    EXPECT_EQ(0, std::memcmp(one.mu.data(), two.mu.data(), sizeof(double) * one.mu.size()));
  }
}

TEST(MeanDeriv, ExtremePredictorsStayUsable) {
  Eigen::MatrixXd X(2, 1);
  X << 1, -1;
  Eigen::VectorXd beta(1);
  beta << 100.0;
  const MeanDeriv lg = mean_deriv(X, beta, Family::BernoulliLogit);
  EXPECT_TRUE((lg.a_diag.array() > 0.0).all());
  beta << -800.0;
  const MeanDeriv ps = mean_deriv(X, beta, Family::PoissonLog);
  EXPECT_GE(ps.a_diag.minCoeff(), kPoissonMeanFloor);
}

TEST(MeanDeriv, NonFinitePredictorNamesRow) {
  Eigen::MatrixXd X(3, 1);
  X << 1, std::numeric_limits<double>::infinity(), 1;
  Eigen::VectorXd beta(1);
  beta << 1.0;
  try {
    mean_deriv(X, beta, Family::GaussianIdentity);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
}

TEST(ValidateBatch, FamilyDomains) {
  Batch b;
  b.subject_id = "s";
  b.X = Eigen::MatrixXd::Ones(2, 1);
  b.y = Eigen::Vector2d(0.0, 2.0);
  EXPECT_NO_THROW(validate_batch(b, Family::PoissonLog));
  EXPECT_THROW(validate_batch(b, Family::BernoulliLogit), ValidationError);
  b.y = Eigen::Vector2d(0.5, 1.0);
  EXPECT_THROW(validate_batch(b, Family::PoissonLog), ValidationError);
  EXPECT_NO_THROW(validate_batch(b, Family::GaussianIdentity));
  b.y.resize(0);
  b.X.resize(0, 1);
  EXPECT_THROW(validate_batch(b, Family::GaussianIdentity), ValidationError);
}
