#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include <boost/math/special_functions/gamma.hpp>

#include "sqif/simulate.hpp"

using namespace sqif;

namespace {

double lag1_corr(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  const double mean = v.mean();
  double num = 0.0, den = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    den += (v[k] - mean) * (v[k] - mean);
    if (k + 1 < n)
      num += (v[k] - mean) * (v[k + 1] - mean);
  }
  return num / den;
}

SimDesign tiny(Family f) {
  SimDesign d;
  d.family = f;
  d.beta_path = default_beta_path(f);
  d.m = 30;
  d.b = 3;
  d.n = 4;
  d.replicates = 6;
  d.threads = 1;
  d.q_mode = QMode::fixed(0.5);
  return d;
}

bool same_data(const CumulativeData& a, const CumulativeData& b) {
  if (a.times != b.times || a.rounds.size() != b.rounds.size())
    return false;
  for (std::size_t j = 0; j < a.rounds.size(); ++j)
    for (const auto& [id, ba] : a.rounds[j]) {
      const Batch& bb = b.rounds[j].at(id);
      if (ba.X.size() != bb.X.size() ||
          std::memcmp(ba.X.data(), bb.X.data(), sizeof(double) * ba.X.size()) != 0 ||
          std::memcmp(ba.y.data(), bb.y.data(), sizeof(double) * ba.y.size()) != 0)
        return false;
    }
  return true;
}

} // namespace

TEST(Ar1Series, IndependentCase) {
  Rng rng(61);
  const Eigen::VectorXd e = ar1_series(rng, 4000, 4.0, 0.0);
  EXPECT_LT(std::abs(lag1_corr(e)), 3.0 / std::sqrt(4000.0));
}

TEST(Ar1Series, CorrelationAndVariance) {
  Rng rng(62);
  double corr = 0.0, var = 0.0;
  const int series = 10;
  for (int s = 0; s < series; ++s) {
    const Eigen::VectorXd e = ar1_series(rng, 4000, 4.0, 0.8);
    corr += lag1_corr(e) / series;
    var += e.squaredNorm() / e.size() / series;
  }
  EXPECT_NEAR(corr, 0.8, 0.05);
  EXPECT_NEAR(var, 4.0, 0.2);
  EXPECT_THROW(ar1_series(rng, 10, 4.0, 1.0), ValidationError);
}

TEST(LatentBernoulli, SymmetricThreshold) {
  Rng rng(63);
  const Eigen::VectorXd z = ar1_series(rng, 10000, 4.0, 0.8);
  double mean = 0.0;
  for (Eigen::Index k = 0; k < z.size(); ++k)
    mean += latent_bernoulli(link_inverse(0.0, Family::BernoulliLogit), z[k], 2.0);
  EXPECT_NEAR(mean / z.size(), 0.5, 0.02);
}

TEST(LatentBernoulli, MarginalMeans) {
  Rng rng(64);
  std::normal_distribution<double> n01;
  for (double mu : {0.2, 0.5, 0.8}) {
    double mean = 0.0;
    for (int k = 0; k < 10000; ++k)
      mean += latent_bernoulli(mu, 2.0 * n01(rng), 2.0);
    EXPECT_NEAR(mean / 10000.0, mu, 0.02) << "mu=" << mu;
  }
}

TEST(LatentBernoulli, PositiveInducedCorrelation) {
  Rng rng(65);
  const Eigen::VectorXd z = ar1_series(rng, 10000, 4.0, 0.8);
  Eigen::VectorXd y(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k)
    y[k] = latent_bernoulli(0.4, z[k], 2.0);
  EXPECT_GT(lag1_corr(y), 0.1);
}

TEST(PoissonQuantile, AgreesWithCdf) {
  for (double mu : {0.05, 1.0, 3.7, 25.0}) {
    for (double u : {1e-6, 0.1, 0.5, 0.9, 0.999999}) {
      const double k = poisson_quantile(u, mu);
      EXPECT_GE(boost::math::gamma_q(k + 1.0, mu), u);
      if (k > 0)
        EXPECT_LT(boost::math::gamma_q(k, mu), u);
    }
  }
}

TEST(LatentPoisson, IndependentCopulaIsPoisson) {
  Rng rng(66);
  const Eigen::VectorXd z = ar1_series(rng, 10000, 1.0, 0.0);
  const double mu = 2.5;
  Eigen::VectorXd y(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k)
    y[k] = latent_poisson(mu, z[k]);
  const double mean = y.mean();
  const double var = (y.array() - mean).square().sum() / (y.size() - 1);
  EXPECT_NEAR(var / mean, 1.0, 0.05);
  EXPECT_LT(std::abs(lag1_corr(y)), 3.0 / std::sqrt(10000.0));
}

TEST(LatentPoisson, MarginalMean) {
  Rng rng(67);
  for (double eta : {-0.5, 0.4, 1.5}) {
    const Eigen::VectorXd z = ar1_series(rng, 10000, 1.0, 0.0);
    double mean = 0.0;
    for (Eigen::Index k = 0; k < z.size(); ++k)
      mean += latent_poisson(std::exp(eta), z[k]);
    mean /= z.size();
    EXPECT_NEAR(mean / std::exp(eta), 1.0, 0.02) << "eta=" << eta;
  }
}

TEST(LatentPoisson, CorrelationIncreasesWithLatentRho) {
  double prev = -1.0;
  for (double rho : {0.0, 0.4, 0.8}) {
    Rng rng(68);
    const Eigen::VectorXd z = ar1_series(rng, 10000, 1.0, rho);
    Eigen::VectorXd y(z.size());
    for (Eigen::Index k = 0; k < z.size(); ++k)
      y[k] = latent_poisson(2.0, z[k]);
    const double c = lag1_corr(y);
    EXPECT_GT(c, prev) << "rho=" << rho;
    prev = c;
  }
}

TEST(Generators, BetaPaths) {
  SimDesign d;
  d.b = 200;
  d.beta_path = BetaPath::LinearSin;
  EXPECT_NEAR(d.beta_at(50)[1], 1.0, 1e-15);
  EXPECT_EQ(d.beta_at(50)[0], 0.2);
  EXPECT_EQ(d.beta_at(50)[2], 0.5);
  d.beta_path = BetaPath::LogisticQuadratic;
  EXPECT_NEAR(d.beta_at(100)[1], 4.0 * 100 * 0.5 / 200, 1e-15);
  d.beta_path = BetaPath::PoissonSin;
  EXPECT_EQ(d.beta_at(10)[2], 0.3);
  EXPECT_EQ(parse_beta_path(beta_path_name(BetaPath::PoissonSin)), BetaPath::PoissonSin);
}

TEST(Generators, ShapeAndDomains) {
  for (Family f : {Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog}) {
    const SimDesign d = tiny(f);
    const CumulativeData data = generate_replicate(d, 0);
    EXPECT_NO_THROW(data.validate(d.model()));
    ASSERT_EQ(data.batch_count(), 3u);
    EXPECT_EQ(data.rounds[0].size(), 30u);
    EXPECT_EQ(data.rounds[0].begin()->first, "s01");
    EXPECT_EQ(data.rounds[2].begin()->second.size(), 4);
    EXPECT_TRUE((data.rounds[1].begin()->second.X.col(0).array() == 1.0).all());
  }
  EXPECT_THROW({
    Rng rng(1);
    gen_linear(tiny(Family::PoissonLog), rng);
  }, ValidationError);
}

TEST(Generators, ReproducibleAndFreshPerReplicate) {
  const SimDesign d = tiny(Family::PoissonLog);
  EXPECT_TRUE(same_data(generate_replicate(d, 3), generate_replicate(d, 3)));
  const CumulativeData a = generate_replicate(d, 0), b = generate_replicate(d, 1);
  EXPECT_FALSE(same_data(a, b));
  EXPECT_NE(a.rounds[0].begin()->second.X(0, 1), b.rounds[0].begin()->second.X(0, 1));
}

TEST(Replicates, StubTruthGivesPerfectMetrics) {
  const SimDesign d = tiny(Family::GaussianIdentity);
  const Estimator truth = [](const CumulativeData&, const SimDesign& dd) {
    const Eigen::VectorXd b = dd.beta_at(dd.b);
    return ReplicateResult{b, b, b};
  };
  const auto m = run_replicates(d, {{"stub", truth}});
  for (const MetricsRow& r : m[0].rows) {
    EXPECT_EQ(r.rmse, 0.0);
    EXPECT_NEAR(r.ese, 0.0, 1e-15);
    EXPECT_EQ(r.bias, 0.0);
    EXPECT_EQ(r.cp, 1.0);
    EXPECT_EQ(r.len, 0.0);
  }
}

TEST(Replicates, RmseDecomposes) {
  SimDesign d = tiny(Family::BernoulliLogit);
  d.replicates = 8;
  const EstimatorMetrics m = run_replicates(d);
  EXPECT_EQ(m.n_ok + m.n_failed, 8);
  for (const MetricsRow& r : m.rows) {
    EXPECT_NEAR(r.rmse * r.rmse, r.ese * r.ese + r.bias * r.bias, 1e-12);
    EXPECT_GE(r.cp, 0.0);
    EXPECT_LE(r.cp, 1.0);
  }
  EXPECT_EQ(m.rows[0].coefficient, "intercept");
  EXPECT_EQ(m.rows[2].coefficient, "x2");
}

TEST(Replicates, ThreadCountDoesNotChangeResults) {
  SimDesign d = tiny(Family::GaussianIdentity);
  const EstimatorMetrics one = run_replicates(d);
  d.threads = 3;
  const EstimatorMetrics three = run_replicates(d);
  for (std::size_t k = 0; k < one.rows.size(); ++k) {
    EXPECT_EQ(one.rows[k].rmse, three.rows[k].rmse);
    EXPECT_EQ(one.rows[k].len, three.rows[k].len);
  }
}

TEST(Replicates, TooManyFailuresIsAnError) {
  SimDesign d = tiny(Family::GaussianIdentity);
  d.replicates = 10;
  const Estimator flaky = [](const CumulativeData& data, const SimDesign& dd) {
    if (data.rounds[0].begin()->second.y[0] > 0.0)
      throw NumericalError("injected");
    const Eigen::VectorXd b = dd.beta_at(dd.b);
    return ReplicateResult{b, b, b};
  };
  EXPECT_THROW(run_replicates(d, {{"flaky", flaky}}), NumericalError);
}

TEST(Design, Validation) {
  SimDesign d;
  EXPECT_NO_THROW(d.validate());
  d.rho = 1.0;
  EXPECT_THROW(d.validate(), ValidationError);
  d = {};
  d.m = 0;
  EXPECT_THROW(d.validate(), ValidationError);
  d = {};
  d.s_count = 3;
  EXPECT_THROW(d.validate(), ValidationError);
}
