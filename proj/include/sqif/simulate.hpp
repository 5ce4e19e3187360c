#pragma once

// Simulation designs with AR(1) within-subject dependence and the
// Monte-Carlo replicate runner (RMSE / ESE / BIAS / CP / LEN).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "sqif/engine.hpp"
#include "sqif/errors.hpp"
#include "sqif/inference.hpp"
#include "sqif/model.hpp"
#include "sqif/offline.hpp"

namespace sqif {

/// Coefficient trajectories beta_j, j = 1..b.
enum class BetaPath {
  LinearSin,         ///< (0.2, sin(2 pi j / b), 0.5)
  LogisticQuadratic, ///< (0.2, 4 j (1 - j/b) / b, 0.5)
  PoissonSin,        ///< (0.2, sin(2 pi j / b), 0.3)
};

inline std::string_view beta_path_name(BetaPath p) {
  switch (p) {
  case BetaPath::LinearSin: return "linear_sin";
  case BetaPath::LogisticQuadratic: return "logistic_quadratic";
  case BetaPath::PoissonSin: return "poisson_sin";
  }
  return "unknown";
}

inline BetaPath parse_beta_path(std::string_view s) {
  if (s == "linear_sin") return BetaPath::LinearSin;
  if (s == "logistic_quadratic") return BetaPath::LogisticQuadratic;
  if (s == "poisson_sin") return BetaPath::PoissonSin;
  throw ValidationError("unknown beta path '" + std::string(s) + "'");
}

inline BetaPath default_beta_path(Family f) {
  switch (f) {
  case Family::GaussianIdentity: return BetaPath::LinearSin;
  case Family::BernoulliLogit: return BetaPath::LogisticQuadratic;
  case Family::PoissonLog: return BetaPath::PoissonSin;
  }
  return BetaPath::LinearSin;
}

struct SimDesign {
  Family family = Family::GaussianIdentity;
  int m = 100;  ///< subjects
  int b = 200;  ///< batches
  int n = 20;   ///< observations per batch
  double sigma2 = 4.0;
  double rho = 0.8;
  std::uint64_t seed = 1;
  int replicates = 100;
  BetaPath beta_path = BetaPath::LinearSin;
  QMode q_mode = QMode::adaptive(q_candidate_grid(0.1, 1.0, 20, 200.0));
  int s_count = 2;
  double level = 0.95;
  int threads = 0; ///< 0: hardware concurrency
  SolverConfig solver;

  static constexpr int p = 3; ///< intercept plus two standard-normal covariates

  Eigen::VectorXd beta_at(int j) const {
    const double jd = j, bd = b;
    Eigen::VectorXd beta(p);
    switch (beta_path) {
    case BetaPath::LinearSin:
      beta << 0.2, std::sin(2.0 * std::numbers::pi * jd / bd), 0.5;
      break;
    case BetaPath::LogisticQuadratic:
      beta << 0.2, 4.0 * jd * (1.0 - jd / bd) / bd, 0.5;
      break;
    case BetaPath::PoissonSin:
      beta << 0.2, std::sin(2.0 * std::numbers::pi * jd / bd), 0.3;
      break;
    }
    return beta;
  }

  ModelSpec model() const { return {family, p, s_count}; }

  void validate() const {
    if (m < 1 || b < 1 || n < 1)
      throw ValidationError("design needs m, b, n >= 1");
    if (!(sigma2 > 0.0))
      throw ValidationError("design sigma2 must be positive");
    if (!(rho > -1.0 && rho < 1.0))
      throw ValidationError("design rho must lie in (-1, 1)");
    if (replicates < 1)
      throw ValidationError("design needs at least one replicate");
    if (!(level > 0.0 && level < 1.0))
      throw ValidationError("design level must lie in (0,1)");
    BasisSet{s_count};
    q_mode.validate();
    solver.validate();
  }
};

inline std::vector<std::string> coefficient_labels(int p) {
  std::vector<std::string> out{"intercept"};
  for (int k = 1; k < p; ++k)
    out.push_back("x" + std::to_string(k));
  return out;
}

using Rng = std::mt19937_64;

/// splitmix64 finalizer; the replicate stream for (seed, r) is seeded by
/// mixing the counter r into the base seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng replicate_rng(std::uint64_t seed, std::uint64_t replicate) {
  return Rng(mix64(seed ^ mix64(replicate + 1)));
}

/// Stationary AR(1) series with marginal variance sigma2 and lag-1
/// correlation rho: e_1 ~ N(0, sigma2), e_k = rho e_{k-1} + N(0, sigma2 (1 - rho^2)).
inline Eigen::VectorXd ar1_series(Rng& rng, Eigen::Index length, double sigma2, double rho) {
  if (!(rho > -1.0 && rho < 1.0))
    throw ValidationError("AR(1) correlation must lie in (-1, 1)");
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd e(length);
  if (length == 0)
    return e;
  const double sd = std::sqrt(sigma2);
  const double innov = sd * std::sqrt(1.0 - rho * rho);
  e[0] = sd * z(rng);
  for (Eigen::Index k = 1; k < length; ++k)
    e[k] = rho * e[k - 1] + innov * z(rng);
  return e;
}

/// Smallest k with P(Poisson(mu) <= k) >= u.
inline double poisson_quantile(double u, double mu) {
  if (!(mu > 0.0))
    return 0.0;
  if (!(u > 0.0))
    return 0.0;
  const auto cdf = [mu](double k) { return boost::math::gamma_q(k + 1.0, mu); };
  double k = std::floor(mu);
  if (cdf(k) >= u) {
    while (k > 0.0 && cdf(k - 1.0) >= u)
      k -= 1.0;
  } else {
    while (cdf(k) < u)
      k += 1.0;
  }
  return k;
}

/// Dichotomizes a N(0, sd^2) latent value so that P(y = 1) = mu.
inline double latent_bernoulli(double mu, double z, double sd) {
  return z > sd * normal_quantile(1.0 - mu) ? 1.0 : 0.0;
}

/// Maps a standard-normal latent value to a Poisson(mu) count.
inline double latent_poisson(double mu, double z) {
  const double u = std::clamp(normal_cdf(z), 1e-300, 1.0 - 1e-16);
  return poisson_quantile(u, mu);
}

namespace detail {

/// Shared skeleton: covariates and a latent AR(1) series per subject, turned
/// into outcomes by `outcome(eta, latent)`.
template <class Outcome>
CumulativeData generate_stream(const SimDesign& d, Rng& rng, double latent_sigma2,
                               Outcome&& outcome) {
  d.validate();
  CumulativeData data;
  data.rounds.resize(static_cast<std::size_t>(d.b));
  for (int j = 1; j <= d.b; ++j)
    data.times.push_back(static_cast<double>(j));
  std::vector<Eigen::VectorXd> betas;
  for (int j = 1; j <= d.b; ++j)
    betas.push_back(d.beta_at(j));

  const int width = static_cast<int>(std::to_string(d.m).size());
  std::normal_distribution<double> z(0.0, 1.0);
  const Eigen::Index total = static_cast<Eigen::Index>(d.b) * d.n;
  for (int i = 0; i < d.m; ++i) {
    std::string id = std::to_string(i + 1);
    id = "s" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    const Eigen::VectorXd latent = ar1_series(rng, total, latent_sigma2, d.rho);
    for (int j = 0; j < d.b; ++j) {
      Batch batch;
      batch.subject_id = id;
      batch.batch_index = j + 1;
      batch.t = data.times[static_cast<std::size_t>(j)];
      batch.X.resize(d.n, SimDesign::p);
      batch.y.resize(d.n);
      for (int k = 0; k < d.n; ++k) {
        batch.X(k, 0) = 1.0;
        for (int c = 1; c < SimDesign::p; ++c)
          batch.X(k, c) = z(rng);
        const double eta = batch.X.row(k).dot(betas[static_cast<std::size_t>(j)]);
        batch.y[k] = outcome(eta, latent[static_cast<Eigen::Index>(j) * d.n + k]);
      }
      data.rounds[static_cast<std::size_t>(j)].emplace(id, std::move(batch));
    }
  }
  return data;
}

} // namespace detail

/// Gaussian outcomes y = x'beta_j + e with AR(1) errors (variance sigma2).
inline CumulativeData gen_linear(const SimDesign& d, Rng& rng) {
  if (d.family != Family::GaussianIdentity)
    throw ValidationError("gen_linear needs the Gaussian family");
  return detail::generate_stream(d, rng, d.sigma2,
                                 [](double eta, double e) { return eta + e; });
}

/// Bernoulli outcomes by thresholding a latent AR(1) Gaussian series:
/// y = 1{z > sigma * Phi^{-1}(1 - mu)}, so that P(y = 1) = mu exactly.
inline CumulativeData gen_logistic(const SimDesign& d, Rng& rng) {
  if (d.family != Family::BernoulliLogit)
    throw ValidationError("gen_logistic needs the logistic family");
  const double sd = std::sqrt(d.sigma2);
  return detail::generate_stream(d, rng, d.sigma2, [sd](double eta, double z) {
    return latent_bernoulli(link_inverse(eta, Family::BernoulliLogit), z, sd);
  });
}

/// Poisson outcomes through a Gaussian copula: a standard-normal AR(1)
/// series is mapped through Phi and the Poisson(mu) quantile function.
inline CumulativeData gen_poisson(const SimDesign& d, Rng& rng) {
  if (d.family != Family::PoissonLog)
    throw ValidationError("gen_poisson needs the Poisson family");
  return detail::generate_stream(d, rng, 1.0, [](double eta, double z) {
    if (eta > 30.0)
      throw ValidationError("Poisson mean overflow guard: linear predictor " +
                            std::to_string(eta) + " exceeds 30");
    return latent_poisson(std::exp(eta), z);
  });
}

inline CumulativeData generate(const SimDesign& d, Rng& rng) {
  switch (d.family) {
  case Family::GaussianIdentity: return gen_linear(d, rng);
  case Family::BernoulliLogit: return gen_logistic(d, rng);
  case Family::PoissonLog: return gen_poisson(d, rng);
  }
  throw ValidationError("unknown family");
}

inline CumulativeData generate_replicate(const SimDesign& d, int replicate) {
  Rng rng = replicate_rng(d.seed, static_cast<std::uint64_t>(replicate));
  return generate(d, rng);
}

// ---------------------------------------------------------------------------
// Whole-stream drivers.

/// Streams every batch of `data` through the engine. Returns the report
/// after each batch when `every_batch`, otherwise only the final one.
inline std::vector<FitReport> stream_fit(const CumulativeData& data, const ModelSpec& model,
                                         const QMode& q_mode, const SolverConfig& config,
                                         double level, bool every_batch = false,
                                         Diagnostics* diagnostics = nullptr) {
  data.validate(model);
  std::vector<FitReport> out;
  EngineState state = init_stream(model, data.rounds.front(), data.times.front(), q_mode, config);
  if (every_batch)
    out.push_back(make_report(state, level));
  for (std::size_t j = 1; j < data.batch_count(); ++j) {
    update_stream(state, data.rounds[j], data.times[j]);
    if (every_batch)
      out.push_back(make_report(state, level));
  }
  if (!every_batch)
    out.push_back(make_report(state, level));
  if (diagnostics)
    *diagnostics = state.diagnostics;
  return out;
}

/// Comparator using the identity basis only (working independence), with
/// the same q handling as the AR(1) stream.
inline std::vector<FitReport> independent_online_fit(const CumulativeData& data, Family family,
                                                     const QMode& q_mode,
                                                     const SolverConfig& config = {},
                                                     double level = 0.95,
                                                     bool every_batch = true) {
  if (data.rounds.empty() || data.rounds.front().empty())
    throw ValidationError("independent_online_fit: no data");
  const int p = static_cast<int>(data.rounds.front().begin()->second.X.cols());
  return stream_fit(data, ModelSpec{family, p, 1}, q_mode, config, level, every_batch);
}

// ---------------------------------------------------------------------------
// Replicate runner.

struct ReplicateResult {
  Eigen::VectorXd beta, lower, upper;
};

using Estimator = std::function<ReplicateResult(const CumulativeData&, const SimDesign&)>;

struct NamedEstimator {
  std::string name;
  Estimator fn;
};

/// Streaming estimator with the design's q mode and the given basis count.
inline Estimator streaming_estimator(int s_count) {
  return [s_count](const CumulativeData& data, const SimDesign& d) {
    ModelSpec model = d.model();
    model.s_count = s_count;
    const FitReport r = stream_fit(data, model, d.q_mode, d.solver, d.level).back();
    return ReplicateResult{r.beta, r.ci_lower, r.ci_upper};
  };
}

struct MetricsRow {
  std::string coefficient;
  double rmse = 0.0, ese = 0.0, bias = 0.0, cp = 0.0, len = 0.0;
};

struct EstimatorMetrics {
  std::string name;
  std::vector<MetricsRow> rows;
  int n_ok = 0;
  int n_failed = 0;
};

/// Aggregates replicate results against the true coefficient vector. ESE
/// uses divisor R so that RMSE^2 = ESE^2 + BIAS^2 on the recorded sample.
inline std::vector<MetricsRow> aggregate_metrics(const std::vector<ReplicateResult>& results,
                                                 const Eigen::VectorXd& truth) {
  if (results.empty())
    throw ValidationError("no replicate results to aggregate");
  const Eigen::Index p = truth.size();
  const double R = static_cast<double>(results.size());
  const std::vector<std::string> labels = coefficient_labels(static_cast<int>(p));
  std::vector<MetricsRow> rows;
  for (Eigen::Index k = 0; k < p; ++k) {
    double sum_dev = 0.0, sum_sq = 0.0, mean_est = 0.0, hits = 0.0, len = 0.0;
    for (const ReplicateResult& r : results) {
      const double dev = r.beta[k] - truth[k];
      sum_dev += dev;
      sum_sq += dev * dev;
      mean_est += r.beta[k];
      hits += (r.lower[k] <= truth[k] && truth[k] <= r.upper[k]) ? 1.0 : 0.0;
      len += r.upper[k] - r.lower[k];
    }
    mean_est /= R;
    double var = 0.0;
    for (const ReplicateResult& r : results)
      var += (r.beta[k] - mean_est) * (r.beta[k] - mean_est);
    MetricsRow row;
    row.coefficient = labels[static_cast<std::size_t>(k)];
    row.bias = sum_dev / R;
    row.rmse = std::sqrt(sum_sq / R);
    row.ese = std::sqrt(var / R);
    row.cp = hits / R;
    row.len = len / R;
    rows.push_back(row);
  }
  return rows;
}

inline constexpr double kMaxFailureRate = 0.05;

/// Runs every estimator on the same generated replicates. Replicates run in
/// parallel; results are aggregated in replicate order.
inline std::vector<EstimatorMetrics> run_replicates(const SimDesign& design,
                                                    const std::vector<NamedEstimator>& estimators) {
  design.validate();
  const std::size_t R = static_cast<std::size_t>(design.replicates);
  const std::size_t E = estimators.size();
  std::vector<std::vector<std::optional<ReplicateResult>>> results(
      E, std::vector<std::optional<ReplicateResult>>(R));

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < R; r = next++) {
      const CumulativeData data = generate_replicate(design, static_cast<int>(r));
      for (std::size_t e = 0; e < E; ++e) {
        try {
          results[e][r] = estimators[e].fn(data, design);
        } catch (const NumericalError&) {
          results[e][r].reset();
        }
      }
    }
  };
  unsigned threads = design.threads > 0 ? static_cast<unsigned>(design.threads)
                                        : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(R));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back(worker);
  }

  const Eigen::VectorXd truth = design.beta_at(design.b);
  std::vector<EstimatorMetrics> out;
  for (std::size_t e = 0; e < E; ++e) {
    EstimatorMetrics em;
    em.name = estimators[e].name;
    std::vector<ReplicateResult> ok;
    for (const auto& r : results[e]) {
      if (r)
        ok.push_back(*r);
      else
        ++em.n_failed;
    }
    em.n_ok = static_cast<int>(ok.size());
    if (static_cast<double>(em.n_failed) > kMaxFailureRate * static_cast<double>(R))
      throw NumericalError("estimator '" + em.name + "' failed on " +
                           std::to_string(em.n_failed) + " of " + std::to_string(R) +
                           " replicates");
    em.rows = aggregate_metrics(ok, truth);
    out.push_back(std::move(em));
  }
  return out;
}

/// Streaming estimator with the design's basis count.
inline EstimatorMetrics run_replicates(const SimDesign& design) {
  return run_replicates(design, {{"streaming", streaming_estimator(design.s_count)}}).front();
}

struct ComparisonRow {
  std::string coefficient;
  double len_streaming = 0.0;
  double len_independence = 0.0;
  double ratio = 0.0; ///< independence / streaming
};

struct Comparison {
  EstimatorMetrics streaming, independence;
  std::vector<ComparisonRow> rows;
};

/// AR(1)-basis stream versus the working-independence stream on the same
/// replicates.
inline Comparison compare_designs(const SimDesign& design) {
  auto metrics = run_replicates(design, {{"streaming", streaming_estimator(2)},
                                         {"independence", streaming_estimator(1)}});
  Comparison c{metrics[0], metrics[1], {}};
  for (std::size_t k = 0; k < c.streaming.rows.size(); ++k) {
    ComparisonRow row;
    row.coefficient = c.streaming.rows[k].coefficient;
    row.len_streaming = c.streaming.rows[k].len;
    row.len_independence = c.independence.rows[k].len;
    row.ratio = row.len_independence / row.len_streaming;
    c.rows.push_back(row);
  }
  return c;
}

} // namespace sqif
