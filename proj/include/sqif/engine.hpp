#pragma once

// Streaming QIF estimator. Each subject carries a summary (U~_i, S~_i) of
// its history plus its most recent observation; a new batch is absorbed by
// solving
//
//   S~_b' V~_b^{-1} U~_b = 0,
//   U~_i(beta) = w [U~_{i,b-1} + S~_{i,b-1} (beta~_{b-1} - beta)]
//                + stack(U1_ib, U2_ib + U_{i,b-1,b} + w U_{i,b,b-1}),
//   S~_i(beta) = w S~_{i,b-1} + stack(S1_ib, S2_ib + S_{i,b-1,b} + w S_{i,b,b-1}),
//
// with w = q^{t_b - t_{b-1}}. Raw data of earlier batches is never revisited.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sqif/errors.hpp"
#include "sqif/linalg.hpp"
#include "sqif/model.hpp"
#include "sqif/offline.hpp"
#include "sqif/score_blocks.hpp"
#include "sqif/solver.hpp"

namespace sqif {

struct SubjectSummary {
  Eigen::VectorXd u_tilde; ///< carried score, length p*S
  Eigen::MatrixXd s_tilde; ///< carried negative gradient, (p*S) x p
  Observation last_obs;    ///< final observation of the latest batch
};

/// Full estimator state for one decay value.
struct Bundle {
  double q = 0.5;
  Eigen::VectorXd beta;
  double t_prev = 0.0;
  int batch_count = 0;
  double n_cumulative = 0.0; ///< N_b, observations per subject so far
  std::map<std::string, SubjectSummary> subjects;
  QifSystem system;         ///< aggregated U~, S~, V~ at beta
  int iterations = 0;       ///< Newton steps in the latest solve
  bool ridged = false;      ///< latest solve needed a ridge
  double criterion = std::numeric_limits<double>::quiet_NaN(); ///< current-batch QIF
};

struct QMode {
  enum class Kind { Fixed, Adaptive };
  Kind kind = Kind::Fixed;
  double q = 0.5;                 ///< Fixed
  std::vector<double> candidates; ///< Adaptive

  static QMode fixed(double q) { return {Kind::Fixed, q, {}}; }
  static QMode adaptive(std::vector<double> c) { return {Kind::Adaptive, 0.0, std::move(c)}; }
  bool operator==(const QMode&) const = default;

  void validate() const {
    const auto check = [](double v) {
      if (!(v > 0.0 && v < 1.0))
        throw ValidationError("decay q must lie in (0,1), got " + std::to_string(v));
    };
    if (kind == Kind::Fixed) {
      check(q);
    } else {
      if (candidates.empty())
        throw ValidationError("adaptive q needs at least one candidate");
      for (double c : candidates)
        check(c);
    }
  }
};

/// Candidate decays q = exp(-a * horizon^0.3) for `count` values of a evenly
/// spaced over [a_min, a_max].
inline std::vector<double> q_candidate_grid(double a_min, double a_max, int count,
                                            double horizon) {
  if (count < 1)
    throw ValidationError("q grid needs at least one point");
  if (!(a_min > 0.0) || !(a_max >= a_min))
    throw ValidationError("q grid needs 0 < a_min <= a_max");
  if (!(horizon >= 1.0))
    throw ValidationError("q grid horizon must be >= 1");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(count));
  const double scale = std::pow(horizon, 0.3);
  for (int k = 0; k < count; ++k) {
    const double a = count == 1 ? a_min : a_min + (a_max - a_min) * k / (count - 1);
    out.push_back(std::exp(-a * scale));
  }
  return out;
}

struct Diagnostics {
  std::vector<std::string> warnings;
  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
};

struct EngineState {
  ModelSpec model;
  SolverConfig config;
  QMode q_mode;
  std::vector<Bundle> bundles; ///< one per candidate (a single one when Fixed)
  std::size_t selected = 0;    ///< bundle reported as the current estimate
  Diagnostics diagnostics;

  const Bundle& current() const { return bundles.at(selected); }
  double q_used() const { return current().q; }
};

namespace detail {

inline void check_round(const ModelSpec& model, const SubjectBatches& batches) {
  if (batches.empty())
    throw ValidationError("no subjects in batch");
  for (const auto& [id, batch] : batches) {
    if (batch.subject_id != id)
      throw ValidationError("batch keyed as '" + id + "' carries subject id '" +
                            batch.subject_id + "'");
    if (batch.X.cols() != model.p)
      throw ValidationError("subject '" + id + "' has " + std::to_string(batch.X.cols()) +
                            " covariates, expected " + std::to_string(model.p));
    validate_batch(batch, model.family);
  }
}

inline double mean_batch_size(const SubjectBatches& batches) {
  double total = 0.0;
  for (const auto& [id, batch] : batches)
    total += static_cast<double>(batch.size());
  return total / static_cast<double>(batches.size());
}

inline void add_outer(Eigen::MatrixXd& v, const Eigen::VectorXd& u) {
  v.noalias() += u * u.transpose();
}

} // namespace detail

/// Starts a stream from the first batch: beta~_1 is the offline QIF fit on
/// batch 1 alone. Every candidate bundle starts from the same state.
inline EngineState init_stream(const ModelSpec& model, const SubjectBatches& first, double t1,
                               const QMode& q_mode, const SolverConfig& config = {}) {
  config.validate();
  q_mode.validate();
  BasisSet basis(model.s_count);
  if (model.p < 1)
    throw ValidationError("model needs at least one coefficient");
  if (!std::isfinite(t1))
    throw ValidationError("batch time must be finite");
  detail::check_round(model, first);

  EngineState state;
  state.model = model;
  state.config = config;
  state.q_mode = q_mode;

  CumulativeData data{{t1}, {first}};
  // q only enters through weights q^{t_1 - t_1} = 1 here.
  const double q0 = q_mode.kind == QMode::Kind::Fixed ? q_mode.q : q_mode.candidates.front();
  const OfflineFit fit = offline_fit(data, q0, model, config);
  if (fit.ridged)
    state.diagnostics.warn("batch 1: variability matrix singular, ridge applied (m=" +
                           std::to_string(first.size()) + ", score dim " +
                           std::to_string(model.score_dim()) + ")");

  Bundle b;
  b.beta = fit.beta;
  b.t_prev = t1;
  b.batch_count = 1;
  b.n_cumulative = detail::mean_batch_size(first);
  b.iterations = fit.iterations;
  b.ridged = fit.ridged;
  const Eigen::Index d = model.score_dim();
  b.system = {Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, model.p),
              Eigen::MatrixXd::Zero(d, d)};
  for (const auto& [id, batch] : first) {
    const BatchContribution c =
        batch_contribution(batch, nullptr, 0.0, b.beta, model.family, basis);
    b.system.u += c.u;
    b.system.s += c.s;
    detail::add_outer(b.system.v, c.u);
    b.subjects.emplace(id, SubjectSummary{c.u, c.s, last_observation(batch)});
  }

  if (q_mode.kind == QMode::Kind::Fixed) {
    b.q = q_mode.q;
    state.bundles.push_back(std::move(b));
  } else {
    for (double q : q_mode.candidates) {
      Bundle copy = b;
      copy.q = q;
      state.bundles.push_back(std::move(copy));
    }
  }
  state.selected = 0;
  return state;
}

/// Absorbs one batch into a single bundle with decay q. Returns the updated
/// bundle; `prev` is left untouched. The returned bundle's `criterion` is
/// the current-batch quadratic form used for selecting q.
inline Bundle update_bundle(const Bundle& prev, const ModelSpec& model,
                            const SubjectBatches& batches, double t_b, double q,
                            const SolverConfig& config, Diagnostics& diag) {
  if (!(q > 0.0 && q < 1.0))
    throw ValidationError("decay q must lie in (0,1), got " + std::to_string(q));
  if (!(t_b > prev.t_prev))
    throw ValidationError("batch time " + std::to_string(t_b) +
                          " does not exceed previous time " + std::to_string(prev.t_prev));
  if (batches.size() != prev.subjects.size())
    throw ValidationError("batch has " + std::to_string(batches.size()) +
                          " subjects, stream has " + std::to_string(prev.subjects.size()));

  const BasisSet basis(model.s_count);
  const double w = std::pow(q, t_b - prev.t_prev);
  const Eigen::Index d = model.score_dim();
  const int batch_no = prev.batch_count + 1;

  // Pair summaries with batches in the fixed subject order.
  std::vector<std::pair<const SubjectSummary*, const Batch*>> pairs;
  pairs.reserve(batches.size());
  {
    auto it = batches.begin();
    for (const auto& [id, summary] : prev.subjects) {
      if (it == batches.end() || it->first != id)
        throw ValidationError("subject '" + id + "' missing from batch " +
                              std::to_string(batch_no));
      pairs.emplace_back(&summary, &it->second);
      ++it;
    }
  }

  struct PerSubject {
    Eigen::VectorXd u, s_u; // carried+current score; current-batch score
    Eigen::MatrixXd s;
  };
  BlockWorkspace ws;
  Eigen::VectorXd cu(d), ui(d), shift(model.p);
  Eigen::MatrixXd cs(d, model.p), si(d, model.p);
  auto evaluate = [&](const Eigen::VectorXd& beta, std::vector<PerSubject>* keep) {
    QifSystem sys{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, model.p),
                  Eigen::MatrixXd::Zero(d, d)};
    shift = prev.beta - beta;
    for (const auto& [summary, batch] : pairs) {
      add_batch_contribution(*batch, &summary->last_obs, w, beta, model.family, basis, ws, cu,
                             cs);
      ui.noalias() = summary->s_tilde * shift;
      ui += summary->u_tilde;
      ui = w * ui + cu;
      si = w * summary->s_tilde + cs;
      sys.u += ui;
      sys.s += si;
      sys.v.noalias() += ui * ui.transpose();
      if (keep)
        keep->push_back({ui, cu, si});
    }
    return sys;
  };

  SolveResult r = solve_estimating_equation(
      [&](const Eigen::VectorXd& beta) { return evaluate(beta, nullptr); }, prev.beta, config,
      "batch " + std::to_string(batch_no) + " update (q=" + std::to_string(q) + ")");

  std::vector<PerSubject> per;
  per.reserve(pairs.size());
  Bundle next;
  next.q = q;
  next.beta = r.beta;
  next.t_prev = t_b;
  next.batch_count = batch_no;
  next.n_cumulative = prev.n_cumulative + detail::mean_batch_size(batches);
  next.system = evaluate(r.beta, &per);
  next.iterations = r.iterations;
  next.ridged = r.ridged;
  if (r.ridged)
    diag.warn("batch " + std::to_string(batch_no) + " (q=" + std::to_string(q) +
              "): variability matrix singular, ridge applied");

  Eigen::VectorXd u_cur = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd v_cur = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const Batch& batch = *pairs[k].second;
    u_cur += per[k].s_u;
    detail::add_outer(v_cur, per[k].s_u);
    next.subjects.emplace(batch.subject_id,
                          SubjectSummary{std::move(per[k].u), std::move(per[k].s),
                                         last_observation(batch)});
  }
  const SpdFactor vf = factor_spd(v_cur, config.ridge_eps, "current-batch variability");
  next.criterion = u_cur.dot(vf.solve(u_cur));

  if (config.check_h_pd) {
    const SpdFactor vt = factor_spd(next.system.v, config.ridge_eps, "variability matrix");
    Eigen::MatrixXd H = next.system.s.transpose() * vt.solve(prev.system.s);
    H /= next.n_cumulative;
    const Eigen::MatrixXd sym = 0.5 * (H + H.transpose());
    const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sym).eigenvalues()(0);
    if (!(min_eig > 0.0)) {
      std::ostringstream msg;
      msg << "batch " << batch_no << " (q=" << q
          << "): stability matrix H_b is not positive definite (min eigenvalue " << min_eig
          << ")";
      diag.warn(msg.str());
    }
  }
  return next;
}

struct QSelection {
  double q_opt = 0.0;
  std::size_t index = 0;
  std::vector<double> criteria; ///< per surviving candidate
};

/// Index of the smallest criterion; ties keep the earliest candidate and NaN
/// never wins unless every entry is NaN.
inline std::size_t argmin_criterion(const std::vector<double>& criteria) {
  if (criteria.empty())
    throw ValidationError("no q candidates to select from");
  std::size_t best = 0;
  for (std::size_t k = 1; k < criteria.size(); ++k)
    if (criteria[k] < criteria[best] || (std::isnan(criteria[best]) && !std::isnan(criteria[k])))
      best = k;
  return best;
}

/// Advances every candidate bundle with its own q and selects the one with
/// the smallest current-batch quadratic form. Failing candidates are dropped.
inline QSelection select_q(EngineState& state, const SubjectBatches& batches, double t_b) {
  if (state.q_mode.kind != QMode::Kind::Adaptive)
    throw ValidationError("select_q requires adaptive q mode");
  detail::check_round(state.model, batches);

  std::vector<Bundle> next;
  std::vector<double> kept_q;
  std::string last_error;
  for (const Bundle& b : state.bundles) {
    try {
      next.push_back(update_bundle(b, state.model, batches, t_b, b.q, state.config,
                                   state.diagnostics));
      kept_q.push_back(b.q);
    } catch (const NumericalError& e) {
      last_error = e.what();
      state.diagnostics.warn("candidate q=" + std::to_string(b.q) + " dropped: " + e.what());
    }
  }
  if (next.empty())
    throw NumericalError("every q candidate failed; last error: " + last_error);

  QSelection sel;
  for (const Bundle& b : next)
    sel.criteria.push_back(b.criterion);
  sel.index = argmin_criterion(sel.criteria);
  sel.q_opt = next[sel.index].q;
  state.bundles = std::move(next);
  state.q_mode.candidates = std::move(kept_q);
  state.selected = sel.index;
  return sel;
}

/// Absorbs one batch using the configured q mode.
inline void update_stream(EngineState& state, const SubjectBatches& batches, double t_b) {
  if (state.q_mode.kind == QMode::Kind::Adaptive) {
    select_q(state, batches, t_b);
    return;
  }
  detail::check_round(state.model, batches);
  state.bundles.at(0) = update_bundle(state.bundles.at(0), state.model, batches, t_b,
                                      state.q_mode.q, state.config, state.diagnostics);
  state.selected = 0;
}

/// Fixed-q update with an explicit decay for this step.
inline void update_stream(EngineState& state, const SubjectBatches& batches, double t_b,
                          double q) {
  if (state.q_mode.kind != QMode::Kind::Fixed)
    throw ValidationError("explicit q is only valid in fixed q mode");
  detail::check_round(state.model, batches);
  state.bundles.at(0) = update_bundle(state.bundles.at(0), state.model, batches, t_b, q,
                                      state.config, state.diagnostics);
  state.selected = 0;
}

} // namespace sqif
