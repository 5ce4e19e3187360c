#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sqif/engine.hpp"
#include "sqif/errors.hpp"
#include "sqif/inference.hpp"
#include "sqif/io.hpp"
#include "sqif/offline.hpp"
#include "sqif/simulate.hpp"

namespace fs = std::filesystem;
using namespace sqif;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

void print_warnings(const Diagnostics& d) {
  for (const std::string& w : d.warnings)
    std::cerr << "warning: " << w << '\n';
}

std::ofstream open_out(const fs::path& path, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out)
    throw ValidationError("cannot write '" + path.string() + "'");
  return out;
}

/// Appends report rows, writing the header first if the file is new or empty.
void emit_report(const std::optional<fs::path>& out_path, const FitReport& r,
                 const std::vector<std::string>& labels) {
  if (!out_path) {
    std::cout << kReportHeader << '\n';
    write_report_rows(std::cout, r, labels);
    return;
  }
  const bool fresh = !fs::exists(*out_path) || fs::file_size(*out_path) == 0;
  std::ofstream out = open_out(*out_path, true);
  if (fresh)
    out << kReportHeader << '\n';
  write_report_rows(out, r, labels);
}

std::vector<double> parse_grid_spec(const std::string& spec, double horizon) {
  std::vector<double> v;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double x = 0.0;
    if (!parse_double(detail::trim(item), x))
      throw ValidationError("--q-grid expects a_min,a_max,count; got '" + spec + "'");
    v.push_back(x);
  }
  if (v.size() != 3 || v[2] != std::floor(v[2]))
    throw ValidationError("--q-grid expects a_min,a_max,count; got '" + spec + "'");
  return q_candidate_grid(v[0], v[1], static_cast<int>(v[2]), horizon);
}

// ---------------------------------------------------------------------------

struct SimulateOpts {
  std::string design, out;
  std::optional<int> replicates, threads;
};

int run_simulate(const SimulateOpts& o) {
  SimDesign d = load_design(o.design);
  if (o.replicates)
    d.replicates = *o.replicates;
  if (o.threads)
    d.threads = *o.threads;
  d.validate();
  fs::create_directories(o.out);
  const fs::path dir(o.out);
  const std::vector<std::string> labels = coefficient_labels(SimDesign::p);

  const CumulativeData first = generate_replicate(d, 0);
  {
    std::ofstream out = open_out(dir / "data.csv");
    write_long_csv(out, first, labels);
  }
  {
    Diagnostics diag;
    const auto trace = stream_fit(first, d.model(), d.q_mode, d.solver, d.level, true, &diag);
    print_warnings(diag);
    std::ofstream out = open_out(dir / "trace.csv");
    out << kReportHeader << '\n';
    for (const FitReport& r : trace)
      write_report_rows(out, r, labels);
  }
  const EstimatorMetrics m = run_replicates(d);
  {
    std::ofstream out = open_out(dir / "metrics.csv");
    write_metrics_csv(out, m.rows);
  }
  write_metrics_csv(std::cout, m.rows);
  std::cerr << "replicates: " << m.n_ok << " ok, " << m.n_failed << " failed\n";
  return 0;
}

struct FitStreamOpts {
  std::string state, batch;
  double t = 0.0;
  bool init = false;
  std::optional<std::string> family;
  std::optional<int> s_count;
  std::optional<double> q;
  std::optional<std::string> q_grid;
  double horizon = 200.0;
  double level = 0.95;
  std::optional<std::string> out;
  std::optional<double> tol;
  std::optional<int> max_iter;
  bool check_h = false;
};

int run_fit_stream(const FitStreamOpts& o) {
  const fs::path state_path(o.state);
  const FileLock lock(state_path);
  std::optional<fs::path> out_path;
  if (o.out)
    out_path = fs::path(*o.out);

  if (o.init) {
    if (fs::exists(state_path))
      throw ValidationError("state file '" + o.state + "' already exists; omit --init to update it");
    const Family family = parse_family(o.family.value_or("gaussian"));
    IngestedBatch in = ingest_batch(o.batch, family);
    if (in.t != o.t)
      throw ValidationError("--t " + format_double(o.t) + " disagrees with t = " +
                            format_double(in.t) + " in '" + o.batch + "'");
    const ModelSpec model{family, static_cast<int>(in.covariates.size()), o.s_count.value_or(2)};
    SolverConfig config;
    if (o.tol)
      config.tol = *o.tol;
    if (o.max_iter)
      config.max_iter = *o.max_iter;
    config.check_h_pd = o.check_h;
    const QMode q_mode = o.q ? QMode::fixed(*o.q)
                             : QMode::adaptive(parse_grid_spec(o.q_grid.value_or("0.1,1,20"),
                                                               o.horizon));
    StreamState st{init_stream(model, in.batches, o.t, q_mode, config), in.covariates};
    print_warnings(st.engine.diagnostics);
    save_state(state_path, st);
    emit_report(out_path, make_report(st.engine, o.level), st.covariates);
    return 0;
  }

  if (!fs::exists(state_path))
    throw ValidationError("state file '" + o.state + "' does not exist; start a stream with --init");
  StreamState st = load_state(state_path);
  EngineState& s = st.engine;

  // Options repeated on later calls must describe the same stream.
  {
    ModelSpec model = s.model;
    SolverConfig config = s.config;
    QMode q_mode = s.q_mode;
    if (o.family)
      model.family = parse_family(*o.family);
    if (o.s_count)
      model.s_count = *o.s_count;
    if (o.tol)
      config.tol = *o.tol;
    if (o.max_iter)
      config.max_iter = *o.max_iter;
    if (o.check_h)
      config.check_h_pd = true;
    if (o.q)
      q_mode = QMode::fixed(*o.q);
    if (o.q_grid)
      q_mode = QMode::adaptive(parse_grid_spec(*o.q_grid, o.horizon));
    const std::string want = config_hash(stream_config_json(model, config, q_mode, st.covariates));
    const std::string have = config_hash(stream_config_json(s.model, s.config, s.q_mode, st.covariates));
    if (want != have)
      throw ValidationError("options do not match the model stored in '" + o.state +
                            "' (config hash " + want + " vs " + have + ")");
  }

  IngestedBatch in = ingest_batch(o.batch, s.model.family);
  if (in.covariates != st.covariates)
    throw ValidationError("covariate columns of '" + o.batch + "' differ from the stream's");
  if (in.t != o.t)
    throw ValidationError("--t " + format_double(o.t) + " disagrees with t = " +
                          format_double(in.t) + " in '" + o.batch + "'");
  const int expected = s.current().batch_count + 1;
  if (in.batch_index != expected)
    throw ValidationError("'" + o.batch + "' holds batch_index " +
                          std::to_string(in.batch_index) + ", the stream expects " +
                          std::to_string(expected));
  if (!(o.t > s.current().t_prev))
    throw ValidationError("--t " + format_double(o.t) + " must exceed the previous batch time " +
                          format_double(s.current().t_prev));
  update_stream(s, in.batches, o.t);
  print_warnings(s.diagnostics);
  save_state(state_path, st);
  emit_report(out_path, make_report(s, o.level), st.covariates);
  return 0;
}

struct FitOfflineOpts {
  std::string data;
  double q = 0.5;
  std::string family = "gaussian";
  int s_count = 2;
  double level = 0.95;
  std::optional<std::string> out;
};

int run_fit_offline(const FitOfflineOpts& o) {
  const Family family = parse_family(o.family);
  IngestedData in = ingest_cumulative(o.data, family);
  const ModelSpec model{family, static_cast<int>(in.covariates.size()), o.s_count};
  const OfflineFit fit = offline_fit(in.data, o.q, model);
  if (fit.ridged)
    std::cerr << "warning: singular variability or information matrix, ridge applied\n";
  FitReport r = make_report(fit.beta, fit.cov, o.level);
  r.batch_index = static_cast<int>(in.data.batch_count());
  r.t = in.data.times.back();
  r.q_used = o.q;
  r.n_iterations = fit.iterations;
  std::optional<fs::path> out_path;
  if (o.out)
    out_path = fs::path(*o.out);
  emit_report(out_path, r, in.covariates);
  std::cerr << "iterations: " << fit.iterations << ", residual: " << fit.residual << '\n';
  return 0;
}

struct CompareOpts {
  std::string design;
  std::optional<std::string> out;
  std::optional<int> replicates, threads;
};

int run_compare(const CompareOpts& o) {
  SimDesign d = load_design(o.design);
  if (o.replicates)
    d.replicates = *o.replicates;
  if (o.threads)
    d.threads = *o.threads;
  d.validate();
  const Comparison c = compare_designs(d);
  write_comparison_csv(std::cout, c);
  if (o.out) {
    const fs::path dir(*o.out);
    fs::create_directories(dir);
    std::ofstream cmp = open_out(dir / "compare.csv");
    write_comparison_csv(cmp, c);
    std::ofstream ms = open_out(dir / "metrics_streaming.csv");
    write_metrics_csv(ms, c.streaming.rows);
    std::ofstream mi = open_out(dir / "metrics_independence.csv");
    write_metrics_csv(mi, c.independence.rows);
  }
  std::cerr << "streaming: " << c.streaming.n_ok << " ok, " << c.streaming.n_failed
            << " failed; independence: " << c.independence.n_ok << " ok, "
            << c.independence.n_failed << " failed\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming QIF estimation for longitudinal data"};
  app.require_subcommand(1);

  SimulateOpts sim;
  auto* c_sim = app.add_subcommand("simulate", "Monte-Carlo replicates of a design");
  c_sim->add_option("--design", sim.design, "design JSON")->required()->check(CLI::ExistingFile);
  c_sim->add_option("--out", sim.out, "output directory")->required();
  c_sim->add_option("--replicates", sim.replicates, "override the design's replicate count");
  c_sim->add_option("--threads", sim.threads, "worker threads (0: all cores)");

  FitStreamOpts fst;
  auto* c_fst = app.add_subcommand("fit-stream", "absorb one batch into a persisted stream");
  c_fst->add_option("--state", fst.state, "state file")->required();
  c_fst->add_option("--batch", fst.batch, "long CSV holding one batch")
      ->required()
      ->check(CLI::ExistingFile);
  c_fst->add_option("--t", fst.t, "batch time")->required();
  c_fst->add_flag("--init", fst.init, "start a new stream from this batch");
  c_fst->add_option("--family", fst.family, "gaussian | logistic | poisson");
  c_fst->add_option("--s-count", fst.s_count, "1: identity basis only, 2: AR(1) basis")
      ->check(CLI::IsMember({1, 2}));
  auto* q_opt = c_fst->add_option("--q", fst.q, "fixed decay in (0,1)");
  auto* grid_opt = c_fst->add_option("--q-grid", fst.q_grid,
                                     "adaptive decay grid a_min,a_max,count (default 0.1,1,20)");
  q_opt->excludes(grid_opt);
  c_fst->add_option("--horizon", fst.horizon, "B in q = exp(-a B^0.3)")->capture_default_str();
  c_fst->add_option("--level", fst.level, "confidence level")->capture_default_str();
  c_fst->add_option("--out", fst.out, "append report rows to this CSV (default stdout)");
  c_fst->add_option("--tol", fst.tol, "solver tolerance");
  c_fst->add_option("--max-iter", fst.max_iter, "solver iteration cap");
  c_fst->add_flag("--check-h", fst.check_h, "warn when H_b is not positive definite");

  FitOfflineOpts fof;
  auto* c_fof = app.add_subcommand("fit-offline", "dense fit on cumulative data");
  c_fof->add_option("--data", fof.data, "long CSV with every batch")
      ->required()
      ->check(CLI::ExistingFile);
  c_fof->add_option("--q", fof.q, "decay in (0,1)")->required();
  c_fof->add_option("--family", fof.family, "gaussian | logistic | poisson")->capture_default_str();
  c_fof->add_option("--s-count", fof.s_count, "1 or 2")->capture_default_str()->check(CLI::IsMember({1, 2}));
  c_fof->add_option("--level", fof.level, "confidence level")->capture_default_str();
  c_fof->add_option("--out", fof.out, "append report rows to this CSV (default stdout)");

  CompareOpts cmp;
  auto* c_cmp = app.add_subcommand("compare", "AR(1) stream against working independence");
  c_cmp->add_option("--design", cmp.design, "design JSON")->required()->check(CLI::ExistingFile);
  c_cmp->add_option("--out", cmp.out, "output directory");
  c_cmp->add_option("--replicates", cmp.replicates, "override the design's replicate count");
  c_cmp->add_option("--threads", cmp.threads, "worker threads (0: all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (c_sim->parsed())
      return run_simulate(sim);
    if (c_fst->parsed())
      return run_fit_stream(fst);
    if (c_fof->parsed())
      return run_fit_offline(fof);
    if (c_cmp->parsed())
      return run_compare(cmp);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}
