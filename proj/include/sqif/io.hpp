#pragma once

// Long-format CSV ingestion, result writers, design files and the versioned
// engine state file.
//
// Long CSV header: subject_id,batch_index,t,obs_index,y,<covariate>...
// Covariate columns may carry any names; they label the coefficients.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sqif/engine.hpp"
#include "sqif/errors.hpp"
#include "sqif/inference.hpp"
#include "sqif/model.hpp"
#include "sqif/offline.hpp"
#include "sqif/simulate.hpp"

namespace sqif {

// ---------------------------------------------------------------------------
// Scalars.

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty())
    return false;
  if (s.front() == '+')
    s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

inline bool parse_int(std::string_view s, long long& out) {
  if (s.empty())
    return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? comma : comma - start)));
    if (comma == std::string_view::npos)
      break;
    start = comma + 1;
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Collects per-row problems and throws them together.
class RowErrors {
public:
  void add(std::size_t line, const std::string& msg) {
    ++count_;
    if (lines_.size() < kShown)
      lines_.push_back("  line " + std::to_string(line) + ": " + msg);
  }
  void add(const std::string& msg) {
    ++count_;
    if (lines_.size() < kShown)
      lines_.push_back("  " + msg);
  }
  void raise_if_any(const std::string& source) const {
    if (count_ == 0)
      return;
    std::string msg = source + ": " + std::to_string(count_) + " invalid record(s)";
    for (const std::string& l : lines_)
      msg += "\n" + l;
    if (count_ > lines_.size())
      msg += "\n  ...";
    throw ValidationError(msg);
  }

private:
  static constexpr std::size_t kShown = 20;
  std::vector<std::string> lines_;
  std::size_t count_ = 0;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Long CSV ingestion.

inline constexpr std::string_view kLongKeyColumns[] = {"subject_id", "batch_index", "t",
                                                       "obs_index", "y"};

struct LongTable {
  std::vector<std::string> covariates;
  std::map<long long, double> times;               ///< batch_index -> t
  std::map<long long, SubjectBatches> batches;     ///< batch_index -> subjects
};

/// Parses and validates a long-format CSV text. `source` names it in errors.
inline LongTable parse_long_csv(std::string_view text, Family family,
                                const std::string& source = "input") {
  std::vector<std::string_view> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t nl = text.find('\n', start);
      if (nl == std::string_view::npos)
        nl = text.size();
      lines.push_back(text.substr(start, nl - start));
      start = nl + 1;
    }
  }
  std::size_t header_at = 0;
  while (header_at < lines.size() && detail::trim(lines[header_at]).empty())
    ++header_at;
  if (header_at == lines.size())
    throw ValidationError(source + ": no records");

  const auto header = detail::split_csv(lines[header_at]);
  if (header.size() < 6)
    throw ValidationError(source + ": header needs subject_id,batch_index,t,obs_index,y and "
                                   "at least one covariate column");
  for (std::size_t k = 0; k < 5; ++k)
    if (header[k] != kLongKeyColumns[k])
      throw ValidationError(source + ": header column " + std::to_string(k + 1) + " is '" +
                            std::string(header[k]) + "', expected '" +
                            std::string(kLongKeyColumns[k]) + "'");
  LongTable table;
  for (std::size_t k = 5; k < header.size(); ++k) {
    if (header[k].empty())
      throw ValidationError(source + ": empty covariate name in header");
    table.covariates.emplace_back(header[k]);
  }
  const std::size_t p = table.covariates.size();

  struct Rec {
    std::size_t line;
    long long obs;
    double y;
    std::vector<double> x;
  };
  std::map<long long, std::map<std::string, std::vector<Rec>>> grouped;
  std::map<long long, std::pair<double, std::size_t>> t_seen;
  detail::RowErrors errors;
  std::size_t records = 0;

  for (std::size_t li = header_at + 1; li < lines.size(); ++li) {
    if (detail::trim(lines[li]).empty())
      continue;
    ++records;
    const std::size_t line_no = li + 1;
    const auto f = detail::split_csv(lines[li]);
    if (f.size() != header.size()) {
      errors.add(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                              std::to_string(f.size()));
      continue;
    }
    Rec rec{line_no, 0, 0.0, std::vector<double>(p)};
    long long batch_index = 0;
    double t = 0.0;
    bool ok = true;
    if (f[0].empty()) {
      errors.add(line_no, "empty subject_id");
      ok = false;
    }
    if (!parse_int(f[1], batch_index) || batch_index < 1) {
      errors.add(line_no, "batch_index '" + std::string(f[1]) + "' is not an integer >= 1");
      ok = false;
    }
    if (!parse_double(f[2], t)) {
      errors.add(line_no, "t '" + std::string(f[2]) + "' is not a finite number");
      ok = false;
    }
    if (!parse_int(f[3], rec.obs) || rec.obs < 1) {
      errors.add(line_no, "obs_index '" + std::string(f[3]) + "' is not an integer >= 1");
      ok = false;
    }
    if (!parse_double(f[4], rec.y)) {
      errors.add(line_no, "y '" + std::string(f[4]) + "' is not a finite number");
      ok = false;
    }
    for (std::size_t c = 0; c < p; ++c)
      if (!parse_double(f[5 + c], rec.x[c])) {
        errors.add(line_no, table.covariates[c] + " '" + std::string(f[5 + c]) +
                                "' is not a finite number");
        ok = false;
      }
    if (ok) {
      if (family == Family::BernoulliLogit && rec.y != 0.0 && rec.y != 1.0) {
        errors.add(line_no, "y = " + std::string(f[4]) + " outside {0,1} for the logistic family");
        ok = false;
      }
      if (family == Family::PoissonLog && (rec.y < 0.0 || rec.y != std::floor(rec.y))) {
        errors.add(line_no,
                   "y = " + std::string(f[4]) + " is not a nonnegative integer for the Poisson family");
        ok = false;
      }
    }
    if (!ok)
      continue;
    auto [it, fresh] = t_seen.emplace(batch_index, std::make_pair(t, line_no));
    if (!fresh && it->second.first != t) {
      errors.add(line_no, "t = " + std::string(f[2]) + " differs from t of batch " +
                              std::to_string(batch_index) + " at line " +
                              std::to_string(it->second.second));
      continue;
    }
    grouped[batch_index][std::string(f[0])].push_back(std::move(rec));
  }
  if (records == 0)
    throw ValidationError(source + ": no records");
  errors.raise_if_any(source);

  // Keys, contiguity and subject coverage.
  std::set<std::string> all_subjects;
  for (const auto& [bi, subjects] : grouped)
    for (const auto& [id, recs] : subjects)
      all_subjects.insert(id);
  for (auto& [bi, subjects] : grouped) {
    for (const std::string& id : all_subjects)
      if (!subjects.count(id))
        errors.add("subject '" + id + "' missing from batch " + std::to_string(bi));
    for (auto& [id, recs] : subjects) {
      std::stable_sort(recs.begin(), recs.end(),
                       [](const Rec& a, const Rec& b) { return a.obs < b.obs; });
      long long expected = 1;
      for (std::size_t k = 0; k < recs.size(); ++k) {
        if (k > 0 && recs[k].obs == recs[k - 1].obs) {
          errors.add(recs[k].line, "duplicate key (" + id + ", " + std::to_string(bi) + ", " +
                                       std::to_string(recs[k].obs) + "), first seen at line " +
                                       std::to_string(recs[k - 1].line));
          continue;
        }
        if (recs[k].obs != expected) {
          errors.add(recs[k].line, "obs_index " + std::to_string(recs[k].obs) + " of (" + id +
                                       ", batch " + std::to_string(bi) + ") should be " +
                                       std::to_string(expected) + " for a contiguous run from 1");
          break;
        }
        ++expected;
      }
    }
  }
  errors.raise_if_any(source);

  for (auto& [bi, subjects] : grouped) {
    table.times[bi] = t_seen.at(bi).first;
    SubjectBatches& out = table.batches[bi];
    for (auto& [id, recs] : subjects) {
      Batch b;
      b.subject_id = id;
      b.batch_index = static_cast<int>(bi);
      b.t = table.times[bi];
      const auto n = static_cast<Eigen::Index>(recs.size());
      b.X.resize(n, static_cast<Eigen::Index>(p));
      b.y.resize(n);
      for (Eigen::Index k = 0; k < n; ++k) {
        const Rec& r = recs[static_cast<std::size_t>(k)];
        b.y[k] = r.y;
        for (std::size_t c = 0; c < p; ++c)
          b.X(k, static_cast<Eigen::Index>(c)) = r.x[c];
      }
      out.emplace(id, std::move(b));
    }
  }
  return table;
}

inline LongTable read_long_csv(const std::filesystem::path& path, Family family) {
  return parse_long_csv(detail::read_file(path), family, path.string());
}

struct IngestedBatch {
  int batch_index = 0;
  double t = 0.0;
  std::vector<std::string> covariates;
  SubjectBatches batches;
};

/// One batch of a stream: the file must hold exactly one batch_index.
inline IngestedBatch ingest_batch(const std::filesystem::path& path, Family family) {
  LongTable table = read_long_csv(path, family);
  if (table.batches.size() != 1)
    throw ValidationError(path.string() + ": expected a single batch_index, found " +
                          std::to_string(table.batches.size()));
  IngestedBatch out;
  out.batch_index = static_cast<int>(table.batches.begin()->first);
  out.t = table.times.begin()->second;
  out.covariates = std::move(table.covariates);
  out.batches = std::move(table.batches.begin()->second);
  return out;
}

struct IngestedData {
  std::vector<std::string> covariates;
  CumulativeData data;
};

/// Every batch in the file, ordered by batch_index.
inline IngestedData ingest_cumulative(const std::filesystem::path& path, Family family) {
  LongTable table = read_long_csv(path, family);
  IngestedData out;
  out.covariates = std::move(table.covariates);
  for (auto& [bi, subjects] : table.batches) {
    out.data.times.push_back(table.times.at(bi));
    out.data.rounds.push_back(std::move(subjects));
  }
  for (std::size_t j = 1; j < out.data.times.size(); ++j)
    if (!(out.data.times[j] > out.data.times[j - 1]))
      throw ValidationError(path.string() + ": batch times must increase with batch_index");
  return out;
}

// ---------------------------------------------------------------------------
// Writers.

/// `first_index` is the batch_index written for data.rounds[0].
inline void write_long_csv(std::ostream& os, const CumulativeData& data,
                           const std::vector<std::string>& covariates, int first_index = 1) {
  os << "subject_id,batch_index,t,obs_index,y";
  for (const std::string& c : covariates)
    os << ',' << c;
  os << '\n';
  for (std::size_t j = 0; j < data.batch_count(); ++j) {
    const std::string t = format_double(data.times[j]);
    for (const auto& [id, batch] : data.rounds[j])
      for (Eigen::Index k = 0; k < batch.size(); ++k) {
        os << id << ',' << (static_cast<int>(j) + first_index) << ',' << t << ',' << (k + 1) << ','
           << format_double(batch.y[k]);
        for (Eigen::Index c = 0; c < batch.X.cols(); ++c)
          os << ',' << format_double(batch.X(k, c));
        os << '\n';
      }
  }
}

inline constexpr std::string_view kReportHeader =
    "batch_index,t,coefficient,estimate,std_err,ci_lower,ci_upper,z,p_value,q_used";

inline void write_report_rows(std::ostream& os, const FitReport& r,
                              const std::vector<std::string>& labels) {
  for (Eigen::Index k = 0; k < r.beta.size(); ++k) {
    const auto uk = static_cast<std::size_t>(k);
    os << r.batch_index << ',' << format_double(r.t) << ','
       << (uk < labels.size() ? labels[uk] : "b" + std::to_string(k + 1)) << ','
       << format_double(r.beta[k]) << ',' << format_double(r.std_err[k]) << ','
       << format_double(r.ci_lower[k]) << ',' << format_double(r.ci_upper[k]) << ','
       << format_double(r.wald_z[k]) << ',' << format_double(r.p_values[k]) << ','
       << format_double(r.q_used) << '\n';
  }
}

inline constexpr std::string_view kMetricsHeader = "coefficient,rmse,ese,bias,cp,len";

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const MetricsRow& r : rows)
    os << r.coefficient << ',' << format_double(r.rmse) << ',' << format_double(r.ese) << ','
       << format_double(r.bias) << ',' << format_double(r.cp) << ',' << format_double(r.len)
       << '\n';
}

inline constexpr std::string_view kCompareHeader =
    "coefficient,len_streaming,len_independence,ratio";

inline void write_comparison_csv(std::ostream& os, const Comparison& c) {
  os << kCompareHeader << '\n';
  for (const ComparisonRow& r : c.rows)
    os << r.coefficient << ',' << format_double(r.len_streaming) << ','
       << format_double(r.len_independence) << ',' << format_double(r.ratio) << '\n';
}

/// Writes `content` to a sibling temporary and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw ValidationError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out)
      throw ValidationError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw ValidationError("cannot replace '" + path.string() + "': " + ec.message());
  }
}

/// Exclusive advisory lock on `<path>.lock`, held for the object's lifetime.
class FileLock {
public:
  explicit FileLock(const std::filesystem::path& path) {
    std::filesystem::path lock = path;
    lock += ".lock";
    fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0)
      throw ValidationError("cannot open lock file '" + lock.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ValidationError("state file '" + path.string() + "' is locked by another process");
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

private:
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// State file.

inline constexpr int kStateFormatVersion = 1;
inline constexpr std::string_view kStateSchema = "sqif.engine-state";

using json = nlohmann::json;

namespace detail {

inline std::string hex_double(double v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = digits[bits & 0xf];
    bits >>= 4;
  }
  return out;
}

inline double unhex_double(const json& j) {
  if (!j.is_string() || j.get_ref<const std::string&>().size() != 16)
    throw ValidationError("state file: malformed number encoding");
  const std::string& s = j.get_ref<const std::string&>();
  std::uint64_t bits = 0;
  const auto res = std::from_chars(s.data(), s.data() + 16, bits, 16);
  if (res.ec != std::errc() || res.ptr != s.data() + 16)
    throw ValidationError("state file: malformed number encoding '" + s + "'");
  return std::bit_cast<double>(bits);
}

inline json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k)
    a.push_back(hex_double(v[k]));
  return a;
}

inline Eigen::VectorXd json_vec(const json& a) {
  if (!a.is_array())
    throw ValidationError("state file: expected a vector");
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t k = 0; k < a.size(); ++k)
    v[static_cast<Eigen::Index>(k)] = unhex_double(a[k]);
  return v;
}

inline json mat_json(const Eigen::MatrixXd& m) {
  json o;
  o["rows"] = m.rows();
  o["cols"] = m.cols();
  json a = json::array();
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      a.push_back(hex_double(m(r, c)));
  o["data"] = std::move(a);
  return o;
}

inline Eigen::MatrixXd json_mat(const json& o) {
  const auto rows = o.at("rows").get<Eigen::Index>();
  const auto cols = o.at("cols").get<Eigen::Index>();
  const json& a = o.at("data");
  if (rows < 0 || cols < 0 || !a.is_array() || a.size() != static_cast<std::size_t>(rows * cols))
    throw ValidationError("state file: malformed matrix");
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r)
      m(r, c) = unhex_double(a[k++]);
  return m;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

} // namespace detail

/// Canonical description of everything that must stay fixed along a stream.
inline json stream_config_json(const ModelSpec& model, const SolverConfig& config,
                               const QMode& q_mode, const std::vector<std::string>& covariates) {
  json j;
  j["family"] = std::string(family_name(model.family));
  j["p"] = model.p;
  j["s_count"] = model.s_count;
  j["covariates"] = covariates;
  j["solver"] = {{"tol", detail::hex_double(config.tol)},
                 {"max_iter", config.max_iter},
                 {"ridge_eps", detail::hex_double(config.ridge_eps)},
                 {"damping", detail::hex_double(config.damping)},
                 {"check_h_pd", config.check_h_pd}};
  if (q_mode.kind == QMode::Kind::Fixed) {
    j["q_mode"] = {{"kind", "fixed"}, {"q", detail::hex_double(q_mode.q)}};
  } else {
    json c = json::array();
    for (double q : q_mode.candidates)
      c.push_back(detail::hex_double(q));
    j["q_mode"] = {{"kind", "adaptive"}, {"candidates", std::move(c)}};
  }
  return j;
}

inline std::string config_hash(const json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(config.dump())));
  return buf;
}

/// Engine state plus the covariate labels it was started with.
struct StreamState {
  EngineState engine;
  std::vector<std::string> covariates;
};

inline json state_to_json(const StreamState& st) {
  const EngineState& s = st.engine;
  json j;
  j["format_version"] = kStateFormatVersion;
  j["schema"] = std::string(kStateSchema);
  const json cfg = stream_config_json(s.model, s.config, s.q_mode, st.covariates);
  j["config"] = cfg;
  j["config_hash"] = config_hash(cfg);
  j["selected"] = s.selected;
  json bundles = json::array();
  for (const Bundle& b : s.bundles) {
    json o;
    o["q"] = detail::hex_double(b.q);
    o["beta"] = detail::vec_json(b.beta);
    o["t_prev"] = detail::hex_double(b.t_prev);
    o["batch_count"] = b.batch_count;
    o["n_cumulative"] = detail::hex_double(b.n_cumulative);
    o["iterations"] = b.iterations;
    o["ridged"] = b.ridged;
    o["criterion"] = detail::hex_double(b.criterion);
    o["system"] = {{"u", detail::vec_json(b.system.u)},
                   {"s", detail::mat_json(b.system.s)},
                   {"v", detail::mat_json(b.system.v)}};
    json subjects = json::object();
    for (const auto& [id, sum] : b.subjects)
      subjects[id] = {{"u_tilde", detail::vec_json(sum.u_tilde)},
                      {"s_tilde", detail::mat_json(sum.s_tilde)},
                      {"last_x", detail::vec_json(sum.last_obs.x)},
                      {"last_y", detail::hex_double(sum.last_obs.y)}};
    o["subjects"] = std::move(subjects);
    bundles.push_back(std::move(o));
  }
  j["bundles"] = std::move(bundles);
  return j;
}

inline StreamState state_from_json(const json& j) {
  if (!j.is_object() || !j.contains("format_version") || !j.contains("schema"))
    throw ValidationError("state file: missing format_version or schema");
  if (j.at("schema") != kStateSchema)
    throw ValidationError("state file: unknown schema '" + j.at("schema").dump() + "'");
  const int version = j.at("format_version").get<int>();
  if (version != kStateFormatVersion)
    throw ValidationError("state file: format_version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kStateFormatVersion) +
                          ")");
  const json& cfg = j.at("config");
  if (config_hash(cfg) != j.at("config_hash").get<std::string>())
    throw ValidationError("state file: config hash does not match its config block");

  StreamState st;
  EngineState& s = st.engine;
  s.model.family = parse_family(cfg.at("family").get<std::string>());
  s.model.p = cfg.at("p").get<int>();
  s.model.s_count = cfg.at("s_count").get<int>();
  st.covariates = cfg.at("covariates").get<std::vector<std::string>>();
  const json& sv = cfg.at("solver");
  s.config.tol = detail::unhex_double(sv.at("tol"));
  s.config.max_iter = sv.at("max_iter").get<int>();
  s.config.ridge_eps = detail::unhex_double(sv.at("ridge_eps"));
  s.config.damping = detail::unhex_double(sv.at("damping"));
  s.config.check_h_pd = sv.at("check_h_pd").get<bool>();
  const json& qm = cfg.at("q_mode");
  if (qm.at("kind") == "fixed") {
    s.q_mode = QMode::fixed(detail::unhex_double(qm.at("q")));
  } else if (qm.at("kind") == "adaptive") {
    std::vector<double> c;
    for (const json& e : qm.at("candidates"))
      c.push_back(detail::unhex_double(e));
    s.q_mode = QMode::adaptive(std::move(c));
  } else {
    throw ValidationError("state file: unknown q mode");
  }
  BasisSet{s.model.s_count};
  s.config.validate();
  s.q_mode.validate();

  const Eigen::Index p = s.model.p, d = s.model.score_dim();
  for (const json& o : j.at("bundles")) {
    Bundle b;
    b.q = detail::unhex_double(o.at("q"));
    b.beta = detail::json_vec(o.at("beta"));
    b.t_prev = detail::unhex_double(o.at("t_prev"));
    b.batch_count = o.at("batch_count").get<int>();
    b.n_cumulative = detail::unhex_double(o.at("n_cumulative"));
    b.iterations = o.at("iterations").get<int>();
    b.ridged = o.at("ridged").get<bool>();
    b.criterion = detail::unhex_double(o.at("criterion"));
    const json& sys = o.at("system");
    b.system.u = detail::json_vec(sys.at("u"));
    b.system.s = detail::json_mat(sys.at("s"));
    b.system.v = detail::json_mat(sys.at("v"));
    if (b.beta.size() != p || b.system.u.size() != d || b.system.s.rows() != d ||
        b.system.s.cols() != p || b.system.v.rows() != d || b.system.v.cols() != d)
      throw ValidationError("state file: bundle dimensions do not match the model");
    for (const auto& [id, e] : o.at("subjects").items()) {
      SubjectSummary sum{detail::json_vec(e.at("u_tilde")), detail::json_mat(e.at("s_tilde")),
                         Observation{detail::json_vec(e.at("last_x")),
                                     detail::unhex_double(e.at("last_y"))}};
      if (sum.u_tilde.size() != d || sum.s_tilde.rows() != d || sum.s_tilde.cols() != p ||
          sum.last_obs.x.size() != p)
        throw ValidationError("state file: summary of subject '" + id +
                              "' does not match the model");
      b.subjects.emplace(id, std::move(sum));
    }
    s.bundles.push_back(std::move(b));
  }
  if (s.bundles.empty())
    throw ValidationError("state file: no bundles");
  s.selected = j.at("selected").get<std::size_t>();
  if (s.selected >= s.bundles.size())
    throw ValidationError("state file: selected bundle out of range");
  const std::size_t expected =
      s.q_mode.kind == QMode::Kind::Fixed ? 1 : s.q_mode.candidates.size();
  if (s.bundles.size() != expected)
    throw ValidationError("state file: bundle count does not match the q mode");
  return st;
}

inline std::string dump_state(const StreamState& st) { return state_to_json(st).dump(1) + "\n"; }

inline StreamState parse_state(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("state file: ") + e.what());
  }
  try {
    return state_from_json(j);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("state file: ") + e.what());
  }
}

inline void save_state(const std::filesystem::path& path, const StreamState& st) {
  atomic_write(path, dump_state(st));
}

inline StreamState load_state(const std::filesystem::path& path) {
  return parse_state(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Design files.

/// Reads a simulation design. Unlisted fields keep their defaults; the
/// default beta path follows the family.
inline SimDesign parse_design(std::string_view text, const std::string& source = "design") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(source + ": " + e.what());
  }
  if (!j.is_object())
    throw ValidationError(source + ": expected a JSON object");
  static const std::set<std::string> known{
      "family", "m",      "b",       "n",       "sigma2", "rho",   "seed",     "replicates",
      "beta_path", "q_fixed", "q_grid", "s_count", "level", "threads", "solver"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key))
      throw ValidationError(source + ": unknown field '" + key + "'");
  SimDesign d;
  try {
    if (j.contains("family")) {
      d.family = parse_family(j["family"].get<std::string>());
      d.beta_path = default_beta_path(d.family);
    }
    d.m = j.value("m", d.m);
    d.b = j.value("b", d.b);
    d.n = j.value("n", d.n);
    d.sigma2 = j.value("sigma2", d.sigma2);
    d.rho = j.value("rho", d.rho);
    d.seed = j.value("seed", d.seed);
    d.replicates = j.value("replicates", d.replicates);
    if (j.contains("beta_path"))
      d.beta_path = parse_beta_path(j["beta_path"].get<std::string>());
    d.s_count = j.value("s_count", d.s_count);
    d.level = j.value("level", d.level);
    d.threads = j.value("threads", d.threads);
    if (j.contains("q_fixed") && j.contains("q_grid"))
      throw ValidationError(source + ": give q_fixed or q_grid, not both");
    if (j.contains("q_fixed")) {
      d.q_mode = QMode::fixed(j["q_fixed"].get<double>());
    } else {
      const json g = j.value("q_grid", json::object());
      d.q_mode = QMode::adaptive(q_candidate_grid(
          g.value("a_min", 0.1), g.value("a_max", 1.0), g.value("count", 20),
          g.value("horizon", static_cast<double>(d.b))));
    }
    if (j.contains("solver")) {
      const json& s = j["solver"];
      d.solver.tol = s.value("tol", d.solver.tol);
      d.solver.max_iter = s.value("max_iter", d.solver.max_iter);
      d.solver.ridge_eps = s.value("ridge_eps", d.solver.ridge_eps);
      d.solver.damping = s.value("damping", d.solver.damping);
      d.solver.check_h_pd = s.value("check_h_pd", d.solver.check_h_pd);
    }
  } catch (const json::exception& e) {
    throw ValidationError(source + ": " + e.what());
  }
  d.validate();
  return d;
}

inline SimDesign load_design(const std::filesystem::path& path) {
  return parse_design(detail::read_file(path), path.string());
}

} // namespace sqif
