#pragma once

// CSV ingestion/emission, the JSON run configuration and run manifests.

#include <bfpca/inference.hpp>
#include <bfpca/multilevel.hpp>
#include <bfpca/sampler.hpp>

#include <json.hpp>
#include <openssl/evp.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bfpca {

using json = nlohmann::ordered_json;

#ifndef BFPCA_VERSION
#define BFPCA_VERSION "0.1.0"
#endif

inline constexpr const char* kVersion = BFPCA_VERSION;

// ---------------------------------------------------------------------------
// Numbers

/// 17 significant digits: round-trips every double.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_number(std::string_view cell, std::size_t line, std::size_t column) {
  const auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  };
  cell = trim(cell);
  const std::string where = "line " + std::to_string(line) + ", column " + std::to_string(column);
  if (cell.empty()) throw ValidationError(where + ": missing value");
  if (cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw ValidationError(where + ": non-numeric value '" + std::string(cell) + "'");
  if (!std::isfinite(v)) throw ValidationError(where + ": non-finite value");
  return v;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out)
    if (!c.empty() && c.back() == '\r') c.pop_back();
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line per row
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (t.header.empty()) {
      t.header = split_csv(line);
      continue;
    }
    auto cells = split_csv(line);
    if (cells.size() != t.header.size())
      throw ValidationError("line " + std::to_string(number) + ": expected " + std::to_string(t.header.size()) +
                            " cells, found " + std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(number);
  }
  if (t.header.empty()) throw ValidationError("'" + path + "' is empty");
  return t;
}

inline Grid grid_from_header(const std::vector<std::string>& header, std::size_t first) {
  std::vector<double> pts;
  for (std::size_t c = first; c < header.size(); ++c) pts.push_back(parse_number(header[c], 1, c + 1));
  return Grid(std::move(pts));
}

}  // namespace detail

/// Header "id,t_1,...,t_M"; one curve per row.
inline FunctionalDataset read_functional_csv(const std::string& path) {
  const auto t = detail::read_csv(path);
  if (t.header.size() < 3) throw ValidationError("header needs an id column and at least 2 grid times");
  FunctionalDataset d;
  d.grid = detail::grid_from_header(t.header, 1);
  const Index m = static_cast<Index>(d.grid.size());
  d.Y.resize(static_cast<Index>(t.rows.size()), m);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    d.ids.push_back(t.rows[r][0]);
    for (Index c = 0; c < m; ++c)
      d.Y(static_cast<Index>(r), c) = parse_number(t.rows[r][static_cast<std::size_t>(c) + 1], t.line_numbers[r], static_cast<std::size_t>(c) + 2);
  }
  if (d.Y.rows() == 0) throw ValidationError("no data rows in '" + path + "'");
  return d;
}

/// Header "subject,visit,t_1,...,t_M". When `keep_visits` is non-empty only
/// those visit labels are retained; every subject must keep at least one row.
inline MultilevelDataset read_multilevel_csv(const std::string& path, const std::vector<std::string>& keep_visits = {}) {
  const auto t = detail::read_csv(path);
  if (t.header.size() < 4) throw ValidationError("header needs subject, visit and at least 2 grid times");
  MultilevelDataset d;
  d.grid = detail::grid_from_header(t.header, 2);
  const Index m = static_cast<Index>(d.grid.size());
  std::map<std::string, Index> subj, vis;
  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& s = t.rows[r][0];
    if (s.empty()) throw ValidationError("line " + std::to_string(t.line_numbers[r]) + ": empty subject key");
    if (!subj.count(s)) {
      subj.emplace(s, static_cast<Index>(d.subject_ids.size()));
      d.subject_ids.push_back(s);
    }
    const std::string& v = t.rows[r][1];
    if (!keep_visits.empty() && std::find(keep_visits.begin(), keep_visits.end(), v) == keep_visits.end()) continue;
    kept.push_back(r);
  }
  for (std::size_t r : kept) {
    const std::string& v = t.rows[r][1];
    if (!vis.count(v)) {
      vis.emplace(v, static_cast<Index>(d.visit_ids.size()));
      d.visit_ids.push_back(v);
    }
  }
  d.Y.resize(static_cast<Index>(kept.size()), m);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const std::size_t r = kept[k];
    d.subject.push_back(subj.at(t.rows[r][0]));
    d.visit.push_back(vis.at(t.rows[r][1]));
    for (Index c = 0; c < m; ++c)
      d.Y(static_cast<Index>(k), c) = parse_number(t.rows[r][static_cast<std::size_t>(c) + 2], t.line_numbers[r], static_cast<std::size_t>(c) + 3);
  }
  std::vector<int> count(d.subject_ids.size(), 0);
  for (Index s : d.subject) ++count[static_cast<std::size_t>(s)];
  for (std::size_t i = 0; i < count.size(); ++i)
    if (count[i] == 0) throw ValidationError("subject '" + d.subject_ids[i] + "' has no visits after filtering");
  d.validate();
  return d;
}

namespace detail {

inline std::string grid_header(const Grid& grid) {
  std::string h;
  for (double t : grid.points()) h += "," + fmt(t);
  return h;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace detail

inline void write_functional_csv(const FunctionalDataset& d, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "id" << detail::grid_header(d.grid) << "\n";
  for (Index i = 0; i < d.N(); ++i) {
    out << (d.ids.empty() ? std::to_string(i + 1) : d.ids[static_cast<std::size_t>(i)]);
    for (Index m = 0; m < d.M(); ++m) out << "," << fmt(d.Y(i, m));
    out << "\n";
  }
}

inline void write_multilevel_csv(const MultilevelDataset& d, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "subject,visit" << detail::grid_header(d.grid) << "\n";
  for (Index r = 0; r < d.rows(); ++r) {
    out << d.subject_ids[static_cast<std::size_t>(d.subject[static_cast<std::size_t>(r)])] << ","
        << d.visit_ids[static_cast<std::size_t>(d.visit[static_cast<std::size_t>(r)])];
    for (Index m = 0; m < d.M(); ++m) out << "," << fmt(d.Y(r, m));
    out << "\n";
  }
}

/// One row per retained draw: chain, iteration, then the flattened block (column-major).
struct BlockWriter {
  std::ofstream out;

  BlockWriter(const std::filesystem::path& path, const std::vector<std::string>& columns) : out(detail::open_out(path)) {
    out << "chain,iteration";
    for (const auto& c : columns) out << "," << c;
    out << "\n";
  }

  void row(int chain, int iteration, const Matrix& values) {
    out << chain << "," << iteration;
    for (Index j = 0; j < values.cols(); ++j)
      for (Index i = 0; i < values.rows(); ++i) out << "," << fmt(values(i, j));
    out << "\n";
  }
};

inline std::vector<std::string> matrix_columns(const std::string& name, Index rows, Index cols) {
  std::vector<std::string> out;
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out.push_back(name + "_" + std::to_string(i + 1) + "_" + std::to_string(j + 1));
  return out;
}

inline std::vector<std::string> vector_columns(const std::string& name, Index n) {
  std::vector<std::string> out;
  for (Index i = 0; i < n; ++i) out.push_back(name + "_" + std::to_string(i + 1));
  return out;
}

inline void write_samples(const PosteriorSamples& samples, const std::filesystem::path& dir) {
  if (samples.draws.empty()) return;
  const FpcaState& f = samples.draws.front().state;
  const Index q = f.Q(), k = f.K(), n = f.Xi.rows();
  BlockWriter w(dir / "samples_w_mu.csv", vector_columns("w_mu", q));
  BlockWriter x(dir / "samples_x.csv", matrix_columns("x", q, k));
  BlockWriter psi(dir / "samples_psi.csv", matrix_columns("psi", q, k));
  BlockWriter xi(dir / "samples_xi.csv", matrix_columns("xi", n, k));
  BlockWriter lam(dir / "samples_lambda.csv", vector_columns("lambda", k));
  auto hcols = vector_columns("h", k);
  hcols.insert(hcols.begin(), "h_mu");
  BlockWriter h(dir / "samples_h.csv", hcols);
  BlockWriter s2(dir / "samples_sigma2.csv", {"sigma2"});
  for (const auto& d : samples.draws) {
    const FpcaState& s = d.state;
    w.row(d.chain, d.iteration, s.w_mu);
    x.row(d.chain, d.iteration, s.X);
    psi.row(d.chain, d.iteration, s.Psi);
    xi.row(d.chain, d.iteration, s.Xi);
    lam.row(d.chain, d.iteration, s.lambda);
    Vector hv(k + 1);
    hv << s.h_mu, s.h;
    h.row(d.chain, d.iteration, hv);
    s2.row(d.chain, d.iteration, Vector::Constant(1, s.sigma2));
  }
}

inline void write_multilevel_samples(const MultilevelSamples& samples, const std::filesystem::path& dir) {
  if (samples.draws.empty()) return;
  const MfpcaState& f = samples.draws.front().state;
  const Index q = f.Q(), k1 = f.K1(), k2 = f.K2();
  BlockWriter w(dir / "samples_w_mu.csv", vector_columns("w_mu", q));
  BlockWriter psi1(dir / "samples_psi1.csv", matrix_columns("psi1", q, k1));
  BlockWriter psi2(dir / "samples_psi2.csv", matrix_columns("psi2", q, k2));
  BlockWriter xi(dir / "samples_xi.csv", matrix_columns("xi", f.Xi.rows(), k1));
  BlockWriter zeta(dir / "samples_zeta.csv", matrix_columns("zeta", f.Zeta.rows(), k2));
  BlockWriter lam1(dir / "samples_lambda1.csv", vector_columns("lambda1", k1));
  BlockWriter lam2(dir / "samples_lambda2.csv", vector_columns("lambda2", k2));
  auto hcols = vector_columns("h1", k1);
  for (auto& c : vector_columns("h2", k2)) hcols.push_back(c);
  hcols.insert(hcols.begin(), "h_mu");
  if (f.has_eta()) hcols.push_back("h_eta");
  BlockWriter h(dir / "samples_h.csv", hcols);
  BlockWriter s2(dir / "samples_sigma2.csv", {"sigma2"});
  std::optional<BlockWriter> eta;
  if (f.has_eta()) eta.emplace(dir / "samples_eta.csv", matrix_columns("eta", f.eta.rows(), q));
  for (const auto& d : samples.draws) {
    const MfpcaState& s = d.state;
    w.row(d.chain, d.iteration, s.w_mu);
    psi1.row(d.chain, d.iteration, s.Psi1);
    psi2.row(d.chain, d.iteration, s.Psi2);
    xi.row(d.chain, d.iteration, s.Xi);
    zeta.row(d.chain, d.iteration, s.Zeta);
    lam1.row(d.chain, d.iteration, s.lambda1);
    lam2.row(d.chain, d.iteration, s.lambda2);
    Vector hv(1 + k1 + k2 + (s.has_eta() ? 1 : 0));
    hv(0) = s.h_mu;
    hv.segment(1, k1) = s.h1;
    hv.segment(1 + k1, k2) = s.h2;
    if (s.has_eta()) hv(hv.size() - 1) = s.h_eta;
    h.row(d.chain, d.iteration, hv);
    s2.row(d.chain, d.iteration, Vector::Constant(1, s.sigma2));
    if (eta) eta->row(d.chain, d.iteration, s.eta);
  }
}

inline void write_band(const Band& b, const Vector& grid, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "t,mean,lo95,hi95\n";
  for (Index m = 0; m < b.size(); ++m) out << fmt(grid(m)) << "," << fmt(b.mean(m)) << "," << fmt(b.lo(m)) << "," << fmt(b.hi(m)) << "\n";
}

/// summary_{function}.csv per function, eigenvalues.csv and scores.csv.
inline void write_summary(const FunctionalSummary& s, const std::filesystem::path& dir,
                          const std::vector<std::string>& unit_ids = {}) {
  write_band(s.mu, s.grid, dir / "summary_mu.csv");
  auto eig = detail::open_out(dir / "eigenvalues.csv");
  eig << "component,mean,lo95,hi95,pve_mean,pve_lo95,pve_hi95\n";
  auto sc = detail::open_out(dir / "scores.csv");
  sc << "component,unit,mean,lo95,hi95\n";
  auto level = [&](const ComponentSummary& c, const std::string& tag) {
    const Matrix mean = c.score_mean(), lo = c.score_lo(), hi = c.score_hi();
    for (Index k = 0; k < c.K(); ++k) {
      const std::string name = tag + "_" + std::to_string(k + 1);
      write_band(c.phi[static_cast<std::size_t>(k)], s.grid, dir / ("summary_" + name + ".csv"));
      const auto& l = c.lambda[static_cast<std::size_t>(k)];
      const auto& p = c.pve[static_cast<std::size_t>(k)];
      eig << name << "," << fmt(l.mean) << "," << fmt(l.lo) << "," << fmt(l.hi) << "," << fmt(p.mean) << "," << fmt(p.lo)
          << "," << fmt(p.hi) << "\n";
      for (Index i = 0; i < c.n_units; ++i) {
        const std::string unit =
            (tag != "phi2" && static_cast<std::size_t>(i) < unit_ids.size()) ? unit_ids[static_cast<std::size_t>(i)] : std::to_string(i + 1);
        sc << name << "," << unit << "," << fmt(mean(i, k)) << "," << fmt(lo(i, k)) << "," << fmt(hi(i, k)) << "\n";
      }
    }
  };
  level(s.level1, s.multilevel ? "phi1" : "phi");
  if (s.multilevel) level(s.level2, "phi2");
}

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  int Q = 10;
  int K = 3;
  int K1 = 2;
  int K2 = 2;
  int degree = 3;
  bool visit_effects = false;
  std::vector<std::string> visits;  // multilevel visit filter; empty keeps all
  PriorConfig prior;
  SamplerConfig sampler;
  int study_threads = 0;  // 0: hardware concurrency
  int study_N = 50;
  int study_M = 30;
  int study_J = 5;
};

namespace detail {

template <typename T>
void take(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError(std::string("config: bad value for '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  if (!obj.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ValidationError("config: unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  RunConfig c;
  detail::reject_unknown(j, {"Q", "K", "K1", "K2", "degree", "alpha", "visit_effects", "visits", "prior", "sampler", "study"}, "top level");
  detail::take(j, "Q", c.Q);
  detail::take(j, "K", c.K);
  detail::take(j, "K1", c.K1);
  detail::take(j, "K2", c.K2);
  detail::take(j, "degree", c.degree);
  detail::take(j, "alpha", c.prior.alpha);
  detail::take(j, "visit_effects", c.visit_effects);
  detail::take(j, "visits", c.visits);
  if (j.contains("prior")) {
    const json& p = j.at("prior");
    detail::reject_unknown(p, {"a_sigma", "b_sigma", "a_lambda", "b_lambda", "a_psi", "b_psi", "a_mu", "b_mu", "alpha"}, "prior");
    detail::take(p, "a_sigma", c.prior.a_sigma);
    detail::take(p, "b_sigma", c.prior.b_sigma);
    detail::take(p, "a_lambda", c.prior.a_lambda);
    detail::take(p, "b_lambda", c.prior.b_lambda);
    detail::take(p, "a_psi", c.prior.a_psi);
    detail::take(p, "b_psi", c.prior.b_psi);
    detail::take(p, "a_mu", c.prior.a_mu);
    detail::take(p, "b_mu", c.prior.b_mu);
    detail::take(p, "alpha", c.prior.alpha);
  }
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    detail::reject_unknown(s, {"n_warmup", "n_samples", "n_chains", "seed", "x_update", "target_accept", "thinning",
                               "leapfrog_steps", "collapse_scores", "parallel_chains"}, "sampler");
    detail::take(s, "n_warmup", c.sampler.n_warmup);
    detail::take(s, "n_samples", c.sampler.n_samples);
    detail::take(s, "n_chains", c.sampler.n_chains);
    detail::take(s, "seed", c.sampler.seed);
    if (s.contains("x_update")) c.sampler.x_update = parse_x_update(s.at("x_update").get<std::string>());
    detail::take(s, "target_accept", c.sampler.target_accept);
    detail::take(s, "thinning", c.sampler.thinning);
    detail::take(s, "leapfrog_steps", c.sampler.leapfrog_steps);
    detail::take(s, "collapse_scores", c.sampler.collapse_scores);
    detail::take(s, "parallel_chains", c.sampler.parallel_chains);
  }
  if (j.contains("study")) {
    const json& s = j.at("study");
    detail::reject_unknown(s, {"threads", "N", "M", "J"}, "study");
    detail::take(s, "threads", c.study_threads);
    detail::take(s, "N", c.study_N);
    detail::take(s, "M", c.study_M);
    detail::take(s, "J", c.study_J);
  }
  return c;
}

inline RunConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  try {
    return parse_config(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

inline void validate_config(const RunConfig& c) {
  if (c.K < 0 || c.K1 < 0 || c.K2 < 0) throw ValidationError("component counts must be nonnegative");
  if (c.K > c.Q) throw ValidationError("K must not exceed Q");
  c.prior.validate();
  c.sampler.validate();
}

inline json config_json(const RunConfig& c) {
  json p = {{"a_sigma", c.prior.a_sigma}, {"b_sigma", c.prior.b_sigma}, {"a_lambda", c.prior.a_lambda},
            {"b_lambda", c.prior.b_lambda}, {"a_psi", c.prior.a_psi},     {"b_psi", c.prior.b_psi},
            {"a_mu", c.prior.a_mu},         {"b_mu", c.prior.b_mu},       {"alpha", c.prior.alpha}};
  json s = {{"n_warmup", c.sampler.n_warmup},
            {"n_samples", c.sampler.n_samples},
            {"n_chains", c.sampler.n_chains},
            {"seed", c.sampler.seed},
            {"x_update", to_string(c.sampler.x_update)},
            {"target_accept", c.sampler.resolved_target()},
            {"thinning", c.sampler.thinning},
            {"leapfrog_steps", c.sampler.leapfrog_steps},
            {"collapse_scores", c.sampler.collapse_scores},
            {"parallel_chains", c.sampler.parallel_chains}};
  return {{"Q", c.Q}, {"K", c.K}, {"K1", c.K1}, {"K2", c.K2}, {"degree", c.degree}, {"visit_effects", c.visit_effects},
          {"visits", c.visits}, {"prior", p}, {"sampler", s},
          {"study", {{"threads", c.study_threads}, {"N", c.study_N}, {"M", c.study_M}, {"J", c.study_J}}}};
}

// ---------------------------------------------------------------------------
// Manifest and diagnostics

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline json diagnostics_json(const ChainDiagnostics& d, const Vector& grid) {
  json rhat = json::object(), ess = json::object();
  for (const auto& [k, v] : d.rhat) rhat[k] = std::isfinite(v) ? json(v) : json(nullptr);
  for (const auto& [k, v] : d.ess) ess[k] = std::isfinite(v) ? json(v) : json(nullptr);
  json points = json::array();
  for (Index m : d.monitor_points) points.push_back({{"index", m + 1}, {"t", grid(m)}});
  return {{"acceptance_rate_X", d.acceptance_rate_X}, {"chain_acceptance_X", d.chain_acceptance_X},
          {"stall_count", d.stall_count},             {"monitor_points", points},
          {"rhat", rhat},                             {"ess", ess},
          {"warnings", d.warnings}};
}

inline void write_json(const json& j, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
}

}  // namespace bfpca
