#pragma once

// Scenario data generation and replicated simulation studies.

#include <bfpca/inference.hpp>
#include <bfpca/io.hpp>
#include <bfpca/multilevel.hpp>
#include <bfpca/scenario.hpp>

#include <chrono>

namespace bfpca {

struct SimulatedData {
  bool multilevel = false;
  FunctionalDataset single;
  MultilevelDataset multi;
  Matrix xi;    // true subject scores, N x K
  Matrix zeta;  // true visit scores (multilevel), rows x K2
};

/// Scores N(0, lambda_k) per component and iid N(0, sigma2) noise, from one seeded stream.
inline SimulatedData generate_dataset(const ScenarioSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const Index k = spec.phi.cols();
  const double sd = std::sqrt(spec.sigma2);
  SimulatedData out;
  out.xi.resize(spec.N, k);
  if (!spec.multilevel()) {
    FunctionalDataset& d = out.single;
    d.grid = spec.grid;
    d.Y.resize(spec.N, spec.M);
    for (Index i = 0; i < spec.N; ++i) {
      for (Index j = 0; j < k; ++j) out.xi(i, j) = std::sqrt(spec.lambda(j)) * n01(rng);
      for (Index m = 0; m < spec.M; ++m) d.Y(i, m) = spec.mu(m) + spec.phi.row(m).dot(out.xi.row(i)) + sd * n01(rng);
      d.ids.push_back(std::to_string(i + 1));
    }
    return out;
  }
  out.multilevel = true;
  const Index k2 = spec.phi2.cols();
  const Index rows = spec.N * spec.J;
  Matrix y(rows, spec.M);
  out.zeta.resize(rows, k2);
  std::vector<Index> subject, visit;
  for (Index i = 0; i < spec.N; ++i) {
    for (Index j = 0; j < k; ++j) out.xi(i, j) = std::sqrt(spec.lambda(j)) * n01(rng);
    for (Index v = 0; v < spec.J; ++v) {
      const Index r = i * spec.J + v;
      for (Index l = 0; l < k2; ++l) out.zeta(r, l) = std::sqrt(spec.lambda2(l)) * n01(rng);
      for (Index m = 0; m < spec.M; ++m)
        y(r, m) = spec.mu(m) + spec.phi.row(m).dot(out.xi.row(i)) + spec.phi2.row(m).dot(out.zeta.row(r)) + sd * n01(rng);
      subject.push_back(i);
      visit.push_back(v);
    }
  }
  out.multi = MultilevelDataset::indexed(std::move(y), spec.grid, std::move(subject), std::move(visit));
  return out;
}

// ---------------------------------------------------------------------------
// Replication study

struct StudyOptions {
  int B = 20;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency
  int Q = 10;
  int degree = 3;
  bool progress = false;
};

struct ReplicateResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<std::pair<std::string, double>> metrics;
  double seconds = 0.0;

  double metric(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    return std::numeric_limits<double>::quiet_NaN();
  }
};

struct StudyReport {
  ScenarioSpec spec;
  std::vector<std::string> columns;
  std::vector<ReplicateResult> replicates;
  std::vector<std::pair<std::string, double>> means;  // over successful replicates
  int n_ok = 0;
  int n_failed = 0;
  double seconds = 0.0;

  double mean(const std::string& name) const {
    for (const auto& [k, v] : means)
      if (k == name) return v;
    return std::numeric_limits<double>::quiet_NaN();
  }

  std::vector<double> column(const std::string& name) const {
    std::vector<double> out;
    for (const auto& r : replicates)
      if (r.ok) out.push_back(r.metric(name));
    return out;
  }
};

inline std::uint64_t replicate_seed(std::uint64_t study_seed, int replicate) {
  return study_seed * 1000000ULL + static_cast<std::uint64_t>(replicate);
}

namespace detail {

inline std::string idx(const std::string& name, Index k) { return name + "_" + std::to_string(k + 1); }

/// Metrics of one fitted level against its truth.
inline void level_metrics(std::vector<std::pair<std::string, double>>& m, const std::string& tag,
                          const ComponentSummary& fitted, const Matrix& phi_true, const Vector& lambda_true,
                          const Matrix& scores_true) {
  const ComponentSummary c = align_to_truth(fitted, phi_true);
  const Vector corr = aligned_correlations(c.phi_estimate, phi_true);
  const Vector cov_scores = score_coverage(c.score_lo(), c.score_hi(), scores_true);
  for (Index k = 0; k < phi_true.cols(); ++k) {
    const auto& band = c.phi[static_cast<std::size_t>(k)];
    m.emplace_back(idx("ise_" + tag, k), ise(c.phi_estimate.col(k), phi_true.col(k)));
    m.emplace_back(idx("cov_" + tag, k), pointwise_coverage(band, phi_true.col(k)));
    m.emplace_back(idx("corr_" + tag, k), corr(k));
    m.emplace_back(idx("cov_score_" + tag, k), cov_scores(k));
    const double lam = c.lambda[static_cast<std::size_t>(k)].mean;
    m.emplace_back(idx("lambda_" + tag, k), lam);
    m.emplace_back(idx("relerr_lambda_" + tag, k), std::abs(lam - lambda_true(k)) / lambda_true(k));
  }
}

inline double max_rhat(const ChainDiagnostics& d) {
  double r = 0.0;
  for (const auto& [_, v] : d.rhat)
    if (std::isfinite(v)) r = std::max(r, v);
  return r;
}

inline std::vector<std::pair<std::string, double>> fit_and_score(const ScenarioSpec& spec, const SimulatedData& sim,
                                                                 const BasisSystem& basis, const PriorConfig& prior,
                                                                 const SamplerConfig& sampler) {
  std::vector<std::pair<std::string, double>> m;
  if (!spec.multilevel()) {
    const FitResult fit = run(sim.single, basis, prior, sampler, spec.K());
    if (!fit.samples.valid) throw SamplerFailure(fit.samples.failure);
    const FunctionalSummary s = summarize(fit.samples, basis);
    m.emplace_back("ise_mu", ise(s.mu.mean, spec.mu));
    m.emplace_back("cov_mu", pointwise_coverage(s.mu, spec.mu));
    level_metrics(m, "phi", s.level1, spec.phi, spec.lambda, sim.xi);
    m.emplace_back("sigma2", s.sigma2.mean);
    double ortho = 0.0;
    for (const auto& d : fit.samples.draws) {
      const Matrix phi = basis.B * d.state.Psi;
      ortho = std::max(ortho, std::max(max_identity_deviation(d.state.Psi.transpose() * d.state.Psi),
                                       max_identity_deviation(phi.transpose() * phi)));
    }
    m.emplace_back("max_orthonormality_error", ortho);
    m.emplace_back("rhat_max", max_rhat(fit.diagnostics));
    m.emplace_back("accept_x", fit.diagnostics.acceptance_rate_X);
    return m;
  }
  MultilevelSpec ml;
  ml.k1 = spec.K();
  ml.k2 = spec.K2();
  const MultilevelFitResult fit = run_multilevel(sim.multi, basis, prior, sampler, ml);
  if (!fit.samples.valid) throw SamplerFailure(fit.samples.failure);
  const FunctionalSummary s = summarize_multilevel(fit.samples, basis);
  m.emplace_back("ise_mu", ise(s.mu.mean, spec.mu));
  m.emplace_back("cov_mu", pointwise_coverage(s.mu, spec.mu));
  level_metrics(m, "phi1", s.level1, spec.phi, spec.lambda, sim.xi);
  level_metrics(m, "phi2", s.level2, spec.phi2, spec.lambda2, sim.zeta);
  m.emplace_back("sigma2", s.sigma2.mean);
  double total = 0.0, ortho = 0.0, violations = 0.0;
  for (const auto& d : fit.samples.draws) {
    total += d.state.lambda1.sum() + d.state.lambda2.sum() + d.state.sigma2;
    ortho = std::max({ortho, max_identity_deviation(d.state.Psi1.transpose() * d.state.Psi1),
                      max_identity_deviation(d.state.Psi2.transpose() * d.state.Psi2)});
    if (!d.state.invariant_violation().empty()) violations += 1.0;
  }
  total /= static_cast<double>(fit.samples.draws.size());
  const double truth = spec.lambda.sum() + spec.lambda2.sum() + spec.sigma2;
  m.emplace_back("total_variance", total);
  m.emplace_back("relerr_total_variance", std::abs(total - truth) / truth);
  m.emplace_back("max_orthonormality_error", ortho);
  m.emplace_back("invariant_violations", violations);
  m.emplace_back("rhat_max", max_rhat(fit.diagnostics));
  m.emplace_back("accept_x", fit.diagnostics.acceptance_rate_X);
  return m;
}

}  // namespace detail

/// Generates, fits and scores `options.B` replicates on worker threads.
/// Replicate r uses data seed study_seed * 10^6 + r; failures are kept and flagged.
inline StudyReport replicate_study(const ScenarioSpec& spec, const StudyOptions& options, SamplerConfig sampler,
                                   const PriorConfig& prior) {
  if (options.B < 1) throw ValidationError("B must be at least 1");
  sampler.validate();
  prior.validate();
  const BasisSystem basis = make_basis(spec.grid, options.Q, prior.alpha, options.degree);
  const int workers = std::max(1, std::min(options.B, options.threads > 0 ? options.threads
                                                                          : static_cast<int>(std::thread::hardware_concurrency())));
  if (workers > 1) sampler.parallel_chains = false;
  sampler.progress = false;

  StudyReport report;
  report.spec = spec;
  report.replicates.resize(static_cast<std::size_t>(options.B));
  std::atomic<int> next{0};
  std::mutex log_mutex;
  const auto t0 = std::chrono::steady_clock::now();
  auto work = [&] {
    for (int r = next++; r < options.B; r = next++) {
      ReplicateResult& res = report.replicates[static_cast<std::size_t>(r)];
      res.replicate = r + 1;
      res.seed = replicate_seed(options.seed, r);
      const auto start = std::chrono::steady_clock::now();
      try {
        const SimulatedData sim = generate_dataset(spec, res.seed);
        SamplerConfig cfg = sampler;
        cfg.seed = chain_seed(res.seed, 1 << 20);  // independent of the data stream
        res.metrics = detail::fit_and_score(spec, sim, basis, prior, cfg);
        res.ok = true;
      } catch (const std::exception& e) {
        res.ok = false;
        res.error = e.what();
      }
      res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (options.progress) {
        std::lock_guard<std::mutex> lock(log_mutex);
        std::cerr << "replicate " << res.replicate << "/" << options.B << (res.ok ? " ok" : " FAILED: " + res.error) << "\n";
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (const auto& r : report.replicates) {
    if (!r.ok) {
      ++report.n_failed;
      continue;
    }
    ++report.n_ok;
    if (report.columns.empty())
      for (const auto& [k, _] : r.metrics) report.columns.push_back(k);
  }
  for (const auto& c : report.columns) {
    const auto v = report.column(c);
    report.means.emplace_back(c, mean_of(v));
  }
  return report;
}

/// replicates.csv (one row per replicate, failures flagged), aggregate.csv and
/// manifest.json. Study fields are added to `manifest` before it is written.
inline void write_study(const StudyReport& report, const std::filesystem::path& dir, json& manifest) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_out(dir / "replicates.csv");
    out << "replicate,seed,status";
    for (const auto& c : report.columns) out << "," << c;
    out << ",error\n";
    for (const auto& r : report.replicates) {
      out << r.replicate << "," << r.seed << "," << (r.ok ? "ok" : "failed");
      for (const auto& c : report.columns) out << "," << (r.ok ? fmt(r.metric(c)) : std::string("NA"));
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out << "," << err << "\n";
    }
  }
  {
    auto out = detail::open_out(dir / "aggregate.csv");
    out << "metric,mean,n_ok,n_failed\n";
    for (const auto& [k, v] : report.means) out << k << "," << fmt(v) << "," << report.n_ok << "," << report.n_failed << "\n";
  }
  json seeds = json::array();
  for (const auto& r : report.replicates) seeds.push_back(r.seed);
  const ScenarioSpec& s = report.spec;
  auto vec = [](const Vector& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
  };
  manifest["scenario"] = {{"name", s.name}, {"N", s.N},
                          {"M", s.M},       {"J", s.J},
                          {"lambda", vec(s.lambda)}, {"lambda2", vec(s.lambda2)},
                          {"sigma2", s.sigma2},
                          {"grid", "t_m = (m-1)/(M-1), endpoints included"}};
  manifest["replicate_seeds"] = seeds;
  manifest["n_ok"] = report.n_ok;
  manifest["n_failed"] = report.n_failed;
  manifest["seconds"] = report.seconds;
  write_json(manifest, dir / "manifest.json");
}

}  // namespace bfpca
