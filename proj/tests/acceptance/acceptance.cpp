// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <bfpca/inference.hpp>
#include <bfpca/io.hpp>
#include <bfpca/multilevel.hpp>
#include <bfpca/simulate.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "../test_support.hpp"

using namespace bfpca;
using bfpca::testing::complete_square;
using bfpca::testing::log_linear_fit;
using bfpca::testing::moment_z;
using bfpca::testing::tiny_instance;
namespace fs = std::filesystem;

namespace {

// criterion 1
constexpr double kPsiOrthoTol = 1e-8;
constexpr double kPhiOrthoTol = 1e-6;
constexpr double kFullFitSeconds = 600.0;
// criterion 2
constexpr int kPolarDraws = 1000;
constexpr double kReconTol = 1e-10;
constexpr double kPsdTol = 1e-12;
constexpr double kScaleTol = 1e-10;
constexpr double kIdempotenceTol = 1e-10;
// criterion 3
constexpr double kOracleTol = 1e-10;
constexpr int kGibbsDraws = 20000;
constexpr double kMomentSE = 4.0;
// criterion 4
constexpr int kPerturbations = 50;
constexpr double kRatioTol = 1e-8;
constexpr int kGradientStates = 20;
constexpr double kGradientRelTol = 1e-4;
// criteria 5-7
constexpr int kStudyB = 20;
constexpr std::uint64_t kStudySeed = 1;
constexpr double kFunctionCoverageLo = 0.85, kFunctionCoverageHi = 1.00;
constexpr double kScoreCoverageLo = 0.88, kScoreCoverageHi = 0.99;
constexpr double kMinMedianCorrelation = 0.95;
constexpr double kMaxMedianLambdaRelErr = 0.30;
constexpr double kStudySeconds = 4.0 * 3600.0;
// criterion 8
constexpr int kMlB = 10;
constexpr double kTotalVarianceTruth = 10000.0 + 2000.0 + 8000.0 + 4000.0 + 16.0;
constexpr double kTotalVarianceRelTol = 0.15;
constexpr double kNestingSE = 4.0;
// criterion 9
constexpr double kMaxRhat = 1.1;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [violated: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// ---------------------------------------------------------------------------
// 1 and 9 share one full S1 fit

struct FullFit {
  BasisSystem basis;
  FitResult fit;
  double seconds = 0.0;
};

const FullFit& full_s1_fit() {
  static const FullFit f = [] {
    FullFit out;
    const ScenarioSpec spec = make_scenario("S1", 50, 30);
    const SimulatedData sim = generate_dataset(spec, replicate_seed(kStudySeed, 0));
    out.basis = make_basis(spec.grid, 10, 0.1);
    SamplerConfig c;  // 4 chains, 1000 warm-up, 500 retained
    c.seed = 1;
    const auto t0 = std::chrono::steady_clock::now();
    out.fit = run(sim.single, out.basis, PriorConfig{}, c, 3);
    out.seconds = seconds_since(t0);
    return out;
  }();
  return f;
}

void criterion1(Verdict& v) {
  const FullFit& f = full_s1_fit();
  std::size_t ok = 0;
  double worst_psi = 0.0, worst_phi = 0.0;
  for (const auto& d : f.fit.samples.draws) {
    const Matrix phi = f.basis.B * d.state.Psi;
    const double ep = max_identity_deviation(d.state.Psi.transpose() * d.state.Psi);
    const double ef = max_identity_deviation(phi.transpose() * phi);
    worst_psi = std::max(worst_psi, ep);
    worst_phi = std::max(worst_phi, ef);
    if (ep <= kPsiOrthoTol && ef <= kPhiOrthoTol) ++ok;
  }
  const std::size_t n = f.fit.samples.draws.size();
  v.detail << ok << "/" << n << " draws orthonormal; max |Psi'Psi-I| " << worst_psi << ", max |Phi'Phi-I| " << worst_phi
           << "; " << f.seconds << " s";
  v.require(f.fit.samples.valid, "samples valid");
  v.require(n == 2000, "2000 retained draws");
  v.require(ok == n, "every draw orthonormal");
  v.require(f.seconds <= kFullFitSeconds, "runtime <= 600 s");
}

void criterion9(Verdict& v) {
  const FullFit& f = full_s1_fit();
  const auto& r = f.fit.diagnostics.rhat;
  double worst = 0.0;
  std::string worst_name;
  int monitored = 0;
  for (const auto& [name, value] : r) {
    ++monitored;
    if (worst_name.empty() || !(value <= worst)) {
      worst = value;
      worst_name = name;
    }
    v.require(std::isfinite(value) && value < kMaxRhat, "R-hat " + name);
  }
  // sigma2, 3 eigenvalues, 3 eigenfunctions at 3 grid points
  v.require(monitored == 1 + 3 + 9, "13 monitored quantities");
  v.require(r.count("sigma2") == 1, "sigma2 monitored");
  v.detail << monitored << " quantities, max R-hat " << worst << " (" << worst_name << ")";
}

// ---------------------------------------------------------------------------
// 2

void criterion2(Verdict& v) {
  Rng rng(2);
  double recon = 0.0, min_eig = std::numeric_limits<double>::infinity(), scale = 0.0, idem = 0.0;
  std::uniform_real_distribution<double> c_dist(0.01, 100.0);
  for (int r = 0; r < kPolarDraws; ++r) {
    const Matrix x = standard_normal_matrix(10, 3, rng);
    const PolarDecomposition pd = polar_decompose(x);
    recon = std::max(recon, max_abs(pd.psi * pd.p - x));
    min_eig = std::min(min_eig, Eigen::SelfAdjointEigenSolver<Matrix>(pd.p).eigenvalues().minCoeff());
    const double c = c_dist(rng);
    const PolarDecomposition pc = polar_decompose(c * x);
    scale = std::max({scale, max_abs(pc.psi - pd.psi), max_abs(pc.p - c * pd.p) / c});
    idem = std::max(idem, max_abs(project_stiefel(pd.psi) - pd.psi));
  }
  v.detail << kPolarDraws << " draws; recon " << recon << ", min eig(P) " << min_eig << ", scale " << scale
           << ", idempotence " << idem;
  v.require(recon <= kReconTol, "reconstruction");
  v.require(min_eig >= -kPsdTol, "P positive semi-definite");
  v.require(scale <= kScaleTol, "scale covariance");
  v.require(idem <= kIdempotenceTol, "project_stiefel idempotence");
}

// ---------------------------------------------------------------------------
// 3

void criterion3(Verdict& v) {
  auto t = tiny_instance(4, 8, 3, 1, 3);
  PriorConfig prior;
  // shape N/2 + a_lambda must exceed 4 for the variance check to have a finite standard error
  prior.a_lambda = 3.0;
  FpcaState& s = t.state;
  const auto lp = [&](const FpcaState& st) { return log_posterior(st, t.data, t.basis, prior); };
  auto log_x = [](double x) { return std::log(x); };
  auto inv_x = [](double x) { return 1.0 / x; };
  auto id_x = [](double x) { return x; };
  double worst = 0.0;
  auto match = [&](double got, double oracle, const std::string& what) {
    const double e = rel_diff(got, oracle);
    worst = std::max(worst, e);
    v.require(e <= kOracleTol, what);
  };

  const ScoreConditional sc = conditional_scores(s, t.data, t.basis);
  for (Index i = 0; i < 4; ++i) {
    const auto g = complete_square(
        [&](double x) {
          FpcaState st = s;
          st.Xi(i, 0) = x;
          return lp(st);
        },
        s.Xi(i, 0));
    match(sc.mean(i, 0), g.mean, "score mean");
    match(sc.var(i, 0), g.var, "score variance");
  }
  const GaussianConditional wc = conditional_w_mu(s, t.data, t.basis);
  const auto wg = complete_square(
      [&](const Vector& w) {
        FpcaState st = s;
        st.w_mu = w;
        return lp(st);
      },
      Vector(s.w_mu));
  for (Index q = 0; q < 3; ++q) {
    match(wc.mean(q), wg.mean(q), "w_mu mean");
    for (Index r = 0; r < 3; ++r) match(wc.cov(q, r), wg.cov(q, r), "w_mu covariance");
  }
  const InverseGammaParams lc = conditional_lambda(s, prior, 0);
  {
    const auto [c1, c2] = log_linear_fit(
        [&](double x) {
          FpcaState st = s;
          st.lambda(0) = x;
          return lp(st);
        },
        log_x, inv_x, s.lambda(0));
    match(lc.shape, -(c1 + 1.0), "lambda shape");
    match(lc.scale, -c2, "lambda scale");
  }
  const GammaParams hc = conditional_h(s, t.basis, prior, 0);
  {
    const auto [c1, c2] = log_linear_fit(
        [&](double x) {
          FpcaState st = s;
          st.h(0) = x;
          return lp(st);
        },
        log_x, id_x, s.h(0));
    match(hc.shape, c1 + 1.0, "h shape");
    match(hc.rate, -c2, "h rate");
  }
  const InverseGammaParams sc2 = conditional_sigma2(s, t.data, t.basis, prior);
  {
    const auto [c1, c2] = log_linear_fit(
        [&](double x) {
          FpcaState st = s;
          st.sigma2 = x;
          return lp(st);
        },
        log_x, inv_x, s.sigma2);
    match(sc2.shape, -(c1 + 1.0), "sigma2 shape");
    match(sc2.scale, -c2, "sigma2 scale");
  }

  Rng rng(33);
  double worst_z = 0.0;
  auto moments = [&](const std::vector<double>& x, double mean, double var, const std::string& what) {
    const auto z = moment_z(x, mean, var);
    worst_z = std::max({worst_z, std::abs(z.mean_z), std::abs(z.var_z)});
    v.require(std::abs(z.mean_z) <= kMomentSE && std::abs(z.var_z) <= kMomentSE, what + " moments");
  };
  std::vector<double> a_xi, a_w, a_lam, a_h, a_s2;
  for (int r = 0; r < kGibbsDraws; ++r) {
    a_xi.push_back(sc.sample(rng)(2, 0));
    a_w.push_back(wc.sample(rng)(1));
    a_lam.push_back(sample_truncated_inverse_gamma(lc, s.lambda(0), rng));
    a_h.push_back(hc.sample(rng));
    a_s2.push_back(sc2.sample_untruncated(rng));
  }
  moments(a_xi, sc.mean(2, 0), sc.var(2, 0), "score");
  moments(a_w, wc.mean(1), wc.cov(1, 1), "w_mu");
  moments(a_lam, lc.mean(), lc.variance(), "lambda");
  moments(a_h, hc.mean(), hc.variance(), "h");
  moments(a_s2, sc2.mean(), sc2.variance(), "sigma2");
  v.detail << "max oracle rel. error " << worst << "; max |z| over " << kGibbsDraws << " draws " << worst_z;
}

// ---------------------------------------------------------------------------
// 4

void criterion4(Verdict& v) {
  auto t = tiny_instance(8, 12, 6, 3, 4);
  const PriorConfig prior;
  const FpcaState& s0 = t.state;
  Rng rng(44);
  double worst = 0.0;
  auto check = [&](const FpcaState& s, double conditional_delta, const std::string& what) {
    const double joint = log_posterior(s, t.data, t.basis, prior) - log_posterior(s0, t.data, t.basis, prior);
    const double e = std::abs(joint - conditional_delta);
    worst = std::max(worst, e);
    v.require(e <= kRatioTol, what);
  };
  const ScoreConditional sc = conditional_scores(s0, t.data, t.basis);
  const GaussianConditional wc = conditional_w_mu(s0, t.data, t.basis);
  const InverseGammaParams s2c = conditional_sigma2(s0, t.data, t.basis, prior);
  const GammaParams hmu = conditional_h_mu(s0, t.basis, prior);
  const StiefelTarget xt = conditional_x_target(s0, t.data, t.basis);
  for (int r = 0; r < kPerturbations; ++r) {
    FpcaState s = s0;
    s.Xi = sc.sample(rng);
    check(s, sc.log_density(s.Xi) - sc.log_density(s0.Xi), "scores");
    s = s0;
    s.w_mu = wc.sample(rng);
    check(s, wc.log_density(s.w_mu) - wc.log_density(s0.w_mu), "w_mu");
    for (Index k = 0; k < 3; ++k) {
      const auto lc = conditional_lambda(s0, prior, k);
      s = s0;
      s.lambda(k) = sample_truncated_inverse_gamma(lc, s0.lambda(k), rng);
      check(s, lc.log_density(s.lambda(k)) - lc.log_density(s0.lambda(k)), "lambda");
      const auto hc = conditional_h(s0, t.basis, prior, k);
      s = s0;
      s.h(k) = hc.sample(rng);
      check(s, hc.log_density(s.h(k)) - hc.log_density(s0.h(k)), "h");
    }
    s = s0;
    s.h_mu = hmu.sample(rng);
    check(s, hmu.log_density(s.h_mu) - hmu.log_density(s0.h_mu), "h_mu");
    s = s0;
    s.sigma2 = s2c.sample_untruncated(rng);
    check(s, s2c.log_density(s.sigma2) - s2c.log_density(s0.sigma2), "sigma2");
    s = s0;
    s.set_X(s0.X + 0.3 * standard_normal_matrix(6, 3, rng));
    check(s, xt.log_density(s.X) - xt.log_density(s0.X), "X");
  }

  double worst_grad = 0.0;
  for (int r = 0; r < kGradientStates; ++r) {
    auto u = tiny_instance(6, 10, 5, 2, 400 + static_cast<std::uint64_t>(r));
    for (const StiefelTarget& target : {conditional_x_target(u.state, u.data, u.basis), collapsed_x_target(u.state, u.data, u.basis)}) {
      const Matrix x = u.state.X;
      const Matrix g = target.gradient(x);
      for (Index i = 0; i < x.size(); ++i) {
        Matrix xp = x, xm = x;
        const double h = 1e-5;
        xp(i) += h;
        xm(i) -= h;
        const double fd = (target.log_density(xp) - target.log_density(xm)) / (2.0 * h);
        const double e = std::abs(g(i) - fd) / std::max(1.0, std::abs(fd));
        worst_grad = std::max(worst_grad, e);
        v.require(e <= kGradientRelTol, "HMC gradient");
      }
    }
  }
  v.detail << kPerturbations << " perturbations per block, max |delta error| " << worst << "; " << kGradientStates
           << " gradient states, max rel. error " << worst_grad;
}

// ---------------------------------------------------------------------------
// 5-7

const StudyReport& study(const std::string& name) {
  static std::map<std::string, StudyReport> cache;
  auto it = cache.find(name);
  if (it != cache.end()) return it->second;
  StudyOptions o;
  o.B = kStudyB;
  o.seed = kStudySeed;
  return cache.emplace(name, replicate_study(make_scenario(name), o, SamplerConfig{}, PriorConfig{})).first->second;
}

void coverage_criterion(Verdict& v, const std::string& name) {
  const StudyReport& r = study(name);
  const Index k = make_scenario(name).K();
  v.require(r.n_ok == kStudyB, "all replicates succeed");
  v.detail << name << " B=" << r.n_ok << ": cov_mu " << r.mean("cov_mu");
  v.require(r.mean("cov_mu") >= kFunctionCoverageLo && r.mean("cov_mu") <= kFunctionCoverageHi, "mu coverage");
  for (Index j = 0; j < k; ++j) {
    const std::string f = "cov_phi_" + std::to_string(j + 1), sc = "cov_score_phi_" + std::to_string(j + 1);
    v.detail << ", " << f << " " << r.mean(f) << ", " << sc << " " << r.mean(sc);
    v.require(r.mean(f) >= kFunctionCoverageLo && r.mean(f) <= kFunctionCoverageHi, f);
    v.require(r.mean(sc) >= kScoreCoverageLo && r.mean(sc) <= kScoreCoverageHi, sc);
  }
  v.detail << "; " << r.seconds << " s";
  v.require(r.seconds <= kStudySeconds, "study runtime <= 4 h");
}

void accuracy_criterion(Verdict& v, const std::string& name) {
  const StudyReport& r = study(name);
  const double corr = median_of(r.column("corr_phi_1"));
  const double rel = median_of(r.column("relerr_lambda_phi_1"));
  v.detail << name << ": median corr(phi_1) " << corr << ", median rel. error lambda_1 " << rel;
  v.require(corr >= kMinMedianCorrelation, "median correlation");
  v.require(rel <= kMaxMedianLambdaRelErr, "median lambda_1 relative error");
}

void criterion5(Verdict& v) { coverage_criterion(v, "S1"); }
void criterion6(Verdict& v) { accuracy_criterion(v, "S1"); }
void criterion7(Verdict& v) {
  coverage_criterion(v, "S2");
  v.detail << " | ";
  accuracy_criterion(v, "S2");
}

// ---------------------------------------------------------------------------
// 8

void criterion8(Verdict& v) {
  StudyOptions o;
  o.B = kMlB;
  o.seed = kStudySeed;
  const StudyReport r = replicate_study(make_scenario("ML", 20, 30, 5), o, SamplerConfig{}, PriorConfig{});
  v.require(r.n_ok == kMlB, "all replicates succeed");
  const auto violations = r.column("invariant_violations");
  const auto ortho = r.column("max_orthonormality_error");
  double bad = 0.0, worst = 0.0;
  for (double x : violations) bad += x;
  for (double x : ortho) worst = std::max(worst, x);
  v.require(bad == 0.0, "every draw orthonormal and ordered at both levels");
  v.require(worst <= kPsiOrthoTol, "both-level orthonormality");
  const double total = r.mean("total_variance");
  const double rel = std::abs(total - kTotalVarianceTruth) / kTotalVarianceTruth;
  v.require(rel <= kTotalVarianceRelTol, "total variance within 15%");
  v.detail << "B=" << r.n_ok << ", draws violating invariants " << bad << ", max ortho error " << worst
           << "; mean posterior total variance " << total << " vs " << kTotalVarianceTruth << " (rel. " << rel
           << "; per-replicate mean rel. error " << r.mean("relerr_total_variance") << ")";

  // nesting: K2 = 0 with one visit per subject against the single-level sampler
  const ScenarioSpec spec = make_scenario("S2", 40, 20);
  const SimulatedData sim = generate_dataset(spec, 31);
  const BasisSystem basis = make_basis(spec.grid, 8, 0.1);
  std::vector<Index> subject(40), visit(40, 0);
  std::iota(subject.begin(), subject.end(), Index{0});
  const MultilevelDataset ml = MultilevelDataset::indexed(sim.single.Y, spec.grid, subject, visit);
  SamplerConfig c;
  c.n_warmup = 1000;
  c.n_samples = 3000;
  c.seed = 5;
  const FitResult single = run(sim.single, basis, PriorConfig{}, c, 2);
  c.seed = 6;
  const MultilevelFitResult multi = run_multilevel(ml, basis, PriorConfig{}, c, MultilevelSpec{2, 0, false});
  v.require(single.samples.valid && multi.samples.valid, "nesting fits valid");
  double worst_z = 0.0;
  auto compare = [&](const std::string& name, auto&& get_single, auto&& get_multi) {
    ChainDraws a(static_cast<std::size_t>(c.n_chains)), b(static_cast<std::size_t>(c.n_chains));
    for (const auto& d : single.samples.draws) a[static_cast<std::size_t>(d.chain)].push_back(get_single(d.state));
    for (const auto& d : multi.samples.draws) b[static_cast<std::size_t>(d.chain)].push_back(get_multi(d.state));
    std::vector<double> fa, fb;
    for (const auto& ch : a) fa.insert(fa.end(), ch.begin(), ch.end());
    for (const auto& ch : b) fb.insert(fb.end(), ch.begin(), ch.end());
    const double se = std::sqrt(variance_of(fa) / ess(a) + variance_of(fb) / ess(b));
    const double z = std::abs(mean_of(fa) - mean_of(fb)) / se;
    worst_z = std::max(worst_z, z);
    v.require(z <= kNestingSE, "nesting " + name);
  };
  compare("sigma2", [](const FpcaState& s) { return s.sigma2; }, [](const MfpcaState& s) { return s.sigma2; });
  compare("lambda_1", [](const FpcaState& s) { return s.lambda(0); }, [](const MfpcaState& s) { return s.lambda1(0); });
  compare("lambda_2", [](const FpcaState& s) { return s.lambda(1); }, [](const MfpcaState& s) { return s.lambda1(1); });
  v.detail << "; nesting max |z| " << worst_z;
}

// ---------------------------------------------------------------------------
// 10

int cli(const std::string& args) {
  const std::string cmd = std::string(BFPCA_CLI) + " " + args + " --quiet > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion10(Verdict& v) {
  const fs::path root = fs::temp_directory_path() / "bfpca_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "ml.json") << R"({"study": {"N": 10, "M": 20, "J": 3}, "K1": 2, "K2": 2})";
  }
  const std::string ml_cfg = " --config " + (root / "ml.json").string();
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate-S1", "generate S1 --seed 7"},
      {"fit", "fit " + (root / "generate-S1_a" / "data.csv").string() + " --smoke --seed 7"},
      {"generate-ML", "generate ML --seed 8" + ml_cfg},
      {"fit-multilevel", "fit-multilevel " + (root / "generate-ML_a" / "data.csv").string() + " --smoke --seed 8" + ml_cfg},
      {"simulate", "simulate S2 --B 2 --smoke --seed 9"},
  };
  int files = 0;
  for (const auto& [name, args] : commands) {
    for (const char* rep : {"_a", "_b"}) {
      const int code = cli(args + " --out " + (root / (name + rep)).string());
      v.require(code == 0, name + " exit 0");
    }
    std::set<std::string> csvs;
    for (const char* rep : {"_a", "_b"})
      for (const auto& e : fs::directory_iterator(root / (name + rep)))
        if (e.path().extension() == ".csv") csvs.insert(e.path().filename().string());
    v.require(!csvs.empty(), name + " wrote CSV output");
    for (const auto& f : csvs) {
      ++files;
      const fs::path a = root / (name + "_a") / f, b = root / (name + "_b") / f;
      v.require(fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b), name + "/" + f + " byte-identical");
    }
  }
  v.detail << commands.size() << " commands run twice, " << files << " CSV files compared";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<void(Verdict&)>>> criteria = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},  {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " [exception: " << e.what() << "]";
    }
    if (!v.pass) ++failed;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail.str() << "  ("
              << seconds_since(t0) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
