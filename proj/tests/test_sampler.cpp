#include <bfpca/inference.hpp>
#include <bfpca/sampler.hpp>
#include <bfpca/scenario.hpp>
#include <bfpca/simulate.hpp>
#include <gtest/gtest.h>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "test_support.hpp"

using namespace bfpca;
using bfpca::testing::tiny_instance;

namespace {

SamplerConfig quick_config(XUpdate kind = XUpdate::Hamiltonian) {
  SamplerConfig c;
  c.n_warmup = 300;
  c.n_samples = 200;
  c.n_chains = 2;
  c.seed = 17;
  c.x_update = kind;
  return c;
}

bool same_state(const FpcaState& a, const FpcaState& b) {
  return a.w_mu == b.w_mu && a.X == b.X && a.Psi == b.Psi && a.Xi == b.Xi && a.lambda == b.lambda &&
         a.sigma2 == b.sigma2 && a.h_mu == b.h_mu && a.h == b.h;
}

bool same_draws(const PosteriorSamples& a, const PosteriorSamples& b) {
  if (a.draws.size() != b.draws.size()) return false;
  for (std::size_t i = 0; i < a.draws.size(); ++i)
    if (a.draws[i].chain != b.draws[i].chain || a.draws[i].iteration != b.draws[i].iteration ||
        !same_state(a.draws[i].state, b.draws[i].state))
      return false;
  return true;
}

template <typename Target>
void expect_gradient_matches_fd(const Target& target, const Matrix& x) {
  const Matrix g = target.gradient(x);
  for (Index i = 0; i < x.size(); ++i) {
    Matrix xp = x, xm = x;
    const double h = 1e-5 * std::max(1.0, std::abs(x(i)));
    xp(i) += h;
    xm(i) -= h;
    const double fd = (target.log_density(xp) - target.log_density(xm)) / (2.0 * h);
    EXPECT_LE(std::abs(g(i) - fd), 1e-4 * std::max(std::abs(fd), 1.0)) << "entry " << i;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// update_X

TEST(UpdateX, GradientMatchesFiniteDifferences) {
  for (int rep = 0; rep < 20; ++rep) {
    auto t = tiny_instance(6, 12, 6, 3, 100 + static_cast<std::uint64_t>(rep));
    expect_gradient_matches_fd(conditional_x_target(t.state, t.data, t.basis), t.state.X);
    expect_gradient_matches_fd(collapsed_x_target(t.state, t.data, t.basis), t.state.X);
  }
}

TEST(UpdateX, ZeroScaleAcceptsAndKeepsState) {
  auto t = tiny_instance(6, 12, 6, 2, 120);
  const StiefelTarget target = collapsed_x_target(t.state, t.data, t.basis);
  for (auto kind : {XUpdate::RandomWalk, XUpdate::Hamiltonian}) {
    Matrix x = t.state.X, psi = t.state.Psi;
    Rng rng(1);
    const auto res = metropolis_x_step(x, psi, target, kind, 0.0, 8, Matrix(), rng);
    EXPECT_EQ(res.accept_prob, 1.0);
    EXPECT_LE(max_abs(x - t.state.X), 1e-15);
    EXPECT_LE(max_abs(psi - t.state.Psi), 1e-12);
  }
}

TEST(UpdateX, AcceptanceRatioMatchesJointDensity) {
  // Regenerate the random-walk proposal from the same stream and compare the
  // reported acceptance probability against exp of the model's log-density change.
  auto t = tiny_instance(6, 12, 6, 2, 121);
  const PriorConfig prior;
  const double scale = 0.15;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    for (bool collapsed : {false, true}) {
      const StiefelTarget target =
          collapsed ? collapsed_x_target(t.state, t.data, t.basis) : conditional_x_target(t.state, t.data, t.basis);
      Matrix x = t.state.X, psi = t.state.Psi;
      Rng rng(seed);
      const auto res = metropolis_x_step(x, psi, target, XUpdate::RandomWalk, scale, 1, Matrix(), rng);
      Rng replay(seed);
      const Matrix z = scale * standard_normal_matrix(t.state.X.size(), 1, replay);
      FpcaState proposed = t.state;
      proposed.set_X(t.state.X + Eigen::Map<const Matrix>(z.data(), 6, 2));
      const double delta = collapsed ? log_posterior_collapsed(proposed, t.data, t.basis, prior) -
                                           log_posterior_collapsed(t.state, t.data, t.basis, prior)
                                     : log_posterior(proposed, t.data, t.basis, prior) -
                                           log_posterior(t.state, t.data, t.basis, prior);
      EXPECT_NEAR(res.accept_prob, std::min(1.0, std::exp(delta)), 1e-10);
      if (res.accepted) EXPECT_LE(max_abs(x - proposed.X), 1e-15);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 80);
}

TEST(UpdateX, RankDeficientProposalRejected) {
  struct Degenerate {
    Matrix polar(const Matrix& x) const { return polar_decompose(x).psi; }
    double log_density(const Matrix& x) const {
      if (x(0, 0) != 0.0) throw PolarUndefined("forced");
      return 0.0;
    }
    Matrix gradient(const Matrix& x) const { return Matrix::Zero(x.rows(), x.cols()); }
  };
  Matrix x = Matrix::Zero(3, 1);
  x(1, 0) = 1.0;
  Matrix psi = x;
  Rng rng(2);
  const auto res = metropolis_x_step(x, psi, Degenerate{}, XUpdate::RandomWalk, 0.5, 1, Matrix(), rng);
  EXPECT_FALSE(res.accepted);
  EXPECT_EQ(res.accept_prob, 0.0);
  EXPECT_EQ(x(1, 0), 1.0);
}

TEST(UpdateX, AdaptedAcceptanceNearTarget) {
  const ScenarioSpec spec = make_scenario("S1");
  const SimulatedData sim = generate_dataset(spec, 7);
  const BasisSystem basis = make_basis(spec.grid, 10, 0.1);
  for (auto kind : {XUpdate::RandomWalk, XUpdate::Hamiltonian}) {
    SamplerConfig c = quick_config(kind);
    c.n_warmup = 1000;
    c.n_samples = 500;
    c.n_chains = 1;
    const FitResult fit = run(sim.single, basis, PriorConfig{}, c, 3);
    ASSERT_TRUE(fit.samples.valid);
    EXPECT_NEAR(fit.diagnostics.acceptance_rate_X, c.resolved_target(), 0.15) << to_string(kind);
  }
}

// ---------------------------------------------------------------------------
// gibbs_sweep

TEST(GibbsSweep, PreservesInvariants) {
  auto t = tiny_instance(10, 15, 6, 3, 130);
  const PriorConfig prior;
  for (bool collapse : {true, false}) {
    SamplerConfig c = quick_config();
    c.collapse_scores = collapse;
    XTuner tuner;
    Rng rng(3);
    FpcaState s = t.state;
    for (int it = 0; it < 300; ++it) {
      gibbs_sweep(s, t.data, t.basis, prior, c, tuner, rng);
      ASSERT_EQ(s.invariant_violation(1e-10), "") << "sweep " << it;
      ASSERT_LE(max_identity_deviation(s.Psi.transpose() * s.Psi), 1e-10);
      ASSERT_TRUE(detail::lambda_ordered(s.lambda));
    }
  }
}

TEST(GibbsSweep, Deterministic) {
  auto t = tiny_instance(10, 15, 6, 3, 131);
  const PriorConfig prior;
  const SamplerConfig c = quick_config();
  XTuner tuner;
  FpcaState a = t.state, b = t.state;
  Rng ra(9), rb(9);
  for (int it = 0; it < 2; ++it) {
    gibbs_sweep(a, t.data, t.basis, prior, c, tuner, ra);
    gibbs_sweep(b, t.data, t.basis, prior, c, tuner, rb);
  }
  EXPECT_TRUE(same_state(a, b));
}

TEST(GibbsSweep, FrozenBlocksScoreMean) {
  // N=4, M=8, Q=4, K=2: with everything but the scores held fixed, draws of
  // the scores average to the closed-form conditional mean.
  auto t = tiny_instance(4, 8, 4, 2, 132);
  const auto c = conditional_scores(t.state, t.data, t.basis);
  Rng rng(4);
  const int n = 20000;
  Matrix sum = Matrix::Zero(4, 2);
  for (int r = 0; r < n; ++r) sum += c.sample(rng);
  for (Index i = 0; i < 4; ++i)
    for (Index k = 0; k < 2; ++k)
      EXPECT_LE(std::abs(sum(i, k) / n - c.mean(i, k)), 4.0 * std::sqrt(c.var(i, k) / n));
}

TEST(GibbsSweep, PriorRecoveryWithoutData) {
  // alpha = 1 makes P = I/M, so psi'P psi = 1/M on the manifold and the
  // marginals have closed forms:
  //   h_mu ~ Gamma(a_mu - Q/2, b_mu)
  //   sigma2 density ~ IG(a_s, b_s)(s) s^{Q/2} prod_k (b_psi / (b_psi + 1/(2Ms)))^{a_psi}
  //   h_k | sigma2 ~ Gamma(a_psi, b_psi + 1/(2M sigma2))
  //   lambda = order statistics of iid IG(a_lambda, b_lambda)
  const Index q = 4, m = 8, k = 2;
  const BasisSystem basis = make_basis(Grid::equispaced(m), static_cast<int>(q), 1.0, 3);
  PriorConfig prior;
  prior.alpha = 1.0;
  prior.a_sigma = 8.0;
  prior.b_sigma = 2.0;
  prior.a_lambda = 6.0;
  prior.b_lambda = 3.0;
  prior.a_psi = 3.0;
  prior.b_psi = 0.5;
  prior.a_mu = 7.0;
  prior.b_mu = 2.0;
  FunctionalDataset empty;
  empty.grid = basis.grid;
  empty.Y = Matrix(0, m);

  FpcaState s;
  Rng init(5);
  s.w_mu = standard_normal_matrix(q, 1, init);
  s.set_X(standard_normal_matrix(q, k, init));
  s.Xi = Matrix(0, k);
  s.lambda = (Vector(2) << 1.0, 0.5).finished();
  s.sigma2 = 0.5;
  s.h_mu = 1.0;
  s.h = Vector::Ones(k);

  SamplerConfig c = quick_config();
  XTuner tuner;
  Rng rng(6);
  const int burn = 1000, n = 60000;
  std::vector<double> s2, hmu, h1, l1, l2;
  for (int it = 0; it < burn + n; ++it) {
    const auto st = gibbs_sweep(s, empty, basis, prior, c, tuner, rng);
    if (it < burn) {
      tuner.adapt(st.x.accept_prob, c.resolved_target());
      continue;
    }
    s2.push_back(s.sigma2);
    hmu.push_back(s.h_mu);
    h1.push_back(s.h(0));
    l1.push_back(s.lambda(0));
    l2.push_back(s.lambda(1));
  }

  namespace bm = boost::math;
  bm::quadrature::exp_sinh<double> integrator;
  const double qd = static_cast<double>(q), md = static_cast<double>(m);
  auto sigma_kernel = [&](double x) {
    double v = std::exp(-(prior.a_sigma + 1.0 - 0.5 * qd) * std::log(x) - prior.b_sigma / x);
    for (Index j = 0; j < k; ++j) v *= std::pow(prior.b_psi / (prior.b_psi + 1.0 / (2.0 * md * x)), prior.a_psi);
    return v;
  };
  const double z = integrator.integrate(sigma_kernel);
  auto sigma_expect = [&](auto&& f) { return integrator.integrate([&](double x) { return f(x) * sigma_kernel(x); }) / z; };
  const double s2_m1 = sigma_expect([](double x) { return x; });
  const double s2_m2 = sigma_expect([](double x) { return x * x; });
  auto rate = [&](double x) { return prior.b_psi + 1.0 / (2.0 * md * x); };
  const double h_m1 = sigma_expect([&](double x) { return prior.a_psi / rate(x); });
  const double h_m2 = sigma_expect([&](double x) { return prior.a_psi * (prior.a_psi + 1.0) / (rate(x) * rate(x)); });
  auto ig_pdf = [&](double x) { return std::exp(inverse_gamma_log_pdf(x, prior.a_lambda, prior.b_lambda)); };
  auto ig_cdf = [&](double x) { return bm::gamma_q(prior.a_lambda, prior.b_lambda / x); };
  auto order_moment = [&](bool upper, int power) {
    return integrator.integrate([&](double x) {
      const double f = upper ? ig_cdf(x) : 1.0 - ig_cdf(x);
      return 2.0 * std::pow(x, power) * f * ig_pdf(x);
    });
  };
  const double ah = prior.a_mu - 0.5 * qd;

  struct Case {
    const char* name;
    const std::vector<double>* draws;
    double m1, m2;
  };
  const Case cases[] = {
      {"sigma2", &s2, s2_m1, s2_m2},
      {"h_mu", &hmu, ah / prior.b_mu, ah * (ah + 1.0) / (prior.b_mu * prior.b_mu)},
      {"h_1", &h1, h_m1, h_m2},
      {"lambda_1", &l1, order_moment(true, 1), order_moment(true, 2)},
      {"lambda_2", &l2, order_moment(false, 1), order_moment(false, 2)},
  };
  for (const auto& cs : cases) {
    const std::vector<double>& x = *cs.draws;
    const double mean = cs.m1, var = cs.m2 - cs.m1 * cs.m1;
    std::vector<double> sq;
    for (double v : x) sq.push_back((v - mean) * (v - mean));
    // Monte Carlo standard errors from the effective sample size of each series
    const double ess_x = ess(ChainDraws{x});
    const double ess_sq = ess(ChainDraws{sq});
    const double se_mean = std::sqrt(variance_of(x) / ess_x);
    const double se_var = std::sqrt(variance_of(sq) / ess_sq);
    EXPECT_LE(std::abs(mean_of(x) - mean), 4.0 * se_mean) << cs.name << " mean " << mean_of(x) << " vs " << mean;
    EXPECT_LE(std::abs(mean_of(sq) - var), 4.0 * se_var) << cs.name << " variance " << mean_of(sq) << " vs " << var;
  }
}

// ---------------------------------------------------------------------------
// run

class RunFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spec_ = new ScenarioSpec(make_scenario("S1"));
    sim_ = new SimulatedData(generate_dataset(*spec_, 11));
    basis_ = new BasisSystem(make_basis(spec_->grid, 10, 0.1));
  }
  static void TearDownTestSuite() {
    delete spec_;
    delete sim_;
    delete basis_;
  }
  static ScenarioSpec* spec_;
  static SimulatedData* sim_;
  static BasisSystem* basis_;
};
ScenarioSpec* RunFixture::spec_ = nullptr;
SimulatedData* RunFixture::sim_ = nullptr;
BasisSystem* RunFixture::basis_ = nullptr;

TEST_F(RunFixture, SameSeedBitIdentical) {
  const SamplerConfig c = quick_config();
  const FitResult a = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  const FitResult b = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  EXPECT_TRUE(same_draws(a.samples, b.samples));
}

TEST_F(RunFixture, SingleRetainedDrawPerChain) {
  SamplerConfig c = quick_config();
  c.n_samples = 1;
  c.n_chains = 3;
  const FitResult fit = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  ASSERT_EQ(fit.samples.draws.size(), 3u);
  for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(fit.samples.chain(ch).size(), 1u);
}

TEST_F(RunFixture, ThinningKeepsEveryNth) {
  SamplerConfig c = quick_config();
  c.n_chains = 1;
  c.n_samples = 20;
  const FitResult plain = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  c.n_samples = 10;
  c.thinning = 2;
  const FitResult thin = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  ASSERT_EQ(thin.samples.draws.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i)
    EXPECT_TRUE(same_state(thin.samples.draws[i].state, plain.samples.draws[2 * i + 1].state));
}

TEST_F(RunFixture, ChainOrderIndependence) {
  SamplerConfig c = quick_config();
  c.n_chains = 3;
  c.parallel_chains = true;
  const FitResult par = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  c.parallel_chains = false;
  const FitResult seq = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  EXPECT_TRUE(same_draws(par.samples, seq.samples));
  // a chain run alone, after the others, reproduces its draws
  const FpcaState init = init_state(sim_->single, *basis_, 3, PriorConfig{});
  const ChainOutput alone = run_single_chain(init, sim_->single, *basis_, PriorConfig{}, c, 2);
  const auto mine = seq.samples.chain(2);
  ASSERT_EQ(alone.draws.size(), mine.size());
  for (std::size_t i = 0; i < mine.size(); ++i) EXPECT_TRUE(same_state(alone.draws[i].state, mine[i]->state));
}

TEST_F(RunFixture, AdaptationFrozenAfterWarmup) {
  // Longer post-warm-up runs extend, never alter, the shorter chain.
  SamplerConfig c = quick_config();
  const FpcaState init = init_state(sim_->single, *basis_, 3, PriorConfig{});
  c.n_samples = 50;
  const ChainOutput shorter = run_single_chain(init, sim_->single, *basis_, PriorConfig{}, c, 0);
  c.n_samples = 120;
  const ChainOutput longer = run_single_chain(init, sim_->single, *basis_, PriorConfig{}, c, 0);
  EXPECT_EQ(shorter.frozen_scale, longer.frozen_scale);
  for (std::size_t i = 0; i < shorter.draws.size(); ++i)
    EXPECT_TRUE(same_state(shorter.draws[i].state, longer.draws[i].state));

  XTuner tuner;
  tuner.adapt(0.9, 0.25);
  tuner.freeze();
  const double frozen = tuner.log_scale;
  for (int i = 0; i < 50; ++i) {
    tuner.adapt(0.0, 0.25);
    tuner.observe(Matrix::Ones(2, 2), i, 200, XUpdate::RandomWalk);
  }
  EXPECT_EQ(tuner.log_scale, frozen);
  EXPECT_EQ(tuner.metric_chol.size(), 0);
}

TEST_F(RunFixture, RetainedStatesSatisfyInvariantsAndConverge) {
  SamplerConfig c = quick_config();
  c.n_warmup = 1000;
  c.n_samples = 500;
  c.n_chains = 4;
  const FitResult fit = run(sim_->single, *basis_, PriorConfig{}, c, 3);
  ASSERT_TRUE(fit.samples.valid);
  ASSERT_EQ(fit.samples.draws.size(), 2000u);
  for (const auto& d : fit.samples.draws) ASSERT_EQ(d.state.invariant_violation(1e-8), "");
  EXPECT_GE(fit.diagnostics.acceptance_rate_X, 0.0);
  EXPECT_LE(fit.diagnostics.acceptance_rate_X, 1.0);
  ASSERT_FALSE(fit.diagnostics.rhat.empty());
  for (const auto& [name, r] : fit.diagnostics.rhat) {
    EXPECT_GE(r, 1.0 - 1e-6) << name;
    EXPECT_LT(r, 1.1) << name;
  }
  EXPECT_EQ(fit.diagnostics.rhat.count("sigma2"), 1u);
  EXPECT_EQ(fit.diagnostics.rhat.count("lambda_3"), 1u);
  EXPECT_EQ(fit.diagnostics.monitor_points.size(), 3u);
}

TEST_F(RunFixture, InvalidConfigRejected) {
  SamplerConfig c = quick_config();
  c.n_samples = 0;
  EXPECT_THROW(run(sim_->single, *basis_, PriorConfig{}, c, 3), ValidationError);
  c = quick_config();
  c.target_accept = 1.5;
  EXPECT_THROW(run(sim_->single, *basis_, PriorConfig{}, c, 3), ValidationError);
}

// ---------------------------------------------------------------------------
// init_state

TEST(InitState, NoiselessRecovery) {
  const ScenarioSpec spec = make_scenario("S1");
  // scores with centered, mutually orthogonal columns so the sample
  // covariance is diagonal and the sample mean curve is mu itself
  Rng rng(12);
  Matrix g = standard_normal_matrix(50, 3, rng);
  g.rowwise() -= g.colwise().mean();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix xi = qr.householderQ() * Matrix::Identity(50, 3);
  for (Index k = 0; k < 3; ++k) xi.col(k) *= std::sqrt(49.0 * spec.lambda(k));
  FunctionalDataset d;
  d.grid = spec.grid;
  d.Y = xi * spec.phi.transpose();
  d.Y.rowwise() += spec.mu.transpose();
  const BasisSystem basis = make_basis(spec.grid, 10, 0.1);
  const FpcaState s = init_state(d, basis, 3, PriorConfig{});
  EXPECT_LE(ise(basis.B * s.w_mu, spec.mu), 1e-6);
  EXPECT_LE(max_abs(s.lambda - spec.lambda), 1e-6 * spec.lambda(0));
  const Vector corr = aligned_correlations(basis.B * s.Psi, spec.phi);
  EXPECT_GE(corr.minCoeff(), 0.999);
  EXPECT_EQ(s.X, s.Psi);
  EXPECT_GE(s.sigma2, 1e-8);
}

TEST(InitState, EigenvalueNearTruthAcrossReplicates) {
  const ScenarioSpec spec = make_scenario("S1", 50, 30);
  const BasisSystem basis = make_basis(spec.grid, 10, 0.1);
  int close = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const SimulatedData sim = generate_dataset(spec, 900 + static_cast<std::uint64_t>(rep));
    const FpcaState s = init_state(sim.single, basis, 3, PriorConfig{});
    EXPECT_TRUE(detail::lambda_ordered(s.lambda));
    if (std::abs(s.lambda(0) - 45000.0) <= 0.5 * 45000.0) ++close;
  }
  EXPECT_GE(close, 90);
}

TEST(InitState, ConstantDataRejected) {
  FunctionalDataset d;
  d.grid = Grid::equispaced(20);
  d.Y = Matrix::Constant(10, 20, 3.0);
  const BasisSystem basis = make_basis(d.grid, 8, 0.1);
  try {
    init_state(d, basis, 2, PriorConfig{});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("attainable K <= 0"), std::string::npos) << e.what();
  }
}

TEST(InitState, KBeyondRankListsAttainable) {
  auto t = tiny_instance(3, 20, 8, 1, 140);
  const BasisSystem& basis = t.basis;
  // three curves have demeaned rank 2
  try {
    init_state(t.data, basis, 3, PriorConfig{});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("attainable K <= 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(init_state(t.data, basis, 9, PriorConfig{}), ValidationError);
}
