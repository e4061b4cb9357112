#pragma once

// Blocked Metropolis-within-Gibbs sampler for the single-level model.

#include <bfpca/diagnostics.hpp>
#include <bfpca/model.hpp>

#include <Eigen/SVD>

#include <atomic>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace bfpca {

enum class XUpdate { RandomWalk, Hamiltonian };

inline std::string to_string(XUpdate u) { return u == XUpdate::RandomWalk ? "random-walk" : "hamiltonian"; }

inline XUpdate parse_x_update(const std::string& s) {
  if (s == "random-walk" || s == "random_walk" || s == "rw") return XUpdate::RandomWalk;
  if (s == "hamiltonian" || s == "hmc") return XUpdate::Hamiltonian;
  throw ValidationError("unknown x_update '" + s + "' (expected random-walk or hamiltonian)");
}

struct SamplerConfig {
  int n_warmup = 1000;
  int n_samples = 500;
  int n_chains = 4;
  std::uint64_t seed = 1;
  XUpdate x_update = XUpdate::Hamiltonian;
  /// Acceptance target for the X block; NaN selects 0.25 (random walk) or 0.8 (hamiltonian).
  double target_accept = std::numeric_limits<double>::quiet_NaN();
  int thinning = 1;
  int leapfrog_steps = 16;
  /// Integrate the scores out of the X and w_mu updates.
  bool collapse_scores = true;
  bool parallel_chains = true;
  bool progress = false;

  double resolved_target() const {
    if (!std::isnan(target_accept)) return target_accept;
    return x_update == XUpdate::RandomWalk ? 0.25 : 0.8;
  }

  void validate() const {
    if (n_samples < 1) throw ValidationError("n_samples must be at least 1");
    if (n_warmup < 0) throw ValidationError("n_warmup must be nonnegative");
    if (n_chains < 1) throw ValidationError("n_chains must be at least 1");
    if (thinning < 1) throw ValidationError("thinning must be at least 1");
    if (leapfrog_steps < 1) throw ValidationError("leapfrog_steps must be at least 1");
    const double t = resolved_target();
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("target_accept must lie in (0,1)");
  }
};

/// Warm-up adaptation of an X proposal: Robbins-Monro on the log step scale
/// (gain 1/t^0.6) plus a covariance metric estimated over two warm-up
/// windows, [15%, 50%) and [50%, 85%). Everything is frozen after warm-up.
struct XTuner {
  double log_scale = std::log(0.05);
  long iteration = 0;
  bool frozen = false;
  Matrix metric_chol;  // lower Cholesky factor of the proposal covariance; empty means identity
  std::vector<Vector> window;

  double scale() const { return std::exp(log_scale); }

  void adapt(double accept_prob, double target) {
    if (frozen) return;
    ++iteration;
    log_scale += (accept_prob - target) / std::pow(static_cast<double>(iteration), 0.6);
    log_scale = std::clamp(log_scale, std::log(1e-8), std::log(10.0));
  }

  /// Records warm-up iteration `it` (0-based) of `n_warmup` and refits the metric at window ends.
  void observe(const Matrix& x, int it, int n_warmup, XUpdate kind) {
    if (frozen || n_warmup < 100 || x.size() == 0) return;
    const int w0 = static_cast<int>(0.15 * n_warmup);
    const int w1 = static_cast<int>(0.50 * n_warmup);
    const int w2 = static_cast<int>(0.85 * n_warmup);
    if (it >= w0 && it < w2) window.emplace_back(Eigen::Map<const Vector>(x.data(), x.size()));
    if (it + 1 == w1 || it + 1 == w2) refit(kind);
  }

  void freeze() {
    frozen = true;
    window.clear();
  }

 private:
  void refit(XUpdate kind) {
    const auto n = static_cast<double>(window.size());
    if (window.size() < 10) return;
    const Index d = window.front().size();
    Vector mean = Vector::Zero(d);
    for (const auto& v : window) mean += v;
    mean /= n;
    Matrix cov = Matrix::Zero(d, d);
    for (const auto& v : window) cov.noalias() += (v - mean) * (v - mean).transpose();
    cov /= (n - 1.0);
    // shrink toward a small multiple of the identity
    cov = (n / (n + 5.0)) * cov + 1e-3 * (5.0 / (n + 5.0)) * Matrix::Identity(d, d);
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() == Eigen::Success) {
      metric_chol = llt.matrixL();
      const double dim = static_cast<double>(d);
      log_scale = kind == XUpdate::RandomWalk ? std::log(2.38 / std::sqrt(dim)) : std::log(0.5 / std::pow(dim, 0.25));
      iteration = 0;
    }
    window.clear();
  }
};

struct XUpdateResult {
  bool accepted = false;
  double accept_prob = 0.0;
};

/// One Metropolis (random-walk or hamiltonian) move of a latent Stiefel block.
///
/// `Target` provides log_density(X), gradient(X) and polar(X). Proposals live
/// in whitened coordinates z with x = x0 + L z, where L is the tuner's metric
/// factor. On acceptance `x` and `psi` are overwritten.
template <typename Target>
XUpdateResult metropolis_x_step(Matrix& x, Matrix& psi, const Target& target, XUpdate kind, double scale,
                                int leapfrog_steps, const Matrix& metric_chol, Rng& rng) {
  XUpdateResult res;
  if (x.cols() == 0) {
    res.accepted = true;
    res.accept_prob = 1.0;
    return res;
  }
  const Index rows = x.rows();
  const Index cols = x.cols();
  const bool whiten = metric_chol.size() > 0;
  auto to_x = [&](const Vector& z) -> Matrix {
    Vector v = whiten ? Vector(metric_chol * z) : z;
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
  };
  // gradient with respect to z = L' * (gradient with respect to x)
  auto grad_z = [&](const Matrix& at) -> Vector {
    const Matrix g = target.gradient(at);
    const Eigen::Map<const Vector> gv(g.data(), g.size());
    return whiten ? Vector(metric_chol.transpose() * gv) : Vector(gv);
  };
  const double current = target.log_density(x);
  double log_ratio = 0.0;
  Matrix proposal;
  try {
    if (kind == XUpdate::RandomWalk) {
      const Vector z = scale * Vector(standard_normal_matrix(x.size(), 1, rng));
      proposal = x + to_x(z);
      log_ratio = target.log_density(proposal) - current;
    } else {
      const double eps = scale * (0.9 + 0.2 * uniform01(rng));
      Vector momentum = standard_normal_matrix(x.size(), 1, rng);
      const double h0 = -current + 0.5 * momentum.squaredNorm();
      Vector z = Vector::Zero(x.size());
      proposal = x;
      momentum += 0.5 * eps * grad_z(proposal);
      for (int step = 0; step < leapfrog_steps; ++step) {
        z += eps * momentum;
        proposal = x + to_x(z);
        if (step + 1 < leapfrog_steps) momentum += eps * grad_z(proposal);
      }
      momentum += 0.5 * eps * grad_z(proposal);
      const double h1 = -target.log_density(proposal) + 0.5 * momentum.squaredNorm();
      log_ratio = h0 - h1;
    }
  } catch (const PolarUndefined&) {
    return res;  // rank-deficient proposal: reject
  }
  if (!std::isfinite(log_ratio)) return res;
  res.accept_prob = log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
  if (log_ratio >= 0.0 || std::log(uniform01(rng)) < log_ratio) {
    psi = target.polar(proposal);
    x = std::move(proposal);
    res.accepted = true;
  }
  return res;
}

/// Updates X (and the cached Psi) against the conditional or score-collapsed target.
inline XUpdateResult update_X(FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                              const SamplerConfig& config, const XTuner& tuner, Rng& rng) {
  const StiefelTarget target =
      config.collapse_scores ? collapsed_x_target(s, data, basis) : conditional_x_target(s, data, basis);
  return metropolis_x_step(s.X, s.Psi, target, config.x_update, tuner.scale(), config.leapfrog_steps, tuner.metric_chol,
                           rng);
}

struct SweepStats {
  XUpdateResult x;
  std::size_t stalls = 0;
};

inline void update_lambdas(FpcaState& s, const PriorConfig& prior, Rng& rng, std::size_t* stalls) {
  for (Index k = 0; k < s.K(); ++k) {
    const InverseGammaParams p = conditional_lambda(s, prior, k);
    s.lambda(k) = sample_truncated_inverse_gamma(p, s.lambda(k), rng, stalls);
  }
}

inline void update_smoothing(FpcaState& s, const BasisSystem& basis, const PriorConfig& prior, Rng& rng) {
  s.h_mu = conditional_h_mu(s, basis, prior).sample(rng);
  for (Index k = 0; k < s.K(); ++k) s.h(k) = conditional_h(s, basis, prior, k).sample(rng);
}

/// One full sweep. Block order: X, scores, w_mu, lambda_1..K, sigma2, h_mu, h_1..K.
/// With collapse_scores the w_mu draw moves ahead of the scores (both X and
/// w_mu then see the scores integrated out, and the scores are redrawn last).
inline SweepStats gibbs_sweep(FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                              const PriorConfig& prior, const SamplerConfig& config, const XTuner& tuner, Rng& rng) {
  SweepStats stats;
  stats.x = update_X(s, data, basis, config, tuner, rng);
  if (config.collapse_scores) {
    s.w_mu = conditional_w_mu_marginal(s, data, basis).sample(rng);
    s.Xi = conditional_scores(s, data, basis).sample(rng);
  } else {
    s.Xi = conditional_scores(s, data, basis).sample(rng);
    s.w_mu = conditional_w_mu(s, data, basis).sample(rng);
  }
  update_lambdas(s, prior, rng, &stats.stalls);
  s.sigma2 = conditional_sigma2(s, data, basis, prior).sample_untruncated(rng);
  update_smoothing(s, basis, prior, rng);
  return stats;
}

// ---------------------------------------------------------------------------
// Initialization

/// Demeaned-SVD starting point near the data-driven mean and eigenvalues.
inline FpcaState init_state(const FunctionalDataset& data, const BasisSystem& basis, Index k, const PriorConfig& prior) {
  data.validate();
  const Index q = basis.Q();
  if (k > q) throw ValidationError("K must not exceed Q");
  if (k < 0) throw ValidationError("K must be nonnegative");
  if (data.N() < 1) throw ValidationError("no curves to initialize from");
  const Vector ybar = data.Y.colwise().mean().transpose();
  const Matrix reg = Matrix::Identity(q, q) + 1e-10 * basis.Palpha;
  FpcaState s;
  s.w_mu = reg.ldlt().solve(basis.B.transpose() * ybar);

  Matrix centered = data.Y;
  centered.rowwise() -= ybar.transpose();
  const Matrix projected = centered * basis.B;
  Eigen::JacobiSVD<Matrix> svd(projected, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  const double tol = 1e-10 * std::max(data.Y.norm(), std::numeric_limits<double>::min());
  Index rank = 0;
  for (Index j = 0; j < sv.size(); ++j)
    if (sv(j) > tol) ++rank;
  if (k > rank)
    throw ValidationError("K=" + std::to_string(k) + " exceeds the numerical rank of the demeaned data (" +
                          std::to_string(rank) + "); attainable K <= " + std::to_string(rank));

  Matrix psi = k > 0 ? project_stiefel(svd.matrixV().leftCols(k)) : Matrix(q, 0);
  Matrix e = data.Y;
  e.rowwise() -= (basis.B * s.w_mu).transpose();
  Matrix xi = e * basis.B * psi;

  Vector var(k);
  for (Index j = 0; j < k; ++j) {
    const double mean = xi.col(j).mean();
    const double denom = data.N() > 1 ? static_cast<double>(data.N() - 1) : 1.0;
    var(j) = data.N() > 1 ? (xi.col(j).array() - mean).square().sum() / denom : xi.col(j).squaredNorm();
  }
  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return var(a) > var(b); });
  s.Psi.resize(q, k);
  s.Xi.resize(data.N(), k);
  s.lambda.resize(k);
  for (Index j = 0; j < k; ++j) {
    s.Psi.col(j) = psi.col(order[static_cast<std::size_t>(j)]);
    s.Xi.col(j) = xi.col(order[static_cast<std::size_t>(j)]);
    s.lambda(j) = var(order[static_cast<std::size_t>(j)]);
  }
  for (Index j = 1; j < k; ++j)
    if (!(s.lambda(j) < s.lambda(j - 1))) s.lambda(j) = s.lambda(j - 1) - 1e-6 * s.lambda(0) * static_cast<double>(j);
  for (Index j = 0; j < k; ++j)
    if (!(s.lambda(j) > 0.0)) throw ValidationError("initial eigenvalues are not positive; reduce K");
  s.X = s.Psi;

  const Matrix r = e - s.Xi * (basis.B * s.Psi).transpose();
  s.sigma2 = std::max(r.squaredNorm() / static_cast<double>(data.N() * data.M()), 1e-8);
  s.h_mu = prior.a_mu / prior.b_mu;
  s.h = Vector::Constant(k, prior.a_psi / prior.b_psi);
  return s;
}

// ---------------------------------------------------------------------------
// Multi-chain driver

struct PosteriorDraw {
  int chain = 0;
  int iteration = 0;  // post-warm-up iteration index (0-based)
  FpcaState state;
};

struct PosteriorSamples {
  std::vector<PosteriorDraw> draws;
  int n_chains = 0;
  bool valid = true;
  std::string failure;
  std::vector<double> x_scale;  // frozen proposal scale per chain

  std::vector<const PosteriorDraw*> chain(int c) const {
    std::vector<const PosteriorDraw*> out;
    for (const auto& d : draws)
      if (d.chain == c) out.push_back(&d);
    return out;
  }
};

struct ChainDiagnostics {
  double acceptance_rate_X = 0.0;
  std::vector<double> chain_acceptance_X;
  std::map<std::string, double> ess;
  std::map<std::string, double> rhat;
  std::size_t stall_count = 0;
  std::vector<Index> monitor_points;  // grid indices where phi is traced
  std::vector<std::string> warnings;
};

struct FitResult {
  PosteriorSamples samples;
  ChainDiagnostics diagnostics;
};

/// Grid indices at 5%, 45% and 90% of the domain.
inline std::vector<Index> monitor_grid_points(Index m) {
  std::vector<Index> out;
  for (double f : {0.05, 0.45, 0.90}) out.push_back(std::clamp<Index>(static_cast<Index>(std::lround(f * static_cast<double>(m - 1))), 0, m - 1));
  return out;
}

inline std::uint64_t chain_seed(std::uint64_t seed, int chain) {
  // splitmix64 finalizer to decorrelate neighbouring seeds
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(chain + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct ChainOutput {
  std::vector<PosteriorDraw> draws;
  double acceptance = 0.0;
  double frozen_scale = 0.0;
  std::size_t stalls = 0;
  std::string failure;
};

namespace detail {

inline bool state_finite(const FpcaState& s) {
  return s.w_mu.allFinite() && s.X.allFinite() && s.Psi.allFinite() && s.Xi.allFinite() && s.lambda.allFinite() &&
         std::isfinite(s.sigma2) && std::isfinite(s.h_mu) && s.h.allFinite() && s.sigma2 > 0.0;
}

template <typename State, typename SweepFn, typename FiniteFn>
void run_chain_loop(State state, const SamplerConfig& config, int chain, SweepFn&& sweep, FiniteFn&& finite,
                    std::vector<std::pair<int, State>>& kept, double& acceptance, std::size_t& stalls,
                    std::string& failure) {
  const int total = config.n_warmup + config.n_samples * config.thinning;
  const int report_every = std::max(1, total / 10);
  double accept_sum = 0.0;
  int accept_count = 0;
  for (int it = 0; it < total; ++it) {
    const bool warm = it < config.n_warmup;
    const auto st = sweep(state, warm);
    stalls += st.stalls;
    if (!warm) {
      accept_sum += st.accept;
      ++accept_count;
    }
    if (!finite(state)) {
      failure = "chain " + std::to_string(chain) + " diverged at iteration " + std::to_string(it);
      break;
    }
    if (!warm) {
      const int post = it - config.n_warmup;
      if ((post + 1) % config.thinning == 0) kept.emplace_back(post / config.thinning, state);
    }
    if (config.progress && (it + 1) % report_every == 0)
      std::cerr << "chain " << chain << ": " << (100 * (it + 1)) / total << "% (" << it + 1 << "/" << total << ")\n";
  }
  acceptance = accept_count > 0 ? accept_sum / accept_count : 0.0;
}

template <typename ChainFn>
void for_each_chain(int n_chains, bool parallel, ChainFn&& fn) {
  if (!parallel || n_chains == 1) {
    for (int c = 0; c < n_chains; ++c) fn(c);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chains));
  for (int c = 0; c < n_chains; ++c)
    workers.emplace_back([&, c] {
      try {
        fn(c);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    });
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Runs one chain from `init`; adaptation during warm-up, frozen afterwards.
inline ChainOutput run_single_chain(FpcaState init, const FunctionalDataset& data, const BasisSystem& basis,
                                    const PriorConfig& prior, const SamplerConfig& config, int chain) {
  Rng rng(chain_seed(config.seed, chain));
  XTuner tuner;
  const double target = config.resolved_target();
  ChainOutput out;
  std::vector<std::pair<int, FpcaState>> kept;
  struct Step {
    double accept;
    std::size_t stalls;
  };
  int warm_it = 0;
  auto sweep = [&](FpcaState& s, bool warm) {
    if (!warm && !tuner.frozen) {
      tuner.freeze();
      out.frozen_scale = tuner.scale();
    }
    const SweepStats st = gibbs_sweep(s, data, basis, prior, config, tuner, rng);
    if (warm) {
      tuner.adapt(st.x.accept_prob, target);
      tuner.observe(s.X, warm_it++, config.n_warmup, config.x_update);
    }
    return Step{st.x.accepted ? 1.0 : 0.0, st.stalls};
  };
  detail::run_chain_loop(std::move(init), config, chain, sweep, detail::state_finite, kept, out.acceptance, out.stalls,
                         out.failure);
  if (!tuner.frozen) out.frozen_scale = tuner.scale();
  out.draws.reserve(kept.size());
  for (auto& [it, st] : kept) out.draws.push_back({chain, it, std::move(st)});
  return out;
}

/// Scalar traces per chain for diagnostics. Phi columns are aligned to `reference`.
inline std::map<std::string, ChainDraws> monitored_traces(const PosteriorSamples& samples, const BasisSystem& basis,
                                                          const Matrix& reference, const std::vector<Index>& points) {
  std::map<std::string, ChainDraws> traces;
  const int n_chains = samples.n_chains;
  auto push = [&](const std::string& name, int chain, double v) {
    auto& t = traces[name];
    if (t.empty()) t.resize(static_cast<std::size_t>(n_chains));
    t[static_cast<std::size_t>(chain)].push_back(v);
  };
  for (const auto& d : samples.draws) {
    push("sigma2", d.chain, d.state.sigma2);
    const Matrix phi = basis.B * d.state.Psi;
    const SignedPermutation align = best_alignment(phi, reference);
    const Matrix aligned = align.apply_columns(phi);
    const Vector lam = align.apply_entries(d.state.lambda);
    for (Index k = 0; k < d.state.K(); ++k) {
      push("lambda_" + std::to_string(k + 1), d.chain, lam(k));
      for (Index m : points)
        push("phi_" + std::to_string(k + 1) + "@t" + std::to_string(m + 1), d.chain, aligned(m, k));
    }
  }
  return traces;
}

inline void fill_convergence(ChainDiagnostics& diag, const std::map<std::string, ChainDraws>& traces) {
  for (const auto& [name, chains] : traces) {
    bool equal = detail::equal_lengths(chains);
    if (!equal) continue;
    diag.rhat[name] = rhat(chains);
    diag.ess[name] = ess(chains);
  }
}

/// Runs `config.n_chains` independent chains from the data-driven start.
inline FitResult run(const FunctionalDataset& data, const BasisSystem& basis, const PriorConfig& prior,
                     const SamplerConfig& config, Index k) {
  config.validate();
  prior.validate();
  if (!basis.has_penalty) throw ValidationError("basis has no penalty matrices");
  const FpcaState init = init_state(data, basis, k, prior);
  if (!std::isfinite(log_posterior(init, data, basis, prior)))
    throw SamplerFailure("non-finite log posterior at initialization");

  std::vector<ChainOutput> outputs(static_cast<std::size_t>(config.n_chains));
  detail::for_each_chain(config.n_chains, config.parallel_chains, [&](int c) {
    outputs[static_cast<std::size_t>(c)] = run_single_chain(init, data, basis, prior, config, c);
  });

  FitResult res;
  res.samples.n_chains = config.n_chains;
  double acc = 0.0;
  for (auto& o : outputs) {
    acc += o.acceptance;
    res.diagnostics.chain_acceptance_X.push_back(o.acceptance);
    res.diagnostics.stall_count += o.stalls;
    res.samples.x_scale.push_back(o.frozen_scale);
    if (!o.failure.empty()) {
      res.samples.valid = false;
      if (res.samples.failure.empty()) res.samples.failure = o.failure;
    }
    for (auto& d : o.draws) res.samples.draws.push_back(std::move(d));
  }
  res.diagnostics.acceptance_rate_X = acc / config.n_chains;
  res.diagnostics.monitor_points = monitor_grid_points(basis.M());
  if (!res.samples.draws.empty() && k > 0) {
    const Matrix reference = basis.B * res.samples.draws.front().state.Psi;
    fill_convergence(res.diagnostics, monitored_traces(res.samples, basis, reference, res.diagnostics.monitor_points));
  } else if (!res.samples.draws.empty()) {
    fill_convergence(res.diagnostics, monitored_traces(res.samples, basis, Matrix(basis.M(), 0), res.diagnostics.monitor_points));
  }
  return res;
}

}  // namespace bfpca
