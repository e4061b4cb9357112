#pragma once

// Single-level Bayesian FPCA posterior: state, joint log density and the
// closed-form full conditionals.
//
// Conventions: Gamma(a, b) is shape/rate (mean a/b); inverse-Gamma(a, b) is
// shape/scale, i.e. its reciprocal is Gamma(a, b).

#include <bfpca/basis.hpp>
#include <bfpca/core.hpp>
#include <bfpca/stiefel.hpp>

#include <boost/math/special_functions/gamma.hpp>

#include <string>
#include <vector>

namespace bfpca {

struct PriorConfig {
  double a_sigma = 1.0;  // noise precision shape
  double b_sigma = 0.001;
  double a_lambda = 0.1;  // eigenvalue inverse-Gamma shape
  double b_lambda = 0.001;
  double a_psi = 1.0;  // eigenfunction smoothing
  double b_psi = 0.005;
  double a_mu = 1.0;  // mean smoothing (also used for visit deviations)
  double b_mu = 0.005;
  double alpha = 0.1;

  void validate() const {
    for (double v : {a_sigma, b_sigma, a_lambda, b_lambda, a_psi, b_psi, a_mu, b_mu})
      if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("prior shapes and rates must be strictly positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  }
};

struct FunctionalDataset {
  Matrix Y;  // N x M
  Grid grid;
  std::vector<std::string> ids;

  Index N() const { return Y.rows(); }
  Index M() const { return Y.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(Y.cols()) != grid.size())
      throw ValidationError("data has " + std::to_string(Y.cols()) + " columns but grid has " +
                            std::to_string(grid.size()) + " points");
    if (!ids.empty() && static_cast<Index>(ids.size()) != Y.rows()) throw ValidationError("id count does not match rows");
    for (Index i = 0; i < Y.rows(); ++i)
      for (Index m = 0; m < Y.cols(); ++m)
        if (!std::isfinite(Y(i, m)))
          throw ValidationError("missing or non-finite value at row " + std::to_string(i) + ", column " + std::to_string(m));
  }
};

struct FpcaState {
  Vector w_mu;  // Q
  Matrix X;     // Q x K latent
  Matrix Psi;   // Q x K, polar factor of X
  Matrix Xi;    // N x K scores
  Vector lambda;  // K, nonincreasing
  double sigma2 = 1.0;
  double h_mu = 1.0;
  Vector h;  // K

  Index K() const { return X.cols(); }
  Index Q() const { return X.rows(); }

  /// Replaces X and recomputes the cached polar factor.
  void set_X(Matrix x) {
    Psi = polar_decompose(x).psi;
    X = std::move(x);
  }

  /// Empty string when every invariant holds, else a description of the first violation.
  std::string invariant_violation(double tol = 1e-8) const {
    const Index k = K();
    if (Psi.rows() != X.rows() || Psi.cols() != k) return "Psi shape does not match X";
    if (lambda.size() != k || h.size() != k || Xi.cols() != k) return "component count mismatch";
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) return "sigma2 must be positive";
    if (!(h_mu > 0.0) || !std::isfinite(h_mu)) return "h_mu must be positive";
    for (Index j = 0; j < k; ++j) {
      if (!(h(j) > 0.0) || !std::isfinite(h(j))) return "h must be positive";
      if (!(lambda(j) > 0.0) || !std::isfinite(lambda(j))) return "lambda must be positive";
      if (j > 0 && lambda(j) > lambda(j - 1)) return "lambda must be nonincreasing";
    }
    if (max_identity_deviation(Psi.transpose() * Psi) > tol) return "Psi is not orthonormal";
    if (!w_mu.allFinite() || !X.allFinite() || !Xi.allFinite()) return "non-finite coefficients";
    return {};
  }
};

/// Theta = Xi (B Psi)': the component part of every fitted curve.
inline Matrix fitted_components(const FpcaState& s, const BasisSystem& basis) {
  return s.Xi * (basis.B * s.Psi).transpose();
}

inline Matrix residuals(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  Matrix r = data.Y - fitted_components(s, basis);
  r.rowwise() -= (basis.B * s.w_mu).transpose();
  return r;
}

inline double quad_form(const Matrix& p, const Eigen::Ref<const Vector>& v) { return v.dot(p * v); }

/// Each factor of the joint log density, kept apart for diagnostics and tests.
struct LogPosteriorTerms {
  double data = 0.0;
  double scores = 0.0;
  double sigma2_prior = 0.0;
  double lambda_prior = 0.0;
  double h_prior = 0.0;
  double penalty = 0.0;
  double x_prior = 0.0;

  double total() const { return data + scores + sigma2_prior + lambda_prior + h_prior + penalty + x_prior; }
};

namespace detail {

inline void check_dims(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  if (basis.M() != data.M()) throw ValidationError("basis and data disagree on M");
  if (s.w_mu.size() != basis.Q() || s.X.rows() != basis.Q()) throw ValidationError("state and basis disagree on Q");
  if (s.Xi.rows() != data.N()) throw ValidationError("score rows do not match N");
  if (s.Xi.cols() != s.K() || s.lambda.size() != s.K() || s.h.size() != s.K())
    throw ValidationError("component count mismatch in state");
}

inline double x_prior_log_density(const Matrix& x) {
  return -0.5 * static_cast<double>(x.size()) * kLog2Pi - 0.5 * x.squaredNorm();
}

inline LogPosteriorTerms prior_terms(const FpcaState& s, const BasisSystem& basis, const PriorConfig& prior) {
  LogPosteriorTerms t;
  t.sigma2_prior = inverse_gamma_log_pdf(s.sigma2, prior.a_sigma, prior.b_sigma);
  t.h_prior = gamma_log_pdf(s.h_mu, prior.a_mu, prior.b_mu);
  t.penalty = -s.h_mu / (2.0 * s.sigma2) * quad_form(basis.Palpha, s.w_mu);
  for (Index k = 0; k < s.K(); ++k) {
    t.lambda_prior += inverse_gamma_log_pdf(s.lambda(k), prior.a_lambda, prior.b_lambda);
    t.h_prior += gamma_log_pdf(s.h(k), prior.a_psi, prior.b_psi);
    t.penalty -= s.h(k) / (2.0 * s.sigma2) * quad_form(basis.Palpha, s.Psi.col(k));
  }
  t.x_prior = x_prior_log_density(s.X);
  return t;
}

inline bool lambda_ordered(const Vector& lambda) {
  for (Index k = 1; k < lambda.size(); ++k)
    if (lambda(k) > lambda(k - 1)) return false;
  return true;
}

}  // namespace detail

/// Every factor of the joint posterior, with the latent X carrying an iid
/// N(0,1) prior in place of the Stiefel indicator.
inline LogPosteriorTerms log_posterior_terms(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                                             const PriorConfig& prior) {
  detail::check_dims(s, data, basis);
  LogPosteriorTerms t = detail::prior_terms(s, basis, prior);
  const Matrix r = residuals(s, data, basis);
  const double nm = static_cast<double>(data.N() * data.M());
  t.data = -0.5 * nm * (kLog2Pi + std::log(s.sigma2)) - 0.5 * r.squaredNorm() / s.sigma2;
  for (Index k = 0; k < s.K(); ++k) {
    const double lam = s.lambda(k);
    t.scores += -0.5 * static_cast<double>(data.N()) * (kLog2Pi + std::log(lam)) - 0.5 * s.Xi.col(k).squaredNorm() / lam;
  }
  return t;
}

inline double log_posterior(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                            const PriorConfig& prior) {
  if (!detail::lambda_ordered(s.lambda)) return -std::numeric_limits<double>::infinity();
  return log_posterior_terms(s, data, basis, prior).total();
}

/// Joint log density with the scores integrated out analytically.
inline double log_posterior_collapsed(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                                      const PriorConfig& prior) {
  detail::check_dims(s, data, basis);
  if (!detail::lambda_ordered(s.lambda)) return -std::numeric_limits<double>::infinity();
  LogPosteriorTerms t = detail::prior_terms(s, basis, prior);
  Matrix e = data.Y;
  e.rowwise() -= (basis.B * s.w_mu).transpose();
  const Matrix proj = e * basis.B * s.Psi;  // N x K: r_i' psi_k
  const double n = static_cast<double>(data.N());
  const double m = static_cast<double>(data.M());
  const Index k = s.K();
  double logdet = (m - static_cast<double>(k)) * std::log(s.sigma2);
  double explained = 0.0;
  for (Index j = 0; j < k; ++j) {
    logdet += std::log(s.lambda(j) + s.sigma2);
    const double d = s.lambda(j) / (s.lambda(j) + s.sigma2);
    explained += d * proj.col(j).squaredNorm();
  }
  t.data = -0.5 * n * (m * kLog2Pi + logdet) - 0.5 * (e.squaredNorm() - explained) / s.sigma2;
  return t.total();
}

// ---------------------------------------------------------------------------
// Full conditionals

struct ScoreConditional {
  Matrix mean;  // N x K
  Matrix var;   // N x K

  double log_density(const Matrix& xi) const {
    double out = 0.0;
    for (Index i = 0; i < mean.rows(); ++i)
      for (Index k = 0; k < mean.cols(); ++k) out += normal_log_pdf(xi(i, k), mean(i, k), var(i, k));
    return out;
  }

  Matrix sample(Rng& rng) const {
    Matrix out(mean.rows(), mean.cols());
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Index k = 0; k < mean.cols(); ++k)
      for (Index i = 0; i < mean.rows(); ++i) out(i, k) = mean(i, k) + std::sqrt(var(i, k)) * n01(rng);
    return out;
  }
};

/// xi_ik | rest ~ N(lambda_k (Y_i - B w)' B psi_k / (lambda_k + s2), lambda_k s2 / (lambda_k + s2)).
inline ScoreConditional conditional_scores(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  Matrix e = data.Y;
  e.rowwise() -= (basis.B * s.w_mu).transpose();
  const Matrix proj = e * (basis.B * s.Psi);
  ScoreConditional c;
  c.mean.resize(data.N(), s.K());
  c.var.resize(data.N(), s.K());
  for (Index k = 0; k < s.K(); ++k) {
    const double lam = s.lambda(k);
    const double shrink = lam / (lam + s.sigma2);
    c.mean.col(k) = shrink * proj.col(k);
    c.var.col(k).setConstant(shrink * s.sigma2);
  }
  return c;
}

/// Multivariate normal given as precision = A / s2, mean = A^{-1} b.
struct GaussianConditional {
  Vector mean;
  Matrix cov;
  Eigen::LLT<Matrix> chol_a;  // A = L L'
  double sigma2 = 1.0;

  static GaussianConditional from_precision(const Matrix& a, const Vector& b, double sigma2) {
    GaussianConditional g;
    g.chol_a.compute(a);
    if (g.chol_a.info() != Eigen::Success) throw SamplerFailure("singular precision in Gaussian conditional");
    g.mean = g.chol_a.solve(b);
    g.cov = sigma2 * g.chol_a.solve(Matrix::Identity(a.rows(), a.cols()));
    g.sigma2 = sigma2;
    return g;
  }

  Vector sample(Rng& rng) const {
    const Vector z = standard_normal_matrix(mean.size(), 1, rng);
    // cov = s2 (L L')^{-1}  =>  draw = mean + sqrt(s2) L^{-T} z
    return mean + std::sqrt(sigma2) * chol_a.matrixU().solve(z);
  }

  double log_density(const Vector& x) const {
    const Vector d = x - mean;
    const Matrix l = chol_a.matrixL();
    const double logdet_a = 2.0 * l.diagonal().array().log().sum();
    const double q = (l.transpose() * d).squaredNorm() / sigma2;
    const double n = static_cast<double>(mean.size());
    return -0.5 * n * (kLog2Pi + std::log(sigma2)) + 0.5 * logdet_a - 0.5 * q;
  }
};

/// w_mu | rest ~ N((N I + h_mu P)^{-1} sum_i [B'Y_i - sum_k xi_ik psi_k], s2 (N I + h_mu P)^{-1}).
inline GaussianConditional conditional_w_mu(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  const Index q = basis.Q();
  const double n = static_cast<double>(data.N());
  const Matrix a = n * Matrix::Identity(q, q) + s.h_mu * basis.Palpha;
  const Vector b = basis.B.transpose() * data.Y.colwise().sum().transpose() - s.Psi * s.Xi.colwise().sum().transpose();
  return GaussianConditional::from_precision(a, b, s.sigma2);
}

/// w_mu given everything except the scores, which are integrated out.
inline GaussianConditional conditional_w_mu_marginal(const FpcaState& s, const FunctionalDataset& data,
                                                     const BasisSystem& basis) {
  const Index q = basis.Q();
  const double n = static_cast<double>(data.N());
  Vector d(s.K());
  for (Index k = 0; k < s.K(); ++k) d(k) = s.lambda(k) / (s.lambda(k) + s.sigma2);
  const Matrix resid_proj = Matrix::Identity(q, q) - s.Psi * d.asDiagonal() * s.Psi.transpose();
  const Matrix a = n * resid_proj + s.h_mu * basis.Palpha;
  const Vector b = resid_proj * (basis.B.transpose() * data.Y.colwise().sum().transpose());
  return GaussianConditional::from_precision(0.5 * (a + a.transpose()), b, s.sigma2);
}

struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;

  double sample(Rng& rng) const { return draw_gamma(rng, shape, rate); }
  double log_density(double x) const { return gamma_log_pdf(x, shape, rate); }
  double mean() const { return shape / rate; }
  double variance() const { return shape / (rate * rate); }
};

struct InverseGammaParams {
  double shape = 1.0;
  double scale = 1.0;
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();

  double log_density(double x) const { return inverse_gamma_log_pdf(x, shape, scale); }
  double sample_untruncated(Rng& rng) const { return draw_inverse_gamma(rng, shape, scale); }
  double mean() const { return scale / (shape - 1.0); }
  double variance() const { return scale * scale / ((shape - 1.0) * (shape - 1.0) * (shape - 2.0)); }
};

/// Inverse-CDF draw from an inverse-Gamma restricted to [lower, upper].
///
/// Returns `current` and bumps `stalls` when the interval is numerically
/// collapsed or carries no representable probability mass.
inline double sample_truncated_inverse_gamma(const InverseGammaParams& p, double current, Rng& rng,
                                             std::size_t* stalls = nullptr) {
  auto stall = [&]() {
    if (stalls) ++*stalls;
    return current;
  };
  if (p.upper - p.lower < 1e-14 * std::abs(current)) return stall();
  // x in [lo, hi]  <=>  g = scale / x in [scale / hi, scale / lo], g ~ Gamma(shape, 1)
  const double g_lo = std::isinf(p.upper) ? 0.0 : p.scale / p.upper;
  const double g_hi = p.lower > 0.0 ? p.scale / p.lower : std::numeric_limits<double>::infinity();
  namespace bm = boost::math;
  const double p_lo = g_lo > 0.0 ? bm::gamma_p(p.shape, g_lo) : 0.0;
  const double p_hi = std::isinf(g_hi) ? 1.0 : bm::gamma_p(p.shape, g_hi);
  const bool upper_tail = p_lo > 0.5;
  for (int attempt = 0; attempt < 64; ++attempt) {
    double g;
    if (upper_tail) {
      const double q_lo = bm::gamma_q(p.shape, g_lo);
      const double q_hi = std::isinf(g_hi) ? 0.0 : bm::gamma_q(p.shape, g_hi);
      if (!(q_lo > q_hi)) return stall();
      const double u = q_hi + (q_lo - q_hi) * uniform01(rng);
      if (!(u > 0.0) || !(u < 1.0)) continue;
      g = bm::gamma_q_inv(p.shape, u);
    } else {
      if (!(p_hi > p_lo)) return stall();
      const double u = p_lo + (p_hi - p_lo) * uniform01(rng);
      if (!(u > 0.0) || !(u < 1.0)) continue;
      g = bm::gamma_p_inv(p.shape, u);
    }
    if (!(g > 0.0) || !std::isfinite(g)) continue;
    const double x = std::clamp(p.scale / g, p.lower, p.upper);
    if (x > 0.0 && std::isfinite(x)) return x;
  }
  return stall();
}

/// IG(n/2 + a_lambda, sum_i scores_ik^2 / 2 + b_lambda) restricted to [lambda_{k+1}, lambda_{k-1}],
/// for any score matrix with n rows and its eigenvalue ladder.
inline InverseGammaParams ordered_lambda_conditional(const Matrix& scores, const Vector& lambda, const PriorConfig& prior,
                                                     Index k) {
  if (k < 0 || k >= lambda.size()) throw ValidationError("component index out of range");
  InverseGammaParams p;
  p.shape = 0.5 * static_cast<double>(scores.rows()) + prior.a_lambda;
  p.scale = 0.5 * scores.col(k).squaredNorm() + prior.b_lambda;
  p.upper = k > 0 ? lambda(k - 1) : std::numeric_limits<double>::infinity();
  p.lower = k + 1 < lambda.size() ? lambda(k + 1) : 0.0;
  return p;
}

/// lambda_k | rest ~ IG(N/2 + a_lambda, sum_i xi_ik^2 / 2 + b_lambda) on [lambda_{k+1}, lambda_{k-1}].
inline InverseGammaParams conditional_lambda(const FpcaState& s, const PriorConfig& prior, Index k) {
  return ordered_lambda_conditional(s.Xi, s.lambda, prior, k);
}

/// h_mu | rest ~ Gamma(a_mu, w' P w / (2 s2) + b_mu).
inline GammaParams conditional_h_mu(const FpcaState& s, const BasisSystem& basis, const PriorConfig& prior) {
  return {prior.a_mu, quad_form(basis.Palpha, s.w_mu) / (2.0 * s.sigma2) + prior.b_mu};
}

/// h_k | rest ~ Gamma(a_psi, psi_k' P psi_k / (2 s2) + b_psi).
inline GammaParams conditional_h(const FpcaState& s, const BasisSystem& basis, const PriorConfig& prior, Index k) {
  return {prior.a_psi, quad_form(basis.Palpha, s.Psi.col(k)) / (2.0 * s.sigma2) + prior.b_psi};
}

/// sigma2 | rest ~ IG(NM/2 + a_sigma, [RSS + h_mu w'Pw + sum_k h_k psi_k'P psi_k + 2 b_sigma] / 2).
inline InverseGammaParams conditional_sigma2(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis,
                                             const PriorConfig& prior) {
  InverseGammaParams p;
  p.shape = 0.5 * static_cast<double>(data.N() * data.M()) + prior.a_sigma;
  double scale = residuals(s, data, basis).squaredNorm() + s.h_mu * quad_form(basis.Palpha, s.w_mu) + 2.0 * prior.b_sigma;
  for (Index k = 0; k < s.K(); ++k) scale += s.h(k) * quad_form(basis.Palpha, s.Psi.col(k));
  p.scale = 0.5 * scale;
  return p;
}

// ---------------------------------------------------------------------------
// Target for the latent Stiefel block

/// f(Psi) = tr(L' Psi) + 1/2 sum_k psi_k' A_k psi_k, evaluated through Psi = polar(X),
/// plus the iid N(0,1) log density of X.
struct StiefelTarget {
  Matrix linear;             // Q x K
  std::vector<Matrix> quad;  // K matrices, Q x Q, symmetric

  double value_psi(const Matrix& psi) const {
    double v = (linear.array() * psi.array()).sum();
    for (std::size_t k = 0; k < quad.size(); ++k) {
      const auto col = psi.col(static_cast<Index>(k));
      v += 0.5 * col.dot(quad[k] * col);
    }
    return v;
  }

  Matrix gradient_psi(const Matrix& psi) const {
    Matrix g = linear;
    for (std::size_t k = 0; k < quad.size(); ++k) g.col(static_cast<Index>(k)) += quad[k] * psi.col(static_cast<Index>(k));
    return g;
  }

  Matrix polar(const Matrix& x) const { return polar_decompose(x).psi; }

  /// log target at X; throws PolarUndefined for rank-deficient X.
  double log_density(const Matrix& x) const { return value_psi(polar_decompose(x).psi) - 0.5 * x.squaredNorm(); }

  Matrix gradient(const Matrix& x) const {
    const Matrix psi = polar_decompose(x).psi;
    return polar_pullback(x, gradient_psi(psi)) - x;
  }
};

/// Psi-dependent part of the full conditional with the scores held fixed
/// (generalized Bingham-von Mises-Fisher form).
inline StiefelTarget conditional_x_target(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  Matrix e = data.Y;
  e.rowwise() -= (basis.B * s.w_mu).transpose();
  StiefelTarget t;
  t.linear = (basis.B.transpose() * e.transpose()) * s.Xi / s.sigma2;
  t.quad.reserve(static_cast<std::size_t>(s.K()));
  for (Index k = 0; k < s.K(); ++k) t.quad.push_back(-s.h(k) / s.sigma2 * basis.Palpha);
  return t;
}

/// Psi-dependent part of the posterior with the scores integrated out:
/// A_k = (d_k S - h_k P) / s2, S = sum_i r_i r_i', d_k = lambda_k / (lambda_k + s2).
inline StiefelTarget collapsed_x_target(const FpcaState& s, const Matrix& projected_resid, const BasisSystem& basis) {
  const Matrix scatter = projected_resid.transpose() * projected_resid;
  StiefelTarget t;
  t.linear = Matrix::Zero(s.Q(), s.K());
  t.quad.reserve(static_cast<std::size_t>(s.K()));
  for (Index k = 0; k < s.K(); ++k) {
    const double d = s.lambda(k) / (s.lambda(k) + s.sigma2);
    t.quad.push_back((d * scatter - s.h(k) * basis.Palpha) / s.sigma2);
  }
  return t;
}

inline StiefelTarget collapsed_x_target(const FpcaState& s, const FunctionalDataset& data, const BasisSystem& basis) {
  Matrix r = data.Y * basis.B;  // N x Q
  r.rowwise() -= s.w_mu.transpose();
  return collapsed_x_target(s, r, basis);
}

}  // namespace bfpca
