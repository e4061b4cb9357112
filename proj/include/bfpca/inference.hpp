#pragma once

// Posterior summaries: aligned bands, Stiefel-projected point estimates,
// eigenvalue and variance-explained intervals, ISE and coverage.

#include <bfpca/diagnostics.hpp>
#include <bfpca/multilevel.hpp>
#include <bfpca/sampler.hpp>

namespace bfpca {

inline constexpr double kBandLower = 0.025;
inline constexpr double kBandUpper = 0.975;

/// Pointwise mean and equal-tail 95% interval.
struct Band {
  Vector mean, lo, hi;

  Index size() const { return mean.size(); }

  Band negated() const { return {-mean, -hi, -lo}; }
};

/// Band over the rows of `draws` (each column one draw).
inline Band band_of(const Matrix& draws) {
  Band b;
  const Index n = draws.rows();
  b.mean.resize(n);
  b.lo.resize(n);
  b.hi.resize(n);
  std::vector<double> row(static_cast<std::size_t>(draws.cols()));
  for (Index i = 0; i < n; ++i) {
    for (Index d = 0; d < draws.cols(); ++d) row[static_cast<std::size_t>(d)] = draws(i, d);
    b.mean(i) = mean_of(row);
    b.lo(i) = quantile(row, kBandLower);
    b.hi(i) = quantile(row, kBandUpper);
  }
  return b;
}

struct ScalarSummary {
  double mean = 0.0, lo = 0.0, hi = 0.0;
};

inline ScalarSummary scalar_summary(const std::vector<double>& v) {
  return {mean_of(v), quantile(v, kBandLower), quantile(v, kBandUpper)};
}

/// One level of eigenfunctions with its scores and eigenvalues, aligned across draws.
struct ComponentSummary {
  std::vector<Band> phi;  // per component, M grid points
  Matrix phi_estimate;    // project_stiefel of the pointwise mean
  std::vector<ScalarSummary> lambda;
  std::vector<ScalarSummary> pve;  // percent of the level's variance, as a fraction
  Band scores;                     // score (i, k) stored at i + k * n
  Index n_units = 0;               // rows of the score matrix
  std::vector<SignedPermutation> transforms;  // per draw, draw -> reference frame
  std::vector<Matrix> aligned_scores;         // per draw, n_units x K

  Index K() const { return static_cast<Index>(phi.size()); }

  Matrix score_lo() const { return Eigen::Map<const Matrix>(scores.lo.data(), n_units, K()); }
  Matrix score_hi() const { return Eigen::Map<const Matrix>(scores.hi.data(), n_units, K()); }
  Matrix score_mean() const { return Eigen::Map<const Matrix>(scores.mean.data(), n_units, K()); }

  /// Re-expresses every component quantity under a further signed permutation.
  ComponentSummary transformed(const SignedPermutation& t) const {
    ComponentSummary out = *this;
    const Index k = K();
    Matrix lo = score_lo(), hi = score_hi(), mean = score_mean();
    Matrix nlo(n_units, k), nhi(n_units, k), nmean(n_units, k);
    for (Index j = 0; j < k; ++j) {
      const auto src = static_cast<std::size_t>(t.perm[static_cast<std::size_t>(j)]);
      const bool flip = t.sign[static_cast<std::size_t>(j)] < 0;
      out.phi[static_cast<std::size_t>(j)] = flip ? phi[src].negated() : phi[src];
      out.lambda[static_cast<std::size_t>(j)] = lambda[src];
      out.pve[static_cast<std::size_t>(j)] = pve[src];
      nmean.col(j) = (flip ? -1.0 : 1.0) * mean.col(static_cast<Index>(src));
      nlo.col(j) = flip ? Vector(-hi.col(static_cast<Index>(src))) : Vector(lo.col(static_cast<Index>(src)));
      nhi.col(j) = flip ? Vector(-lo.col(static_cast<Index>(src))) : Vector(hi.col(static_cast<Index>(src)));
    }
    out.phi_estimate = t.apply_columns(phi_estimate);
    out.scores = {Eigen::Map<Vector>(nmean.data(), nmean.size()), Eigen::Map<Vector>(nlo.data(), nlo.size()),
                  Eigen::Map<Vector>(nhi.data(), nhi.size())};
    for (std::size_t d = 0; d < transforms.size(); ++d) {
      out.transforms[d] = t.compose(transforms[d]);
      out.aligned_scores[d] = t.apply_columns(aligned_scores[d]);
    }
    return out;
  }
};

struct FunctionalSummary {
  Vector grid;
  Band mu;
  ComponentSummary level1;
  ComponentSummary level2;  // multilevel fits only
  bool multilevel = false;
  ScalarSummary sigma2;
  std::size_t n_draws = 0;
};

namespace detail {

/// phis: data-space eigenfunctions per draw; reference defaults to the first draw.
inline ComponentSummary summarize_level(const std::vector<Matrix>& phis, const std::vector<const Matrix*>& scores,
                                        const std::vector<const Vector*>& lambdas, const Matrix* reference) {
  ComponentSummary out;
  const std::size_t nd = phis.size();
  const Index m = phis.front().rows();
  const Index k = phis.front().cols();
  const AlignedSamples aligned = align_samples(phis, reference ? *reference : phis.front());
  out.transforms = aligned.transforms;
  out.n_units = scores.front()->rows();
  Matrix col(m, static_cast<Index>(nd));
  Matrix mean_phi(m, k);
  for (Index j = 0; j < k; ++j) {
    for (std::size_t d = 0; d < nd; ++d) col.col(static_cast<Index>(d)) = aligned.samples[d].col(j);
    out.phi.push_back(band_of(col));
    mean_phi.col(j) = out.phi.back().mean;
  }
  out.phi_estimate = k > 0 ? project_stiefel(mean_phi) : Matrix(m, 0);

  std::vector<std::vector<double>> lam(static_cast<std::size_t>(k)), pve(static_cast<std::size_t>(k));
  Matrix score_draws(out.n_units * k, static_cast<Index>(nd));
  out.aligned_scores.reserve(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    const Vector l = aligned.transforms[d].apply_entries(*lambdas[d]);
    const double total = l.sum();
    for (Index j = 0; j < k; ++j) {
      lam[static_cast<std::size_t>(j)].push_back(l(j));
      pve[static_cast<std::size_t>(j)].push_back(l(j) / total);
    }
    Matrix sc = aligned.transforms[d].apply_columns(*scores[d]);
    score_draws.col(static_cast<Index>(d)) = Eigen::Map<const Vector>(sc.data(), sc.size());
    out.aligned_scores.push_back(std::move(sc));
  }
  for (Index j = 0; j < k; ++j) {
    out.lambda.push_back(scalar_summary(lam[static_cast<std::size_t>(j)]));
    out.pve.push_back(scalar_summary(pve[static_cast<std::size_t>(j)]));
  }
  out.scores = band_of(score_draws);
  return out;
}

}  // namespace detail

/// Aligns every draw to `reference` (default: the first retained draw) and
/// summarizes mu, the eigenfunctions, eigenvalues, PVE, scores and sigma2.
inline FunctionalSummary summarize(const PosteriorSamples& samples, const BasisSystem& basis,
                                   const Matrix* reference = nullptr) {
  if (samples.draws.size() < 2) throw ValidationError("summarize needs at least 2 retained draws");
  FunctionalSummary out;
  out.grid = basis.grid.as_vector();
  out.n_draws = samples.draws.size();
  const Index nd = static_cast<Index>(samples.draws.size());
  Matrix mu(basis.M(), nd);
  std::vector<Matrix> phis;
  std::vector<const Matrix*> scores;
  std::vector<const Vector*> lambdas;
  std::vector<double> s2;
  for (Index d = 0; d < nd; ++d) {
    const FpcaState& s = samples.draws[static_cast<std::size_t>(d)].state;
    mu.col(d) = basis.B * s.w_mu;
    phis.push_back(basis.B * s.Psi);
    scores.push_back(&s.Xi);
    lambdas.push_back(&s.lambda);
    s2.push_back(s.sigma2);
  }
  out.mu = band_of(mu);
  out.level1 = detail::summarize_level(phis, scores, lambdas, reference);
  out.sigma2 = scalar_summary(s2);
  return out;
}

inline FunctionalSummary summarize_multilevel(const MultilevelSamples& samples, const BasisSystem& basis) {
  if (samples.draws.size() < 2) throw ValidationError("summarize needs at least 2 retained draws");
  FunctionalSummary out;
  out.multilevel = true;
  out.grid = basis.grid.as_vector();
  out.n_draws = samples.draws.size();
  const Index nd = static_cast<Index>(samples.draws.size());
  Matrix mu(basis.M(), nd);
  std::vector<Matrix> phi1, phi2;
  std::vector<const Matrix*> xi, zeta;
  std::vector<const Vector*> lam1, lam2;
  std::vector<double> s2;
  for (Index d = 0; d < nd; ++d) {
    const MfpcaState& s = samples.draws[static_cast<std::size_t>(d)].state;
    mu.col(d) = basis.B * s.w_mu;
    phi1.push_back(basis.B * s.Psi1);
    phi2.push_back(basis.B * s.Psi2);
    xi.push_back(&s.Xi);
    zeta.push_back(&s.Zeta);
    lam1.push_back(&s.lambda1);
    lam2.push_back(&s.lambda2);
    s2.push_back(s.sigma2);
  }
  out.mu = band_of(mu);
  out.level1 = detail::summarize_level(phi1, xi, lam1, nullptr);
  out.level2 = detail::summarize_level(phi2, zeta, lam2, nullptr);
  out.sigma2 = scalar_summary(s2);
  return out;
}

/// Maps a summarized level onto the component order and signs of `truth`.
inline ComponentSummary align_to_truth(const ComponentSummary& level, const Matrix& truth) {
  return level.transformed(best_alignment(level.phi_estimate, truth));
}

/// (1/M) sum_m (estimate_m - truth_m)^2.
inline double ise(const Vector& estimate, const Vector& truth) {
  if (estimate.size() != truth.size()) throw ValidationError("ise: length mismatch");
  if (estimate.size() == 0) throw ValidationError("ise: empty input");
  return (estimate - truth).squaredNorm() / static_cast<double>(estimate.size());
}

/// Fraction of points with lower <= truth <= upper.
inline double pointwise_coverage(const Vector& lower, const Vector& upper, const Vector& truth) {
  if (lower.size() != upper.size() || lower.size() != truth.size()) throw ValidationError("coverage: length mismatch");
  if (truth.size() == 0) throw ValidationError("coverage: empty input");
  Index inside = 0;
  for (Index m = 0; m < truth.size(); ++m) {
    if (lower(m) > upper(m)) throw ValidationError("coverage: band inverted at point " + std::to_string(m));
    if (lower(m) <= truth(m) && truth(m) <= upper(m)) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(truth.size());
}

inline double pointwise_coverage(const Band& band, const Vector& truth) {
  return pointwise_coverage(band.lo, band.hi, truth);
}

/// Per-component fraction of units whose true score lies in its interval.
inline Vector score_coverage(const Matrix& lower, const Matrix& upper, const Matrix& truth) {
  if (lower.rows() != truth.rows() || lower.cols() != truth.cols() || upper.rows() != truth.rows() ||
      upper.cols() != truth.cols())
    throw ValidationError("score coverage: dimension mismatch");
  Vector out(truth.cols());
  for (Index k = 0; k < truth.cols(); ++k)
    out(k) = pointwise_coverage(lower.col(k), upper.col(k), truth.col(k));
  return out;
}

/// Score coverage from aligned per-draw score matrices (equal-tail 95%).
inline Vector score_coverage(const std::vector<Matrix>& aligned_scores, const Matrix& truth) {
  if (aligned_scores.empty()) throw ValidationError("score coverage: no draws");
  Matrix draws(truth.size(), static_cast<Index>(aligned_scores.size()));
  for (std::size_t d = 0; d < aligned_scores.size(); ++d) {
    if (aligned_scores[d].rows() != truth.rows() || aligned_scores[d].cols() != truth.cols())
      throw ValidationError("score coverage: dimension mismatch");
    draws.col(static_cast<Index>(d)) = Eigen::Map<const Vector>(aligned_scores[d].data(), aligned_scores[d].size());
  }
  const Band b = band_of(draws);
  return score_coverage(Eigen::Map<const Matrix>(b.lo.data(), truth.rows(), truth.cols()),
                        Eigen::Map<const Matrix>(b.hi.data(), truth.rows(), truth.cols()), truth);
}

/// |corr| between matched columns after the best signed permutation.
inline Vector aligned_correlations(const Matrix& estimate, const Matrix& truth) {
  const SignedPermutation t = best_alignment(estimate, truth);
  const Matrix a = t.apply_columns(estimate);
  Vector out(truth.cols());
  for (Index k = 0; k < truth.cols(); ++k) out(k) = detail::column_similarity(a.col(k), truth.col(k));
  return out;
}

}  // namespace bfpca
