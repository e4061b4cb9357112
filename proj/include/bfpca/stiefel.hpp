#pragma once

// Polar map onto the Stiefel manifold and column alignment of orthonormal frames.

#include <bfpca/core.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numeric>
#include <vector>

namespace bfpca {

struct PolarDecomposition {
  Matrix psi;  // Q x K, orthonormal columns
  Matrix p;    // K x K, symmetric positive semi-definite
};

/// Relative eigenvalue floor below which the polar factor is refused.
inline constexpr double kPolarRankTolerance = 1e-12;

/// X = Psi P through the eigendecomposition X'X = Z D Z', Psi = X Z D^{-1/2} Z'.
inline PolarDecomposition polar_decompose(const Matrix& x) {
  if (x.rows() < x.cols()) throw ValidationError("polar decomposition needs rows >= cols");
  const Index k = x.cols();
  if (k == 0) return {Matrix(x.rows(), 0), Matrix(0, 0)};
  if (!x.allFinite()) throw PolarUndefined("polar undefined: non-finite input");
  const Matrix gram = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const Vector& d = eig.eigenvalues();
  const double dmax = d.maxCoeff();
  if (!(dmax > 0.0) || !(d.minCoeff() > kPolarRankTolerance * dmax))
    throw PolarUndefined("polar undefined: input is rank deficient");
  const Matrix& z = eig.eigenvectors();
  const Matrix inv_sqrt = z * d.cwiseSqrt().cwiseInverse().asDiagonal() * z.transpose();
  PolarDecomposition out;
  out.psi = x * inv_sqrt;
  const Matrix p = out.psi.transpose() * x;
  out.p = 0.5 * (p + p.transpose());
  return out;
}

/// Uniform draw on V_{Q,K}: polar factor of an iid standard-normal Q x K matrix.
inline Matrix sample_uniform_stiefel(Index q, Index k, Rng& rng) {
  if (q < k) throw ValidationError("Stiefel sampling needs Q >= K");
  for (;;) {
    Matrix x = standard_normal_matrix(q, k, rng);
    try {
      return polar_decompose(x).psi;
    } catch (const PolarUndefined&) {
      // probability zero; redraw
    }
  }
}

/// Closest matrix with orthonormal columns in Frobenius norm.
inline Matrix project_stiefel(const Matrix& a) { return polar_decompose(a).psi; }

/// Pulls a gradient with respect to Psi = polar(X) back to a gradient with
/// respect to X. Uses the Daleckii-Krein form of d(S^{-1/2}) with S = X'X.
inline Matrix polar_pullback(const Matrix& x, const Matrix& grad_psi) {
  const Index k = x.cols();
  if (k == 0) return Matrix::Zero(x.rows(), 0);
  const Matrix gram = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const Matrix& z = eig.eigenvectors();
  const Vector root = eig.eigenvalues().cwiseSqrt();
  const Matrix inv_sqrt = z * root.cwiseInverse().asDiagonal() * z.transpose();
  // F_ij = (d_i^{-1/2} - d_j^{-1/2}) / (d_i - d_j) = -1 / (a_i a_j (a_i + a_j)), a = sqrt(d)
  Matrix f(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) f(i, j) = -1.0 / (root(i) * root(j) * (root(i) + root(j)));
  const Matrix a = x.transpose() * grad_psi;
  const Matrix c = z * (z.transpose() * a * z).cwiseProduct(f) * z.transpose();
  return grad_psi * inv_sqrt + x * (c + c.transpose());
}

/// Column k of the aligned matrix is sign[k] * column perm[k] of the input.
struct SignedPermutation {
  std::vector<int> perm;
  std::vector<int> sign;

  static SignedPermutation identity(Index k) {
    SignedPermutation s;
    s.perm.resize(static_cast<std::size_t>(k));
    std::iota(s.perm.begin(), s.perm.end(), 0);
    s.sign.assign(static_cast<std::size_t>(k), 1);
    return s;
  }

  bool is_identity() const {
    for (std::size_t k = 0; k < perm.size(); ++k)
      if (perm[k] != static_cast<int>(k) || sign[k] != 1) return false;
    return true;
  }

  /// Applies to the columns of `a` (any row count).
  Matrix apply_columns(const Matrix& a) const {
    Matrix out(a.rows(), a.cols());
    for (std::size_t k = 0; k < perm.size(); ++k) out.col(static_cast<Index>(k)) = sign[k] * a.col(perm[k]);
    return out;
  }

  /// Permutes entries without sign change (eigenvalues, smoothing parameters).
  Vector apply_entries(const Vector& v) const {
    Vector out(v.size());
    for (std::size_t k = 0; k < perm.size(); ++k) out(static_cast<Index>(k)) = v(perm[k]);
    return out;
  }

  /// this applied after `first`.
  SignedPermutation compose(const SignedPermutation& first) const {
    SignedPermutation out;
    out.perm.resize(perm.size());
    out.sign.resize(perm.size());
    for (std::size_t k = 0; k < perm.size(); ++k) {
      out.perm[k] = first.perm[static_cast<std::size_t>(perm[k])];
      out.sign[k] = sign[k] * first.sign[static_cast<std::size_t>(perm[k])];
    }
    return out;
  }
};

/// Column similarity used for alignment. InnerProduct is the L2 (uncentered)
/// correlation; Correlation is Pearson's, falling back to the inner product
/// for a zero-variance column.
enum class AlignmentMetric { InnerProduct, Correlation };

namespace detail {

inline double cosine_similarity(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  const double ra = a.norm();
  const double rb = b.norm();
  if (ra == 0.0 || rb == 0.0) return 0.0;
  return a.dot(b) / (ra * rb);
}

inline double column_similarity(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                                AlignmentMetric metric = AlignmentMetric::InnerProduct) {
  if (metric == AlignmentMetric::InnerProduct) return cosine_similarity(a, b);
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double na = ac.norm();
  const double nb = bc.norm();
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  const double tiny = 1e-14 * std::max(scale, 1e-300) * std::sqrt(static_cast<double>(a.size()));
  if (na > tiny && nb > tiny) return ac.dot(bc) / (na * nb);
  return cosine_similarity(a, b);
}

}  // namespace detail

inline constexpr Index kMaxAlignComponents = 6;

/// Best signed permutation of `sample`'s columns against `reference`.
///
/// Maximizes sum_k |sim(sample[:, perm[k]], reference[:, k])| by enumeration
/// in lexicographic order (first maximum wins), then fixes each sign so the
/// matched similarity is nonnegative.
inline SignedPermutation best_alignment(const Matrix& sample, const Matrix& reference,
                                        AlignmentMetric metric = AlignmentMetric::InnerProduct) {
  if (sample.rows() != reference.rows() || sample.cols() != reference.cols())
    throw ValidationError("alignment: sample and reference shapes differ");
  const Index k = reference.cols();
  if (k > kMaxAlignComponents) throw ValidationError("alignment supports at most 6 components");
  Matrix sim(k, k);  // sim(i, j): sample col i vs reference col j
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) sim(i, j) = detail::column_similarity(sample.col(i), reference.col(j), metric);

  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_score = -1.0;
  do {
    double score = 0.0;
    for (Index j = 0; j < k; ++j) score += std::abs(sim(perm[static_cast<std::size_t>(j)], j));
    if (score > best_score + 1e-12) {
      best_score = score;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  SignedPermutation out;
  out.perm = best;
  out.sign.resize(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) out.sign[static_cast<std::size_t>(j)] = sim(best[static_cast<std::size_t>(j)], j) < 0.0 ? -1 : 1;
  return out;
}

struct AlignedSamples {
  std::vector<Matrix> samples;
  std::vector<SignedPermutation> transforms;
};

inline AlignedSamples align_samples(const std::vector<Matrix>& samples, const Matrix& reference,
                                    AlignmentMetric metric = AlignmentMetric::InnerProduct) {
  AlignedSamples out;
  out.samples.reserve(samples.size());
  out.transforms.reserve(samples.size());
  for (const auto& s : samples) {
    auto t = best_alignment(s, reference, metric);
    out.samples.push_back(t.apply_columns(s));
    out.transforms.push_back(std::move(t));
  }
  return out;
}

}  // namespace bfpca
