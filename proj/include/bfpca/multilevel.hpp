#pragma once

// Two-level (subject / visit) extension: nested Stiefel blocks, two score
// sets, two eigenvalue ladders, shared noise and optional visit means.

#include <bfpca/sampler.hpp>

#include <set>

namespace bfpca {

struct MultilevelDataset {
  Matrix Y;  // one row per (subject, visit)
  Grid grid;
  std::vector<Index> subject;  // row -> subject index
  std::vector<Index> visit;    // row -> visit index
  std::vector<std::string> subject_ids;
  std::vector<std::string> visit_ids;

  Index rows() const { return Y.rows(); }
  Index M() const { return Y.cols(); }
  Index N() const { return static_cast<Index>(subject_ids.size()); }
  Index J() const { return static_cast<Index>(visit_ids.size()); }

  void validate() const {
    if (static_cast<std::size_t>(Y.cols()) != grid.size())
      throw ValidationError("data has " + std::to_string(Y.cols()) + " columns but grid has " +
                            std::to_string(grid.size()) + " points");
    if (subject.size() != static_cast<std::size_t>(Y.rows()) || visit.size() != static_cast<std::size_t>(Y.rows()))
      throw ValidationError("subject/visit keys do not match the number of rows");
    std::vector<Index> count(subject_ids.size(), 0);
    std::set<std::pair<Index, Index>> seen;
    for (std::size_t r = 0; r < subject.size(); ++r) {
      if (subject[r] < 0 || subject[r] >= N()) throw ValidationError("subject index out of range at row " + std::to_string(r));
      if (visit[r] < 0 || visit[r] >= J()) throw ValidationError("visit index out of range at row " + std::to_string(r));
      if (!seen.insert({subject[r], visit[r]}).second)
        throw ValidationError("duplicate (subject, visit) key (" + subject_ids[static_cast<std::size_t>(subject[r])] + ", " +
                              visit_ids[static_cast<std::size_t>(visit[r])] + ")");
      ++count[static_cast<std::size_t>(subject[r])];
    }
    for (std::size_t i = 0; i < count.size(); ++i)
      if (count[i] == 0) throw ValidationError("subject '" + subject_ids[i] + "' has no visits");
    for (Index r = 0; r < Y.rows(); ++r)
      for (Index m = 0; m < Y.cols(); ++m)
        if (!std::isfinite(Y(r, m)))
          throw ValidationError("missing or non-finite value at row " + std::to_string(r) + ", column " + std::to_string(m));
  }

  std::vector<std::vector<Index>> rows_by_subject() const {
    std::vector<std::vector<Index>> out(static_cast<std::size_t>(N()));
    for (std::size_t r = 0; r < subject.size(); ++r) out[static_cast<std::size_t>(subject[r])].push_back(static_cast<Index>(r));
    return out;
  }

  bool has_replicates() const {
    for (const auto& rows : rows_by_subject())
      if (rows.size() >= 2) return true;
    return false;
  }

  /// Dataset with subjects and visits labelled by their indices.
  static MultilevelDataset indexed(Matrix y, Grid grid, std::vector<Index> subject, std::vector<Index> visit) {
    MultilevelDataset d;
    d.Y = std::move(y);
    d.grid = std::move(grid);
    Index n = 0, j = 0;
    for (Index s : subject) n = std::max(n, s + 1);
    for (Index v : visit) j = std::max(j, v + 1);
    for (Index i = 0; i < n; ++i) d.subject_ids.push_back(std::to_string(i + 1));
    for (Index v = 0; v < j; ++v) d.visit_ids.push_back(std::to_string(v + 1));
    d.subject = std::move(subject);
    d.visit = std::move(visit);
    return d;
  }
};

struct MultilevelSpec {
  Index k1 = 2;
  Index k2 = 2;
  bool visit_effects = false;  // eta_j
};

struct MfpcaState {
  Vector w_mu;
  Matrix eta;  // J x Q visit deviations; zero rows when disabled
  Matrix X1, Psi1;
  Matrix X2, Psi2;
  Matrix Xi;    // N x K1
  Matrix Zeta;  // rows x K2
  Vector lambda1, lambda2;
  double sigma2 = 1.0;
  double h_mu = 1.0;
  Vector h1, h2;
  double h_eta = 1.0;

  Index K1() const { return X1.cols(); }
  Index K2() const { return X2.cols(); }
  Index Q() const { return w_mu.size(); }
  bool has_eta() const { return eta.rows() > 0; }

  void set_X1(Matrix x) {
    Psi1 = polar_decompose(x).psi;
    X1 = std::move(x);
  }
  void set_X2(Matrix x) {
    Psi2 = polar_decompose(x).psi;
    X2 = std::move(x);
  }

  std::string invariant_violation(double tol = 1e-8) const {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) return "sigma2 must be positive";
    if (!(h_mu > 0.0) || !std::isfinite(h_mu)) return "h_mu must be positive";
    if (has_eta() && !(h_eta > 0.0)) return "h_eta must be positive";
    auto ladder = [](const Vector& lam, const Vector& h) -> std::string {
      if (lam.size() != h.size()) return "component count mismatch";
      for (Index k = 0; k < lam.size(); ++k) {
        if (!(lam(k) > 0.0) || !std::isfinite(lam(k))) return "lambda must be positive";
        if (k > 0 && lam(k) > lam(k - 1)) return "lambda must be nonincreasing";
        if (!(h(k) > 0.0) || !std::isfinite(h(k))) return "h must be positive";
      }
      return {};
    };
    if (auto v = ladder(lambda1, h1); !v.empty()) return "level 1: " + v;
    if (auto v = ladder(lambda2, h2); !v.empty()) return "level 2: " + v;
    if (Xi.cols() != K1() || Zeta.cols() != K2()) return "score columns do not match components";
    if (max_identity_deviation(Psi1.transpose() * Psi1) > tol) return "Psi1 is not orthonormal";
    if (max_identity_deviation(Psi2.transpose() * Psi2) > tol) return "Psi2 is not orthonormal";
    return {};
  }
};

namespace detail {

/// Data reduced to basis coefficients; the part orthogonal to span(B) only
/// enters the residual sum of squares.
struct MlCache {
  Matrix C;  // rows x Q, Y B
  double orth_rss = 0.0;
  std::vector<std::vector<Index>> by_subject;
  std::vector<std::vector<Index>> by_visit;

  MlCache(const MultilevelDataset& data, const BasisSystem& basis) {
    if (basis.M() != data.M()) throw ValidationError("basis and data disagree on M");
    C = data.Y * basis.B;
    orth_rss = std::max(0.0, data.Y.squaredNorm() - C.squaredNorm());
    by_subject = data.rows_by_subject();
    by_visit.resize(static_cast<std::size_t>(data.J()));
    for (std::size_t r = 0; r < data.visit.size(); ++r) by_visit[static_cast<std::size_t>(data.visit[r])].push_back(static_cast<Index>(r));
  }
};

/// Coefficient rows with w_mu and eta removed.
inline Matrix centered_coefficients(const MfpcaState& s, const MultilevelDataset& data, const MlCache& cache) {
  Matrix d = cache.C;
  d.rowwise() -= s.w_mu.transpose();
  if (s.has_eta())
    for (Index r = 0; r < d.rows(); ++r) d.row(r) -= s.eta.row(data.visit[static_cast<std::size_t>(r)]);
  return d;
}

inline Matrix subject_means(const Matrix& rows, const MlCache& cache) {
  Matrix out = Matrix::Zero(static_cast<Index>(cache.by_subject.size()), rows.cols());
  for (std::size_t i = 0; i < cache.by_subject.size(); ++i) {
    for (Index r : cache.by_subject[i]) out.row(static_cast<Index>(i)) += rows.row(r);
    out.row(static_cast<Index>(i)) /= static_cast<double>(cache.by_subject[i].size());
  }
  return out;
}

inline Matrix expand_subject_scores(const MfpcaState& s, const MultilevelDataset& data) {
  Matrix out(data.rows(), s.Xi.cols());
  for (Index r = 0; r < data.rows(); ++r) out.row(r) = s.Xi.row(data.subject[static_cast<std::size_t>(r)]);
  return out;
}

inline void check_ml_dims(const MfpcaState& s, const MultilevelDataset& data, const BasisSystem& basis) {
  const Index q = basis.Q();
  if (basis.M() != data.M()) throw ValidationError("basis and data disagree on M");
  if (s.w_mu.size() != q || s.X1.rows() != q || s.X2.rows() != q) throw ValidationError("state and basis disagree on Q");
  if (s.K1() + s.K2() > q) throw ValidationError("K1 + K2 must not exceed Q");
  if (s.Xi.rows() != data.N() || s.Zeta.rows() != data.rows()) throw ValidationError("score rows do not match the data");
  if (s.has_eta() && (s.eta.rows() != data.J() || s.eta.cols() != q)) throw ValidationError("eta shape does not match J x Q");
}

}  // namespace detail

/// Data-space residual of every row.
inline Matrix mfpca_residuals(const MfpcaState& s, const MultilevelDataset& data, const BasisSystem& basis) {
  Matrix coef = detail::expand_subject_scores(s, data) * s.Psi1.transpose() + s.Zeta * s.Psi2.transpose();
  coef.rowwise() += s.w_mu.transpose();
  if (s.has_eta())
    for (Index r = 0; r < coef.rows(); ++r) coef.row(r) += s.eta.row(data.visit[static_cast<std::size_t>(r)]);
  return data.Y - coef * basis.B.transpose();
}

inline LogPosteriorTerms mfpca_log_posterior_terms(const MfpcaState& s, const MultilevelDataset& data,
                                                   const BasisSystem& basis, const PriorConfig& prior) {
  detail::check_ml_dims(s, data, basis);
  LogPosteriorTerms t;
  const double rm = static_cast<double>(data.rows() * data.M());
  t.data = -0.5 * rm * (kLog2Pi + std::log(s.sigma2)) - 0.5 * mfpca_residuals(s, data, basis).squaredNorm() / s.sigma2;
  auto level = [&](const Matrix& scores, const Vector& lam, const Vector& h, const Matrix& psi, const Matrix& x) {
    for (Index k = 0; k < lam.size(); ++k) {
      t.scores += -0.5 * static_cast<double>(scores.rows()) * (kLog2Pi + std::log(lam(k))) - 0.5 * scores.col(k).squaredNorm() / lam(k);
      t.lambda_prior += inverse_gamma_log_pdf(lam(k), prior.a_lambda, prior.b_lambda);
      t.h_prior += gamma_log_pdf(h(k), prior.a_psi, prior.b_psi);
      t.penalty -= h(k) / (2.0 * s.sigma2) * quad_form(basis.Palpha, psi.col(k));
    }
    t.x_prior += detail::x_prior_log_density(x);
  };
  level(s.Xi, s.lambda1, s.h1, s.Psi1, s.X1);
  level(s.Zeta, s.lambda2, s.h2, s.Psi2, s.X2);
  t.sigma2_prior = inverse_gamma_log_pdf(s.sigma2, prior.a_sigma, prior.b_sigma);
  t.h_prior += gamma_log_pdf(s.h_mu, prior.a_mu, prior.b_mu);
  t.penalty -= s.h_mu / (2.0 * s.sigma2) * quad_form(basis.Palpha, s.w_mu);
  if (s.has_eta()) {
    t.h_prior += gamma_log_pdf(s.h_eta, prior.a_mu, prior.b_mu);
    for (Index j = 0; j < s.eta.rows(); ++j)
      t.penalty -= s.h_eta / (2.0 * s.sigma2) * quad_form(basis.Palpha, s.eta.row(j).transpose());
  }
  return t;
}

inline double mfpca_log_posterior(const MfpcaState& s, const MultilevelDataset& data, const BasisSystem& basis,
                                  const PriorConfig& prior) {
  if (!detail::lambda_ordered(s.lambda1) || !detail::lambda_ordered(s.lambda2))
    return -std::numeric_limits<double>::infinity();
  return mfpca_log_posterior_terms(s, data, basis, prior).total();
}

// ---------------------------------------------------------------------------
// Conditionals

/// xi_i | zeta, rest: independent across k since Psi1 is orthonormal;
/// mean = lambda J_i psi' dbar_i / (lambda J_i + s2), var = lambda s2 / (lambda J_i + s2).
inline ScoreConditional mfpca_conditional_subject_scores(const MfpcaState& s, const MultilevelDataset& data,
                                                         const detail::MlCache& cache) {
  Matrix d = detail::centered_coefficients(s, data, cache) - s.Zeta * s.Psi2.transpose();
  const Matrix proj = detail::subject_means(d, cache) * s.Psi1;
  ScoreConditional c;
  c.mean.resize(data.N(), s.K1());
  c.var.resize(data.N(), s.K1());
  for (Index i = 0; i < data.N(); ++i) {
    const double j = static_cast<double>(cache.by_subject[static_cast<std::size_t>(i)].size());
    for (Index k = 0; k < s.K1(); ++k) {
      const double lam = s.lambda1(k);
      c.mean(i, k) = lam * j * proj(i, k) / (lam * j + s.sigma2);
      c.var(i, k) = lam * s.sigma2 / (lam * j + s.sigma2);
    }
  }
  return c;
}

/// Subject scores with the visit scores integrated out; correlated across k
/// because Psi1 and Psi2 need not be orthogonal.
struct SubjectScoreMarginal {
  Matrix mean;              // N x K1
  std::vector<Matrix> cov;  // per subject, K1 x K1

  Matrix sample(Rng& rng) const {
    Matrix out(mean.rows(), mean.cols());
    for (Index i = 0; i < mean.rows(); ++i) {
      const Vector z = standard_normal_matrix(mean.cols(), 1, rng);
      Eigen::LLT<Matrix> llt(cov[static_cast<std::size_t>(i)]);
      out.row(i) = (mean.row(i).transpose() + Matrix(llt.matrixL()) * z).transpose();
    }
    return out;
  }

  double log_density(const Matrix& xi) const {
    double out = 0.0;
    for (Index i = 0; i < mean.rows(); ++i) {
      Eigen::LLT<Matrix> llt(cov[static_cast<std::size_t>(i)]);
      const Vector d = xi.row(i).transpose() - mean.row(i).transpose();
      const Matrix l = llt.matrixL();
      const Vector z = l.triangularView<Eigen::Lower>().solve(d);
      out += -0.5 * static_cast<double>(d.size()) * kLog2Pi - l.diagonal().array().log().sum() - 0.5 * z.squaredNorm();
    }
    return out;
  }
};

inline SubjectScoreMarginal mfpca_conditional_subject_scores_marginal(const MfpcaState& s, const MultilevelDataset& data,
                                                                      const detail::MlCache& cache) {
  const Index q = s.Q();
  const Matrix dbar = detail::subject_means(detail::centered_coefficients(s, data, cache), cache);
  const Matrix c2 = s.Psi2 * s.lambda2.asDiagonal() * s.Psi2.transpose() + s.sigma2 * Matrix::Identity(q, q);
  SubjectScoreMarginal out;
  out.mean.resize(data.N(), s.K1());
  std::map<std::size_t, std::pair<Matrix, Matrix>> by_j;  // J -> (cov, gain)
  for (Index i = 0; i < data.N(); ++i) {
    const std::size_t j = cache.by_subject[static_cast<std::size_t>(i)].size();
    auto it = by_j.find(j);
    if (it == by_j.end()) {
      // dbar_i | xi ~ N(Psi1 xi, C2 / J)
      const Eigen::LDLT<Matrix> c2j(c2 / static_cast<double>(j));
      const Matrix w = c2j.solve(s.Psi1);  // (C2/J)^{-1} Psi1
      Matrix prec = s.Psi1.transpose() * w;
      for (Index k = 0; k < s.K1(); ++k) prec(k, k) += 1.0 / s.lambda1(k);
      prec = 0.5 * (prec + prec.transpose());
      const Matrix cov = prec.ldlt().solve(Matrix::Identity(s.K1(), s.K1()));
      it = by_j.emplace(j, std::make_pair(Matrix(0.5 * (cov + cov.transpose())), Matrix(cov * w.transpose()))).first;
    }
    out.mean.row(i) = (it->second.second * dbar.row(i).transpose()).transpose();
    out.cov.push_back(it->second.first);
  }
  return out;
}

/// zeta_r | xi, rest: the single-level score form applied to each row.
inline ScoreConditional mfpca_conditional_visit_scores(const MfpcaState& s, const MultilevelDataset& data,
                                                       const detail::MlCache& cache) {
  const Matrix d = detail::centered_coefficients(s, data, cache) - detail::expand_subject_scores(s, data) * s.Psi1.transpose();
  const Matrix proj = d * s.Psi2;
  ScoreConditional c;
  c.mean.resize(data.rows(), s.K2());
  c.var.resize(data.rows(), s.K2());
  for (Index k = 0; k < s.K2(); ++k) {
    const double shrink = s.lambda2(k) / (s.lambda2(k) + s.sigma2);
    c.mean.col(k) = shrink * proj.col(k);
    c.var.col(k).setConstant(shrink * s.sigma2);
  }
  return c;
}

/// w_mu | scores, eta, rest: precision (R I + h_mu P) / s2.
inline GaussianConditional mfpca_conditional_w_mu(const MfpcaState& s, const MultilevelDataset& data,
                                                  const BasisSystem& basis, const detail::MlCache& cache) {
  const Index q = s.Q();
  Matrix d = cache.C - detail::expand_subject_scores(s, data) * s.Psi1.transpose() - s.Zeta * s.Psi2.transpose();
  if (s.has_eta())
    for (Index r = 0; r < d.rows(); ++r) d.row(r) -= s.eta.row(data.visit[static_cast<std::size_t>(r)]);
  const Matrix a = static_cast<double>(data.rows()) * Matrix::Identity(q, q) + s.h_mu * basis.Palpha;
  return GaussianConditional::from_precision(a, d.colwise().sum().transpose(), s.sigma2);
}

/// w_mu with both score levels integrated out: subject means satisfy
/// dbar_i ~ N(w, V_i), V_i = Psi1 L1 Psi1' + (Psi2 L2 Psi2' + s2 I) / J_i.
inline GaussianConditional mfpca_conditional_w_mu_marginal(const MfpcaState& s, const MultilevelDataset& data,
                                                           const BasisSystem& basis, const detail::MlCache& cache) {
  const Index q = s.Q();
  Matrix c = cache.C;
  if (s.has_eta())
    for (Index r = 0; r < c.rows(); ++r) c.row(r) -= s.eta.row(data.visit[static_cast<std::size_t>(r)]);
  const Matrix ybar = detail::subject_means(c, cache);
  const Matrix c1 = s.Psi1 * s.lambda1.asDiagonal() * s.Psi1.transpose();
  const Matrix c2 = s.Psi2 * s.lambda2.asDiagonal() * s.Psi2.transpose() + s.sigma2 * Matrix::Identity(q, q);
  std::map<std::size_t, Matrix> vinv;
  Matrix a = s.h_mu * basis.Palpha;
  Vector b = Vector::Zero(q);
  for (Index i = 0; i < data.N(); ++i) {
    const std::size_t j = cache.by_subject[static_cast<std::size_t>(i)].size();
    auto it = vinv.find(j);
    if (it == vinv.end()) {
      const Matrix v = c1 + c2 / static_cast<double>(j);
      it = vinv.emplace(j, s.sigma2 * Matrix(v.ldlt().solve(Matrix::Identity(q, q)))).first;
    }
    a += it->second;
    b += it->second * ybar.row(i).transpose();
  }
  return GaussianConditional::from_precision(0.5 * (a + a.transpose()), b, s.sigma2);
}

/// eta_j | rest: precision (n_j I + h_eta P) / s2 over the rows of visit j.
inline GaussianConditional mfpca_conditional_eta(const MfpcaState& s, const MultilevelDataset& data,
                                                 const BasisSystem& basis, const detail::MlCache& cache, Index j) {
  const Index q = s.Q();
  const auto& rows = cache.by_visit[static_cast<std::size_t>(j)];
  Vector b = Vector::Zero(q);
  const Matrix sub = detail::expand_subject_scores(s, data);
  for (Index r : rows)
    b += cache.C.row(r).transpose() - s.w_mu - s.Psi1 * sub.row(r).transpose() - s.Psi2 * s.Zeta.row(r).transpose();
  const Matrix a = static_cast<double>(rows.size()) * Matrix::Identity(q, q) + s.h_eta * basis.Palpha;
  return GaussianConditional::from_precision(a, b, s.sigma2);
}

inline InverseGammaParams mfpca_conditional_sigma2(const MfpcaState& s, const MultilevelDataset& data,
                                                   const BasisSystem& basis, const PriorConfig& prior) {
  InverseGammaParams p;
  p.shape = 0.5 * static_cast<double>(data.rows() * data.M()) + prior.a_sigma;
  double scale = mfpca_residuals(s, data, basis).squaredNorm() + s.h_mu * quad_form(basis.Palpha, s.w_mu) + 2.0 * prior.b_sigma;
  for (Index k = 0; k < s.K1(); ++k) scale += s.h1(k) * quad_form(basis.Palpha, s.Psi1.col(k));
  for (Index k = 0; k < s.K2(); ++k) scale += s.h2(k) * quad_form(basis.Palpha, s.Psi2.col(k));
  if (s.has_eta())
    for (Index j = 0; j < s.eta.rows(); ++j) scale += s.h_eta * quad_form(basis.Palpha, s.eta.row(j).transpose());
  p.scale = 0.5 * scale;
  return p;
}

inline GammaParams mfpca_conditional_h_eta(const MfpcaState& s, const BasisSystem& basis, const PriorConfig& prior) {
  double q = 0.0;
  for (Index j = 0; j < s.eta.rows(); ++j) q += quad_form(basis.Palpha, s.eta.row(j).transpose());
  return {prior.a_mu, q / (2.0 * s.sigma2) + prior.b_mu};
}

/// Conditional X1 target given both score sets.
inline StiefelTarget mfpca_conditional_x1_target(const MfpcaState& s, const MultilevelDataset& data,
                                                 const BasisSystem& basis, const detail::MlCache& cache) {
  const Matrix d = detail::centered_coefficients(s, data, cache) - s.Zeta * s.Psi2.transpose();
  StiefelTarget t;
  t.linear = d.transpose() * detail::expand_subject_scores(s, data) / s.sigma2;
  for (Index k = 0; k < s.K1(); ++k) t.quad.push_back(-s.h1(k) / s.sigma2 * basis.Palpha);
  return t;
}

inline StiefelTarget mfpca_conditional_x2_target(const MfpcaState& s, const MultilevelDataset& data,
                                                 const BasisSystem& basis, const detail::MlCache& cache) {
  const Matrix d = detail::centered_coefficients(s, data, cache) - detail::expand_subject_scores(s, data) * s.Psi1.transpose();
  StiefelTarget t;
  t.linear = d.transpose() * s.Zeta / s.sigma2;
  for (Index k = 0; k < s.K2(); ++k) t.quad.push_back(-s.h2(k) / s.sigma2 * basis.Palpha);
  return t;
}

/// Joint target of [X1 | X2] with both score sets integrated out.
///
/// Subject means dbar_i ~ N(0, V_J), V_J = Psi1 L1 Psi1' + C2 / J with
/// C2 = Psi2 L2 Psi2' + s2 I; deviations from the subject mean only see C2,
/// whose determinant does not depend on Psi2.
struct MultilevelXTarget {
  struct Group {
    double J = 1.0;
    double count = 0.0;
    Matrix scatter;  // sum over subjects with J visits of dbar dbar'
  };
  Index k1 = 0;
  std::vector<Group> groups;
  Matrix within;  // sum_r (d_r - dbar_i)(d_r - dbar_i)'
  Vector lambda1, lambda2, h1, h2;
  double sigma2 = 1.0;
  Matrix penalty;

  Matrix polar(const Matrix& x) const {
    Matrix psi(x.rows(), x.cols());
    psi.leftCols(k1) = polar_decompose(x.leftCols(k1)).psi;
    psi.rightCols(x.cols() - k1) = polar_decompose(x.rightCols(x.cols() - k1)).psi;
    return psi;
  }

  double value_psi(const Matrix& psi) const {
    const Index q = psi.rows();
    const Matrix p1 = psi.leftCols(k1), p2 = psi.rightCols(psi.cols() - k1);
    const Matrix l1 = p1 * lambda1.asDiagonal() * p1.transpose();
    const Matrix c2 = p2 * lambda2.asDiagonal() * p2.transpose() + sigma2 * Matrix::Identity(q, q);
    double v = 0.0;
    for (const auto& g : groups) {
      const Eigen::LLT<Matrix> llt(l1 + c2 / g.J);
      const Matrix l = llt.matrixL();
      v -= g.count * l.diagonal().array().log().sum();
      v -= 0.5 * llt.solve(g.scatter).trace();
    }
    for (Index k = 0; k < p2.cols(); ++k) {
      const double d = lambda2(k) / (lambda2(k) + sigma2);
      v += 0.5 * d * quad_form(within, p2.col(k)) / sigma2;
      v -= 0.5 * h2(k) * quad_form(penalty, p2.col(k)) / sigma2;
    }
    for (Index k = 0; k < k1; ++k) v -= 0.5 * h1(k) * quad_form(penalty, p1.col(k)) / sigma2;
    return v;
  }

  Matrix gradient_psi(const Matrix& psi) const {
    const Index q = psi.rows();
    const Matrix p1 = psi.leftCols(k1), p2 = psi.rightCols(psi.cols() - k1);
    const Matrix l1 = p1 * lambda1.asDiagonal() * p1.transpose();
    const Matrix c2 = p2 * lambda2.asDiagonal() * p2.transpose() + sigma2 * Matrix::Identity(q, q);
    Matrix g1 = Matrix::Zero(q, q), g2 = Matrix::Zero(q, q);
    for (const auto& g : groups) {
      const Eigen::LDLT<Matrix> ldlt(l1 + c2 / g.J);
      const Matrix vinv = ldlt.solve(Matrix::Identity(q, q));
      const Matrix gj = vinv * g.scatter * vinv - g.count * vinv;
      g1 += gj;
      g2 += gj / g.J;
    }
    Matrix grad(q, psi.cols());
    grad.leftCols(k1) = g1 * p1 * lambda1.asDiagonal();
    grad.rightCols(p2.cols()) = g2 * p2 * lambda2.asDiagonal();
    for (Index k = 0; k < k1; ++k) grad.col(k) -= h1(k) / sigma2 * (penalty * p1.col(k));
    for (Index k = 0; k < p2.cols(); ++k) {
      const double d = lambda2(k) / (lambda2(k) + sigma2);
      grad.col(k1 + k) += (d * (within * p2.col(k)) - h2(k) * (penalty * p2.col(k))) / sigma2;
    }
    return grad;
  }

  double log_density(const Matrix& x) const { return value_psi(polar(x)) - 0.5 * x.squaredNorm(); }

  Matrix gradient(const Matrix& x) const {
    const Matrix g = gradient_psi(polar(x));
    Matrix out(x.rows(), x.cols());
    out.leftCols(k1) = polar_pullback(x.leftCols(k1), g.leftCols(k1));
    out.rightCols(x.cols() - k1) = polar_pullback(x.rightCols(x.cols() - k1), g.rightCols(x.cols() - k1));
    return out - x;
  }
};

inline MultilevelXTarget mfpca_collapsed_x_target(const MfpcaState& s, const MultilevelDataset& data,
                                                  const BasisSystem& basis, const detail::MlCache& cache) {
  const Index q = s.Q();
  const Matrix d = detail::centered_coefficients(s, data, cache);
  const Matrix dbar = detail::subject_means(d, cache);
  MultilevelXTarget t;
  t.k1 = s.K1();
  t.within = Matrix::Zero(q, q);
  std::map<std::size_t, std::size_t> slot;
  for (Index i = 0; i < data.N(); ++i) {
    const auto& rows = cache.by_subject[static_cast<std::size_t>(i)];
    auto [it, fresh] = slot.emplace(rows.size(), t.groups.size());
    if (fresh) t.groups.push_back({static_cast<double>(rows.size()), 0.0, Matrix::Zero(q, q)});
    auto& g = t.groups[it->second];
    g.count += 1.0;
    g.scatter.noalias() += dbar.row(i).transpose() * dbar.row(i);
    for (Index r : rows) {
      const Vector e = (d.row(r) - dbar.row(i)).transpose();
      t.within.noalias() += e * e.transpose();
    }
  }
  t.lambda1 = s.lambda1;
  t.lambda2 = s.lambda2;
  t.h1 = s.h1;
  t.h2 = s.h2;
  t.sigma2 = s.sigma2;
  t.penalty = basis.Palpha;
  return t;
}

/// Log posterior with xi and zeta integrated out (up to a constant).
inline double mfpca_log_posterior_collapsed(const MfpcaState& s, const MultilevelDataset& data, const BasisSystem& basis,
                                            const PriorConfig& prior) {
  const MfpcaState& st = s;
  const double full = mfpca_log_posterior(st, data, basis, prior);
  const detail::MlCache cache(data, basis);
  const double xi = mfpca_conditional_subject_scores_marginal(st, data, cache).log_density(st.Xi);
  const double zeta = mfpca_conditional_visit_scores(st, data, cache).log_density(st.Zeta);
  return full - xi - zeta;
}

// ---------------------------------------------------------------------------
// Sweep

struct MultilevelSweepStats {
  XUpdateResult x1, x2;
  std::size_t stalls = 0;
};

/// Collapsed order: [X1 | X2] and w_mu with both score sets integrated out,
/// then xi | (no zeta), zeta | xi, eta, ladders, sigma2, smoothing. Otherwise
/// every block is drawn from its plain full conditional. In the collapsed
/// sweep tuner1 drives the joint move and x2 repeats its result.
inline MultilevelSweepStats mfpca_gibbs_sweep(MfpcaState& s, const MultilevelDataset& data, const BasisSystem& basis,
                                              const detail::MlCache& cache, const PriorConfig& prior,
                                              const SamplerConfig& config, const XTuner& tuner1, const XTuner& tuner2,
                                              Rng& rng) {
  MultilevelSweepStats st;
  auto move_x = [&](Matrix& x, Matrix& psi, const auto& target, const XTuner& tuner) {
    return metropolis_x_step(x, psi, target, config.x_update, tuner.scale(), config.leapfrog_steps, tuner.metric_chol, rng);
  };
  if (config.collapse_scores) {
    Matrix x(s.Q(), s.K1() + s.K2()), psi(s.Q(), s.K1() + s.K2());
    x << s.X1, s.X2;
    psi << s.Psi1, s.Psi2;
    st.x1 = move_x(x, psi, mfpca_collapsed_x_target(s, data, basis, cache), tuner1);
    st.x2 = st.x1;
    if (st.x1.accepted) {
      s.X1 = x.leftCols(s.K1());
      s.X2 = x.rightCols(s.K2());
      s.Psi1 = psi.leftCols(s.K1());
      s.Psi2 = psi.rightCols(s.K2());
    }
    s.w_mu = mfpca_conditional_w_mu_marginal(s, data, basis, cache).sample(rng);
    s.Xi = mfpca_conditional_subject_scores_marginal(s, data, cache).sample(rng);
    s.Zeta = mfpca_conditional_visit_scores(s, data, cache).sample(rng);
  } else {
    st.x1 = move_x(s.X1, s.Psi1, mfpca_conditional_x1_target(s, data, basis, cache), tuner1);
    st.x2 = move_x(s.X2, s.Psi2, mfpca_conditional_x2_target(s, data, basis, cache), tuner2);
    s.Xi = mfpca_conditional_subject_scores(s, data, cache).sample(rng);
    s.Zeta = mfpca_conditional_visit_scores(s, data, cache).sample(rng);
    s.w_mu = mfpca_conditional_w_mu(s, data, basis, cache).sample(rng);
  }
  if (s.has_eta())
    for (Index j = 0; j < s.eta.rows(); ++j) s.eta.row(j) = mfpca_conditional_eta(s, data, basis, cache, j).sample(rng).transpose();
  for (Index k = 0; k < s.K1(); ++k)
    s.lambda1(k) = sample_truncated_inverse_gamma(ordered_lambda_conditional(s.Xi, s.lambda1, prior, k), s.lambda1(k), rng, &st.stalls);
  for (Index k = 0; k < s.K2(); ++k)
    s.lambda2(k) =
        sample_truncated_inverse_gamma(ordered_lambda_conditional(s.Zeta, s.lambda2, prior, k), s.lambda2(k), rng, &st.stalls);
  s.sigma2 = mfpca_conditional_sigma2(s, data, basis, prior).sample_untruncated(rng);
  s.h_mu = GammaParams{prior.a_mu, quad_form(basis.Palpha, s.w_mu) / (2.0 * s.sigma2) + prior.b_mu}.sample(rng);
  for (Index k = 0; k < s.K1(); ++k)
    s.h1(k) = GammaParams{prior.a_psi, quad_form(basis.Palpha, s.Psi1.col(k)) / (2.0 * s.sigma2) + prior.b_psi}.sample(rng);
  for (Index k = 0; k < s.K2(); ++k)
    s.h2(k) = GammaParams{prior.a_psi, quad_form(basis.Palpha, s.Psi2.col(k)) / (2.0 * s.sigma2) + prior.b_psi}.sample(rng);
  if (s.has_eta()) s.h_eta = mfpca_conditional_h_eta(s, basis, prior).sample(rng);
  return st;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

/// Leading right singular directions of `a` (numerical rank capped), completed
/// to `k` orthonormal columns orthogonal to `avoid` when the rank is short.
inline Matrix leading_directions(const Matrix& a, Index k, const Matrix& avoid, Index* rank_out) {
  const Index q = a.cols();
  Index rank = 0;
  Matrix v(q, 0);
  if (a.rows() > 0) {
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinV);
    const Vector sv = svd.singularValues();
    const double tol = 1e-10 * std::max(sv.size() > 0 ? sv(0) : 0.0, 1e-300);
    for (Index j = 0; j < sv.size(); ++j)
      if (sv(j) > tol && sv(j) > 1e-12) ++rank;
    v = svd.matrixV().leftCols(std::min(rank, k));
  }
  if (rank_out) *rank_out = rank;
  if (v.cols() == k) return k > 0 ? project_stiefel(v) : v;
  Matrix stack(q, avoid.cols() + v.cols() + q);
  stack << avoid, v, Matrix::Identity(q, q);
  Eigen::HouseholderQR<Matrix> qr(stack);
  const Matrix full = qr.householderQ() * Matrix::Identity(q, q);
  Matrix out(q, k);
  out.leftCols(v.cols()) = v;
  out.rightCols(k - v.cols()) = full.middleCols(avoid.cols() + v.cols(), k - v.cols());
  return project_stiefel(out);
}

/// Sorts columns by decreasing variance and enforces a strict, positive ladder.
inline void order_components(Matrix& psi, Matrix& scores, Vector& lambda, double floor) {
  const Index k = lambda.size();
  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return lambda(a) > lambda(b); });
  const Matrix p0 = psi, s0 = scores;
  const Vector l0 = lambda;
  for (Index j = 0; j < k; ++j) {
    psi.col(j) = p0.col(order[static_cast<std::size_t>(j)]);
    scores.col(j) = s0.col(order[static_cast<std::size_t>(j)]);
    lambda(j) = std::max(l0(order[static_cast<std::size_t>(j)]), floor);
  }
  for (Index j = 1; j < k; ++j)
    if (!(lambda(j) < lambda(j - 1))) lambda(j) = lambda(j - 1) * (1.0 - 1e-6 * static_cast<double>(j));
}

}  // namespace detail

/// Moment-based start: subject means give level 1, within-subject deviations level 2.
inline MfpcaState init_multilevel_state(const MultilevelDataset& data, const BasisSystem& basis, const MultilevelSpec& spec,
                                        const PriorConfig& prior) {
  data.validate();
  const Index q = basis.Q();
  if (spec.k1 < 0 || spec.k2 < 0) throw ValidationError("component counts must be nonnegative");
  if (spec.k1 + spec.k2 > q) throw ValidationError("K1 + K2 must not exceed Q");
  if (data.rows() < 1) throw ValidationError("no curves to initialize from");
  const detail::MlCache cache(data, basis);
  MfpcaState s;
  s.w_mu = cache.C.colwise().mean().transpose();
  if (spec.visit_effects) s.eta = Matrix::Zero(data.J(), q);

  Matrix d = cache.C;
  d.rowwise() -= s.w_mu.transpose();
  const Matrix dbar = detail::subject_means(d, cache);
  Index rank1 = 0;
  Matrix psi1 = detail::leading_directions(dbar, spec.k1, Matrix(q, 0), &rank1);
  if (spec.k1 > rank1)
    throw ValidationError("K1=" + std::to_string(spec.k1) + " exceeds the numerical rank of the subject means (" +
                          std::to_string(rank1) + ")");
  Matrix within = d;
  for (Index r = 0; r < d.rows(); ++r) within.row(r) -= dbar.row(data.subject[static_cast<std::size_t>(r)]);
  Matrix psi2 = detail::leading_directions(within, spec.k2, psi1, nullptr);

  s.Xi = dbar * psi1;
  s.Zeta = within * psi2;
  Matrix fitted = detail::expand_subject_scores(s, data) * psi1.transpose() + s.Zeta * psi2.transpose();
  const double rss = (d - fitted).squaredNorm() + cache.orth_rss;
  s.sigma2 = std::max(rss / static_cast<double>(data.rows() * data.M()), 1e-8);

  auto variances = [](const Matrix& sc) {
    Vector v(sc.cols());
    for (Index k = 0; k < sc.cols(); ++k) v(k) = sc.rows() > 0 ? sc.col(k).squaredNorm() / static_cast<double>(sc.rows()) : 0.0;
    return v;
  };
  s.lambda1 = variances(s.Xi);
  s.lambda2 = variances(s.Zeta);
  const double floor = 1e-3 * s.sigma2;
  detail::order_components(psi1, s.Xi, s.lambda1, floor);
  detail::order_components(psi2, s.Zeta, s.lambda2, floor);
  s.X1 = psi1;
  s.Psi1 = psi1;
  s.X2 = psi2;
  s.Psi2 = psi2;
  s.h_mu = prior.a_mu / prior.b_mu;
  s.h_eta = prior.a_mu / prior.b_mu;
  s.h1 = Vector::Constant(spec.k1, prior.a_psi / prior.b_psi);
  s.h2 = Vector::Constant(spec.k2, prior.a_psi / prior.b_psi);
  return s;
}

// ---------------------------------------------------------------------------
// Driver

struct MultilevelDraw {
  int chain = 0;
  int iteration = 0;
  MfpcaState state;
};

struct MultilevelSamples {
  std::vector<MultilevelDraw> draws;
  int n_chains = 0;
  bool valid = true;
  std::string failure;
  std::vector<double> x1_scale, x2_scale;
};

struct MultilevelFitResult {
  MultilevelSamples samples;
  ChainDiagnostics diagnostics;  // acceptance_rate_X averages both blocks
  double acceptance_rate_X1 = 0.0;
  double acceptance_rate_X2 = 0.0;
};

inline const char* kSingleVisitWarning =
    "every subject has a single visit: the level-2 variance is only weakly identified";

inline MultilevelFitResult run_multilevel(const MultilevelDataset& data, const BasisSystem& basis, const PriorConfig& prior,
                                          const SamplerConfig& config, const MultilevelSpec& spec) {
  config.validate();
  prior.validate();
  if (!basis.has_penalty) throw ValidationError("basis has no penalty matrices");
  const MfpcaState init = init_multilevel_state(data, basis, spec, prior);
  if (!std::isfinite(mfpca_log_posterior(init, data, basis, prior)))
    throw SamplerFailure("non-finite log posterior at initialization");
  const detail::MlCache cache(data, basis);

  struct Out {
    std::vector<MultilevelDraw> draws;
    double acc1 = 0.0, acc2 = 0.0, scale1 = 0.0, scale2 = 0.0;
    std::size_t stalls = 0;
    std::string failure;
  };
  std::vector<Out> outputs(static_cast<std::size_t>(config.n_chains));
  const double target = config.resolved_target();
  auto finite = [](const MfpcaState& s) {
    return s.w_mu.allFinite() && s.X1.allFinite() && s.X2.allFinite() && s.Xi.allFinite() && s.Zeta.allFinite() &&
           s.lambda1.allFinite() && s.lambda2.allFinite() && std::isfinite(s.sigma2) && s.sigma2 > 0.0 && s.eta.allFinite();
  };
  detail::for_each_chain(config.n_chains, config.parallel_chains, [&](int c) {
    Out& out = outputs[static_cast<std::size_t>(c)];
    Rng rng(chain_seed(config.seed, c));
    XTuner t1, t2;
    double acc2_sum = 0.0;
    int warm_it = 0;
    struct Step {
      double accept;
      std::size_t stalls;
    };
    auto sweep = [&](MfpcaState& s, bool warm) {
      if (!warm && !t1.frozen) {
        t1.freeze();
        t2.freeze();
      }
      const MultilevelSweepStats st = mfpca_gibbs_sweep(s, data, basis, cache, prior, config, t1, t2, rng);
      if (warm) {
        t1.adapt(st.x1.accept_prob, target);
        t2.adapt(st.x2.accept_prob, target);
        if (config.collapse_scores) {
          Matrix x(s.Q(), s.K1() + s.K2());
          x << s.X1, s.X2;
          t1.observe(x, warm_it, config.n_warmup, config.x_update);
        } else {
          t1.observe(s.X1, warm_it, config.n_warmup, config.x_update);
          t2.observe(s.X2, warm_it, config.n_warmup, config.x_update);
        }
        ++warm_it;
      } else {
        acc2_sum += st.x2.accepted ? 1.0 : 0.0;
      }
      return Step{st.x1.accepted ? 1.0 : 0.0, st.stalls};
    };
    std::vector<std::pair<int, MfpcaState>> kept;
    detail::run_chain_loop(init, config, c, sweep, finite, kept, out.acc1, out.stalls, out.failure);
    out.acc2 = config.n_samples > 0 ? acc2_sum / static_cast<double>(config.n_samples * config.thinning) : 0.0;
    out.scale1 = t1.scale();
    out.scale2 = t2.scale();
    for (auto& [it, st] : kept) out.draws.push_back({c, it, std::move(st)});
  });

  MultilevelFitResult res;
  res.samples.n_chains = config.n_chains;
  for (auto& o : outputs) {
    res.acceptance_rate_X1 += o.acc1 / config.n_chains;
    res.acceptance_rate_X2 += o.acc2 / config.n_chains;
    res.diagnostics.chain_acceptance_X.push_back(0.5 * (o.acc1 + o.acc2));
    res.diagnostics.stall_count += o.stalls;
    res.samples.x1_scale.push_back(o.scale1);
    res.samples.x2_scale.push_back(o.scale2);
    if (!o.failure.empty()) {
      res.samples.valid = false;
      if (res.samples.failure.empty()) res.samples.failure = o.failure;
    }
    for (auto& d : o.draws) res.samples.draws.push_back(std::move(d));
  }
  res.diagnostics.acceptance_rate_X = 0.5 * (res.acceptance_rate_X1 + res.acceptance_rate_X2);
  if (!data.has_replicates()) res.diagnostics.warnings.emplace_back(kSingleVisitWarning);
  res.diagnostics.monitor_points = monitor_grid_points(basis.M());
  if (!res.samples.draws.empty()) {
    std::map<std::string, ChainDraws> traces;
    const auto& first = res.samples.draws.front().state;
    const Matrix ref1 = basis.B * first.Psi1;
    const Matrix ref2 = basis.B * first.Psi2;
    auto push = [&](const std::string& name, int chain, double v) {
      auto& t = traces[name];
      if (t.empty()) t.resize(static_cast<std::size_t>(config.n_chains));
      t[static_cast<std::size_t>(chain)].push_back(v);
    };
    for (const auto& d : res.samples.draws) {
      push("sigma2", d.chain, d.state.sigma2);
      auto level = [&](const std::string& tag, const Matrix& psi, const Vector& lam, const Matrix& ref) {
        const Matrix phi = basis.B * psi;
        const SignedPermutation a = best_alignment(phi, ref);
        const Matrix aligned = a.apply_columns(phi);
        const Vector l = a.apply_entries(lam);
        for (Index k = 0; k < lam.size(); ++k) {
          push("lambda" + tag + "_" + std::to_string(k + 1), d.chain, l(k));
          for (Index m : res.diagnostics.monitor_points)
            push("phi" + tag + "_" + std::to_string(k + 1) + "@t" + std::to_string(m + 1), d.chain, aligned(m, k));
        }
      };
      level("1", d.state.Psi1, d.state.lambda1, ref1);
      level("2", d.state.Psi2, d.state.lambda2, ref2);
    }
    fill_convergence(res.diagnostics, traces);
  }
  return res;
}

}  // namespace bfpca
