#pragma once

// Discretely orthonormal spline basis and roughness penalties.

#include <bfpca/core.hpp>

#include <Eigen/QR>

#include <algorithm>
#include <string>
#include <vector>

namespace bfpca {

/// Strictly increasing sampling points inside [0, 1].
class Grid {
 public:
  Grid() = default;

  explicit Grid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.size() < 2) throw ValidationError("grid needs at least 2 points");
    for (std::size_t m = 0; m < points_.size(); ++m) {
      const double t = points_[m];
      if (!std::isfinite(t)) throw ValidationError("grid point " + std::to_string(m) + " is not finite");
      if (t < 0.0 || t > 1.0) throw ValidationError("grid point " + std::to_string(m) + " outside [0,1]");
      if (m > 0 && !(t > points_[m - 1]))
        throw ValidationError("grid is not strictly increasing at point " + std::to_string(m) +
                              " (degenerate or duplicated grid points)");
    }
  }

  /// t_m = (m - 1) / (M - 1), endpoints included.
  static Grid equispaced(std::size_t m) {
    if (m < 2) throw ValidationError("grid needs at least 2 points");
    std::vector<double> pts(m);
    for (std::size_t i = 0; i < m; ++i) pts[i] = static_cast<double>(i) / static_cast<double>(m - 1);
    pts.back() = 1.0;
    return Grid(std::move(pts));
  }

  std::size_t size() const { return points_.size(); }
  double operator[](std::size_t m) const { return points_[m]; }
  const std::vector<double>& points() const { return points_; }

  Vector as_vector() const { return Eigen::Map<const Vector>(points_.data(), static_cast<Index>(points_.size())); }

 private:
  std::vector<double> points_;
};

struct BasisSystem {
  Grid grid;
  int degree = 3;
  Matrix raw;   // M x Q raw B-spline evaluations
  Matrix raw2;  // M x Q raw second derivatives
  Matrix transform;  // Q x Q, B = raw * transform
  Matrix B;
  Matrix B2;
  Matrix P0;
  Matrix P2;
  Matrix Palpha;
  double alpha = 0.0;
  bool has_penalty = false;

  Index M() const { return B.rows(); }
  Index Q() const { return B.cols(); }
};

namespace detail {

/// Clamped knot vector on [0,1] with equally spaced interior knots.
inline std::vector<double> clamped_knots(int n_basis, int degree) {
  const int n_interior = n_basis - degree - 1;
  std::vector<double> knots;
  knots.reserve(static_cast<std::size_t>(n_basis + degree + 1));
  for (int i = 0; i <= degree; ++i) knots.push_back(0.0);
  for (int j = 1; j <= n_interior; ++j) knots.push_back(static_cast<double>(j) / (n_interior + 1));
  for (int i = 0; i <= degree; ++i) knots.push_back(1.0);
  return knots;
}

inline double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

/// Values and second derivatives of every B-spline of the given degree at t.
inline void bspline_row(const std::vector<double>& u, int degree, double t, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> value,
                        Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> second) {
  const int n_knots = static_cast<int>(u.size());
  // table[d][i] = N_{i,d}(t)
  std::vector<std::vector<double>> table(static_cast<std::size_t>(degree + 1));
  table[0].assign(static_cast<std::size_t>(n_knots - 1), 0.0);
  int span = -1;
  for (int i = 0; i < n_knots - 1; ++i) {
    if (u[i] <= t && t < u[i + 1]) {
      span = i;
      break;
    }
  }
  if (span < 0) {
    // t at the right boundary: last non-empty interval.
    for (int i = n_knots - 2; i >= 0; --i) {
      if (u[i] < u[i + 1]) {
        span = i;
        break;
      }
    }
  }
  table[0][static_cast<std::size_t>(span)] = 1.0;
  for (int d = 1; d <= degree; ++d) {
    const int count = n_knots - 1 - d;
    table[d].assign(static_cast<std::size_t>(count), 0.0);
    for (int i = 0; i < count; ++i) {
      const double left = safe_ratio(t - u[i], u[i + d] - u[i]) * table[d - 1][i];
      const double right = safe_ratio(u[i + d + 1] - t, u[i + d + 1] - u[i + 1]) * table[d - 1][i + 1];
      table[d][i] = left + right;
    }
  }
  const int n_basis = n_knots - degree - 1;
  for (int i = 0; i < n_basis; ++i) value(i) = table[degree][i];

  // d/dt N_{i,d} = d * (N_{i,d-1}/(u_{i+d}-u_i) - N_{i+1,d-1}/(u_{i+d+1}-u_{i+1})), applied twice.
  auto first_deriv = [&](int i, int d) {
    return d * (safe_ratio(table[d - 1][i], u[i + d] - u[i]) -
                safe_ratio(table[d - 1][i + 1], u[i + d + 1] - u[i + 1]));
  };
  const int p = degree;
  for (int i = 0; i < n_basis; ++i) {
    const double a = (u[i + p] - u[i] > 0.0) ? first_deriv(i, p - 1) / (u[i + p] - u[i]) : 0.0;
    const double b = (u[i + p + 1] - u[i + 1] > 0.0) ? first_deriv(i + 1, p - 1) / (u[i + p + 1] - u[i + 1]) : 0.0;
    second(i) = p * (a - b);
  }
}

}  // namespace detail

/// Raw (non-orthogonal) clamped B-spline design and its second derivative on the grid.
inline std::pair<Matrix, Matrix> raw_bspline(const Grid& grid, int n_basis, int degree) {
  const auto knots = detail::clamped_knots(n_basis, degree);
  const Index m = static_cast<Index>(grid.size());
  Matrix value(m, n_basis);
  Matrix second(m, n_basis);
  for (Index r = 0; r < m; ++r) detail::bspline_row(knots, degree, grid[static_cast<std::size_t>(r)], value.row(r), second.row(r));
  return {value, second};
}

/// Orthonormalizes a clamped B-spline basis of dimension `q` on `grid`.
///
/// The thin Householder QR of the raw design gives the orthonormal columns;
/// each column is then sign-fixed so that its largest-magnitude entry is
/// positive. The same change of basis is applied to the analytic second
/// derivatives so that roughness penalties stay consistent with B.
inline BasisSystem build_basis(const Grid& grid, int q, int degree = 3) {
  const int m = static_cast<int>(grid.size());
  if (degree < 2) throw ValidationError("spline degree must be at least 2");
  if (q < 2) throw ValidationError("basis dimension Q must be at least 2");
  if (q > m) throw ValidationError("overcomplete basis: Q=" + std::to_string(q) + " exceeds grid size M=" + std::to_string(m));
  if (q < degree + 1)
    throw ValidationError("basis dimension Q=" + std::to_string(q) + " below degree+1=" + std::to_string(degree + 1));

  auto [raw, raw2] = raw_bspline(grid, q, degree);
  Eigen::HouseholderQR<Matrix> qr(raw);
  const Matrix r = qr.matrixQR().topRows(q).triangularView<Eigen::Upper>();
  const double rmax = r.diagonal().cwiseAbs().maxCoeff();
  if (!(r.diagonal().cwiseAbs().minCoeff() > 1e-10 * rmax))
    throw ValidationError("raw spline design is rank deficient on this grid (degenerate grid points)");

  Matrix b = qr.householderQ() * Matrix::Identity(m, q);
  Vector sign(q);
  for (int k = 0; k < q; ++k) {
    Index arg = 0;
    b.col(k).cwiseAbs().maxCoeff(&arg);
    sign(k) = b(arg, k) < 0.0 ? -1.0 : 1.0;
  }
  b = b * sign.asDiagonal();
  // raw = Qthin * R  =>  B = raw * R^{-1} * S
  Matrix rinv = r.triangularView<Eigen::Upper>().solve(Matrix::Identity(q, q));
  Matrix transform = rinv * sign.asDiagonal();

  BasisSystem out;
  out.grid = grid;
  out.degree = degree;
  out.raw = std::move(raw);
  out.raw2 = raw2;
  out.transform = transform;
  out.B = std::move(b);
  out.B2 = raw2 * transform;
  return out;
}

/// Fills P0 = B'B/M, P2 = B2'B2/M and Palpha = alpha P0 + (1 - alpha) P2.
inline BasisSystem build_penalty(BasisSystem basis, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  const double inv_m = 1.0 / static_cast<double>(basis.M());
  auto symmetrize = [](const Matrix& a) -> Matrix { return 0.5 * (a + a.transpose()); };
  basis.P0 = symmetrize(inv_m * basis.B.transpose() * basis.B);
  basis.P2 = symmetrize(inv_m * basis.B2.transpose() * basis.B2);
  basis.Palpha = alpha * basis.P0 + (1.0 - alpha) * basis.P2;
  basis.alpha = alpha;
  basis.has_penalty = true;
  return basis;
}

inline BasisSystem make_basis(const Grid& grid, int q, double alpha, int degree = 3) {
  return build_penalty(build_basis(grid, q, degree), alpha);
}

}  // namespace bfpca
