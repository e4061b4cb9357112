#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace bfpca {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Engine used by every sampling routine. Callers own stream isolation.
using Rng = std::mt19937_64;

/// Input or configuration that violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Polar factor requested for a (numerically) rank-deficient matrix.
class PolarUndefined : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The sampler reached a non-finite or otherwise unusable state.
class SamplerFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// max_ij |A_ij - I_ij| for a square A.
inline double max_identity_deviation(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  return (a - Matrix::Identity(a.rows(), a.cols())).cwiseAbs().maxCoeff();
}

inline double max_abs(const Matrix& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

inline Matrix standard_normal_matrix(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix out(rows, cols);
  // Column-major fill keeps draw order independent of Eigen internals.
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = n01(rng);
  return out;
}

inline double draw_normal(Rng& rng, double mean, double sd) {
  std::normal_distribution<double> n(mean, sd);
  return n(rng);
}

/// Gamma draw in the shape/rate parameterization (mean shape/rate).
inline double draw_gamma(Rng& rng, double shape, double rate) {
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return g(rng);
}

/// Inverse-Gamma draw in the shape/scale parameterization.
inline double draw_inverse_gamma(Rng& rng, double shape, double scale) {
  std::gamma_distribution<double> g(shape, 1.0);
  return scale / g(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng);
}

inline double gamma_log_pdf(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

inline double inverse_gamma_log_pdf(double x, double shape, double scale) {
  return shape * std::log(scale) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
}

inline double normal_log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var;
}

}  // namespace bfpca
