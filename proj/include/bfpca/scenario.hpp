#pragma once

// Generative truths for the single-level (S1, S2) and multilevel (ML) studies.

#include <bfpca/basis.hpp>
#include <bfpca/core.hpp>
#include <bfpca/stiefel.hpp>

#include <numbers>
#include <string>

namespace bfpca {

/// Legendre polynomial of order k rescaled from [-1,1] to [0,1].
inline double legendre01(int k, double t) {
  const double x = 2.0 * t - 1.0;
  double prev = 1.0;
  if (k == 0) return prev;
  double cur = x;
  for (int n = 1; n < k; ++n) {
    const double next = ((2.0 * n + 1.0) * x * cur - n * prev) / (n + 1.0);
    prev = cur;
    cur = next;
  }
  return cur;
}

struct ScenarioSpec {
  std::string name;
  Index N = 50;
  Index M = 30;
  Index J = 1;  // visits per subject (ML only)
  Grid grid;
  Vector mu;
  Matrix phi;            // M x K, discretely orthonormal
  Matrix phi_analytic;   // closed forms before projection
  Vector lambda;
  Matrix phi2;           // ML level 2
  Matrix phi2_analytic;
  Vector lambda2;
  double sigma2 = 1.0;

  bool multilevel() const { return name == "ML"; }
  Index K() const { return phi.cols(); }
  Index K2() const { return phi2.cols(); }
};

/// Builds the closed-form truth on t_m = (m-1)/(M-1) and projects every
/// eigenfunction matrix onto the Stiefel manifold so it is exactly orthonormal.
inline ScenarioSpec make_scenario(const std::string& name, Index n = 50, Index m = 30, Index j = 5) {
  constexpr double pi = std::numbers::pi;
  ScenarioSpec s;
  s.name = name;
  s.N = n;
  s.M = m;
  s.grid = Grid::equispaced(static_cast<std::size_t>(m));
  const double md = static_cast<double>(m);
  s.mu.resize(m);
  if (name == "S1") {
    s.phi_analytic.resize(m, 3);
    for (Index r = 0; r < m; ++r) {
      const double t = s.grid[static_cast<std::size_t>(r)];
      s.phi_analytic(r, 0) = legendre01(0, t) / std::sqrt(md);
      s.phi_analytic(r, 1) = std::sqrt(84.0 / (31.0 * md)) * (legendre01(1, t) - 0.5 * legendre01(3, t));
      s.phi_analytic(r, 2) = -std::sqrt(5.0 / md) * legendre01(2, t);
      s.mu(r) = 140.0 - 10.0 * legendre01(2, t);
    }
    s.lambda = (Vector(3) << 45000.0, 7000.0, 2000.0).finished();
    s.sigma2 = 4.0;
  } else if (name == "S2") {
    s.phi_analytic.resize(m, 2);
    for (Index r = 0; r < m; ++r) {
      const double t = s.grid[static_cast<std::size_t>(r)];
      s.phi_analytic(r, 0) = std::sqrt(1.0 / (3.0 * md)) * (1.0 - 2.0 * std::cos(2 * pi * t));
      s.phi_analytic(r, 1) =
          std::sqrt(1.0 / (15.0 * md)) * (5.0 * std::sin(2 * pi * t) - std::sin(4 * pi * t) - 2.0 * std::cos(2 * pi * t));
      s.mu(r) = 10.0 - 5.0 * std::sin(2 * pi * t) - 5.0 * std::cos(2 * pi * t);
    }
    s.lambda = (Vector(2) << 25000.0, 8500.0).finished();
    s.sigma2 = 121.0;
  } else if (name == "ML") {
    s.J = j;
    s.phi_analytic.resize(m, 2);
    s.phi2_analytic.resize(m, 2);
    for (Index r = 0; r < m; ++r) {
      const double t = s.grid[static_cast<std::size_t>(r)];
      const double c = std::sqrt(2.0 / md);
      s.phi_analytic(r, 0) = c * std::sin(2 * pi * t);
      s.phi_analytic(r, 1) = c * std::cos(2 * pi * t);
      s.phi2_analytic(r, 0) = c * std::sin(4 * pi * t);
      s.phi2_analytic(r, 1) = c * std::cos(4 * pi * t);
      s.mu(r) = 5.0 * legendre01(1, t) - 3.0 * legendre01(2, t);
    }
    s.lambda = (Vector(2) << 10000.0, 2000.0).finished();
    s.lambda2 = (Vector(2) << 8000.0, 4000.0).finished();
    s.sigma2 = 16.0;
  } else {
    throw ValidationError("unknown scenario '" + name + "' (expected S1, S2 or ML)");
  }
  if (m < s.phi_analytic.cols() + s.phi2_analytic.cols()) throw ValidationError("M too small for scenario");
  s.phi = project_stiefel(s.phi_analytic);
  if (s.multilevel()) s.phi2 = project_stiefel(s.phi2_analytic);
  return s;
}

}  // namespace bfpca
