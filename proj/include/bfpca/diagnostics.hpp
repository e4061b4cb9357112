#pragma once

// Summary statistics and split-chain, rank-normalized convergence diagnostics.

#include <bfpca/core.hpp>

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

namespace bfpca {

using ChainDraws = std::vector<std::vector<double>>;  // [chain][draw]

/// Type-7 (linear interpolation) sample quantile. `values` is copied and sorted.
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw ValidationError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Unbiased sample variance.
inline double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

inline double median_of(std::vector<double> v) { return quantile(std::move(v), 0.5); }

namespace detail {

inline ChainDraws split_chains(const ChainDraws& chains) {
  ChainDraws out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    if (half == 0) continue;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

inline ChainDraws rank_normalize(const ChainDraws& chains) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (double x : chains[c]) pooled.emplace_back(x, pooled.size());
  const std::size_t s = pooled.size();
  std::vector<std::size_t> order(s);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a].first < pooled[b].first; });
  std::vector<double> rank(s);
  for (std::size_t i = 0; i < s;) {
    std::size_t j = i;
    while (j + 1 < s && pooled[order[j + 1]].first == pooled[order[i]].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // average 1-based rank of ties
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  const boost::math::normal n01;
  ChainDraws out(chains.size());
  std::size_t pos = 0;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    out[c].resize(chains[c].size());
    for (std::size_t t = 0; t < chains[c].size(); ++t, ++pos)
      out[c][t] = boost::math::quantile(n01, (rank[pos] - 0.375) / (static_cast<double>(s) + 0.25));
  }
  return out;
}

/// Classical potential scale reduction on equal-length chains; NaN when undefined.
inline double basic_rhat(const ChainDraws& chains) {
  const std::size_t m = chains.size();
  if (m < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(chains.front().size());
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> means(m);
  double w = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    means[c] = mean_of(chains[c]);
    w += variance_of(chains[c]);
  }
  w /= static_cast<double>(m);
  const double b_over_n = variance_of(means);
  if (!(w > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double var_plus = (n - 1.0) / n * w + b_over_n;
  // the ratio estimates a quantity >= 1; sampling noise below 1 is reported as 1
  return std::max(1.0, std::sqrt(var_plus / w));
}

inline bool equal_lengths(const ChainDraws& chains) {
  for (const auto& c : chains)
    if (c.size() != chains.front().size()) return false;
  return !chains.empty();
}

}  // namespace detail

/// Rank-normalized split R-hat: max of the bulk and folded versions.
inline double rhat(const ChainDraws& chains) {
  if (!detail::equal_lengths(chains)) throw ValidationError("rhat needs chains of equal length");
  const ChainDraws split = detail::split_chains(chains);
  if (split.size() < 2 || split.front().size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double bulk = detail::basic_rhat(detail::rank_normalize(split));
  std::vector<double> all;
  for (const auto& c : split) all.insert(all.end(), c.begin(), c.end());
  const double med = median_of(all);
  ChainDraws folded = split;
  for (auto& c : folded)
    for (double& x : c) x = std::abs(x - med);
  const double fold = detail::basic_rhat(detail::rank_normalize(folded));
  if (std::isnan(bulk)) return fold;
  if (std::isnan(fold)) return bulk;
  return std::max(bulk, fold);
}

/// Effective sample size from Geyer's initial monotone sequence across chains.
inline double ess_raw(const ChainDraws& chains) {
  if (!detail::equal_lengths(chains)) throw ValidationError("ess needs chains of equal length");
  const std::size_t m = chains.size();
  const std::size_t n = chains.front().size();
  if (n < 4) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> means(m);
  std::vector<std::vector<double>> centered(m);
  double w = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    means[c] = mean_of(chains[c]);
    centered[c].resize(n);
    for (std::size_t t = 0; t < n; ++t) centered[c][t] = chains[c][t] - means[c];
    w += variance_of(chains[c]);
  }
  w /= static_cast<double>(m);
  if (!(w > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double nd = static_cast<double>(n);
  const double var_plus = (nd - 1.0) / nd * w + (m > 1 ? variance_of(means) : 0.0);
  auto rho = [&](std::size_t lag) {
    double acov = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      double s = 0.0;
      for (std::size_t t = 0; t + lag < n; ++t) s += centered[c][t] * centered[c][t + lag];
      acov += s / nd;
    }
    acov /= static_cast<double>(m);
    return 1.0 - (w * (nd - 1.0) / nd - acov) / var_plus;
  };
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(m) * nd));
  return static_cast<double>(m) * nd / tau;
}

/// Bulk ESS: Geyer ESS of the rank-normalized split chains.
inline double ess(const ChainDraws& chains) {
  if (!detail::equal_lengths(chains)) throw ValidationError("ess needs chains of equal length");
  const ChainDraws split = detail::split_chains(chains);
  if (split.empty() || split.front().size() < 4) return std::numeric_limits<double>::quiet_NaN();
  return ess_raw(detail::rank_normalize(split));
}

/// Monte Carlo standard error of the mean of one series, via its ESS.
inline double mcse_mean(const std::vector<double>& series) {
  const double e = ess_raw({series});
  return std::sqrt(variance_of(series) / e);
}

}  // namespace bfpca
