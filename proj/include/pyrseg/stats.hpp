#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pyrseg/error.hpp"

namespace pyrseg {

struct WilcoxonResult {
  double statistic = 0.0;  // W+, sum of ranks of positive differences a - b
  double p_value = 1.0;    // two-sided
  std::size_t n = 0;       // non-zero differences used
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMaxN = 25;

// Paired Wilcoxon signed-rank test. Zero differences are dropped; tied |differences| get
// average ranks. Exact null distribution (by subset-sum counting over doubled ranks) for
// n <= 25, otherwise the normal approximation with tie and continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("wilcoxon_signed_rank: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " scores");
  if (a.size() < 6) throw ContractError("wilcoxon_signed_rank: need at least 6 pairs, got " + std::to_string(a.size()));
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  if (d.empty()) throw ContractError("wilcoxon_signed_rank: all pairs are tied");

  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Doubled ranks stay integral under averaging of ties.
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && std::abs(d[order[j]]) == std::abs(d[order[i]])) ++j;
    const long r2 = static_cast<long>(i + 1 + j);  // 2 * average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  long w2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) w2 += rank2[i];

  WilcoxonResult res;
  res.n = n;
  res.statistic = static_cast<double>(w2) / 2.0;
  const double nn = static_cast<double>(n);
  if (n <= kWilcoxonExactMaxN) {
    res.exact = true;
    const long total2 = std::accumulate(rank2.begin(), rank2.end(), 0L);
    std::vector<double> count(static_cast<std::size_t>(total2 + 1), 0.0);
    count[0] = 1.0;
    for (long r : rank2)
      for (long s = total2; s >= r; --s) count[s] += count[s - r];
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0.0, upper = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (s <= w2) lower += count[s];
      if (s >= w2) upper += count[s];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
  } else {
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double diff = std::abs(res.statistic - mean);
    const double z = std::max(0.0, diff - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  res.p_value = std::max(res.p_value, std::numeric_limits<double>::min());
  return res;
}

}  // namespace pyrseg
