#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library: plain loops over std::vector, summed in row-major
// pair order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline double alpha_for(std::size_t pos, std::size_t neg, std::optional<double> alpha) {
  if (alpha) return *alpha;
  if (pos == 0) return 100.0;
  return std::clamp(static_cast<double>(neg) / static_cast<double>(pos), 1.0, 100.0);
}

inline double comparative(const Matrix& s, const std::vector<int>& lq, const std::vector<int>& lk,
                          std::optional<double> alpha) {
  std::size_t pos = 0, neg = 0;
  for (int a : lq)
    for (int b : lk) (a == b ? pos : neg)++;
  const double al = alpha_for(pos, neg, alpha);
  double total = 0.0;
  for (std::size_t i = 0; i < lq.size(); ++i) {
    for (std::size_t j = 0; j < lk.size(); ++j) {
      const double v = s[i][j];
      total += lq[i] == lk[j] ? al * (1.0 - v) * (1.0 - v) : v * v;
    }
  }
  return total;
}

inline double template_loss(const Matrix& s, const std::vector<int>& labels, std::optional<double> alpha) {
  std::vector<int> classes(s.empty() ? 0 : s[0].size());
  std::iota(classes.begin(), classes.end(), 0);
  return comparative(s, labels, classes, alpha);
}

inline double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

// Biased MMD^2 with one Gaussian kernel exp(-||x-y||^2 / (2 sigma^2)) by
// explicit double sums.
inline double mmd2(const Matrix& x, const Matrix& y, double sigma) {
  auto k = [&](const std::vector<double>& a, const std::vector<double>& b) {
    return std::exp(-sqdist(a, b) / (2.0 * sigma * sigma));
  };
  double xx = 0, yy = 0, xy = 0;
  for (const auto& a : x)
    for (const auto& b : x) xx += k(a, b);
  for (const auto& a : y)
    for (const auto& b : y) yy += k(a, b);
  for (const auto& a : x)
    for (const auto& b : y) xy += k(a, b);
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  return xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m);
}

inline double mk_mmd(const Matrix& x, const Matrix& y, const std::vector<double>& sigmas,
                     const std::vector<double>& beta) {
  double total = 0.0;
  for (std::size_t j = 0; j < sigmas.size(); ++j) total += beta[j] * mmd2(x, y, sigmas[j]);
  return total;
}

// Spearman correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0 || db == 0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace oracle
