#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "autoprom/error.hpp"

namespace autoprom {

/// Minimum-cost assignment for a rows x cols cost matrix (row-major). Returns
/// the column assigned to each row, or -1; min(rows, cols) pairs are formed.
/// Potential-based shortest augmenting path, O(n^2 m).
inline std::vector<int> hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols) throw ShapeError("hungarian: cost size does not match rows x cols");
  for (double c : cost)
    if (!std::isfinite(c)) throw ValidationError("hungarian: costs must be finite");
  if (rows == 0 || cols == 0) return std::vector<int>(rows, -1);
  const bool transposed = rows > cols;
  const std::size_t n = transposed ? cols : rows, m = transposed ? rows : cols;
  auto at = [&](std::size_t i, std::size_t j) { return transposed ? cost[j * cols + i] : cost[i * cols + j]; };

  const double inf = std::numeric_limits<double>::infinity();
  // 1-based with a virtual column 0, as in the classical formulation.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (transposed) {
      out[j - 1] = static_cast<int>(p[j] - 1);
    } else {
      out[p[j] - 1] = static_cast<int>(j - 1);
    }
  }
  return out;
}

}  // namespace autoprom
