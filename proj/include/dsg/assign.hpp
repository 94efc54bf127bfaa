#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/geom.hpp"

namespace dsg {

/// Weights of the detection-to-tracklet matching cost and the rejection threshold tau.
struct MatchWeights {
  double lambda_feat = 2.0;
  BoxCostWeights box;
  double tau = 0.5;

  void validate() const {
    if (!std::isfinite(lambda_feat) || lambda_feat < 0.0) {
      throw ConfigError("lambda_feat must be finite and non-negative");
    }
    box.validate();
    if (!std::isfinite(tau)) throw ConfigError("tau must be finite");
  }
};

/// Cosine similarity; a zero-norm operand yields 0.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine: vector lengths differ");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!std::isfinite(u[i]) || !std::isfinite(v[i])) throw InputError("cosine: non-finite entry");
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

inline double cosine_cost(std::span<const double> u, std::span<const double> v, double weight) {
  return weight * (1.0 - cosine_similarity(u, v));
}

/// What the cost function sees of a detection or of a tracklet summary.
struct MatchEvidence {
  BBox box;
  std::span<const double> class_dist;
  std::span<const double> feature;
};

/// Square cost matrix over padded detections (rows) and padded tracklets (columns).
struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> entries;  // row-major n*n
  std::vector<bool> dummy_row;
  std::vector<bool> dummy_col;

  double at(std::size_t r, std::size_t c) const { return entries[r * n + c]; }
  double& at(std::size_t r, std::size_t c) { return entries[r * n + c]; }

  static CostMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    CostMatrix m;
    m.n = rows.size();
    m.entries.reserve(m.n * m.n);
    for (const auto& r : rows) {
      if (r.size() != m.n) throw ShapeError("cost matrix must be square");
      m.entries.insert(m.entries.end(), r.begin(), r.end());
    }
    m.dummy_row.assign(m.n, false);
    m.dummy_col.assign(m.n, false);
    return m;
  }
};

inline double match_cost(const MatchEvidence& det, const MatchEvidence& track,
                         const MatchWeights& w) {
  return cosine_cost(det.class_dist, track.class_dist, 1.0) +
         cosine_cost(det.feature, track.feature, w.lambda_feat) +
         box_cost(det.box, track.box, w.box);
}

/// Builds the matching cost over sets already padded to a common length; std::nullopt marks
/// an empty (padding) slot. Every entry touching a padding slot is 0.
inline CostMatrix build_cost_matrix(std::span<const std::optional<MatchEvidence>> dets,
                                    std::span<const std::optional<MatchEvidence>> tracks,
                                    const MatchWeights& w) {
  w.validate();
  if (dets.size() != tracks.size()) throw ShapeError("padded detection/tracklet sets differ");
  CostMatrix m;
  m.n = dets.size();
  m.entries.assign(m.n * m.n, 0.0);
  m.dummy_row.resize(m.n);
  m.dummy_col.resize(m.n);
  for (std::size_t i = 0; i < m.n; ++i) {
    m.dummy_row[i] = !dets[i].has_value();
    m.dummy_col[i] = !tracks[i].has_value();
  }
  for (std::size_t r = 0; r < m.n; ++r) {
    if (m.dummy_row[r]) continue;
    for (std::size_t c = 0; c < m.n; ++c) {
      if (m.dummy_col[c]) continue;
      m.at(r, c) = match_cost(*dets[r], *tracks[c], w);
    }
  }
  return m;
}

/// Pads both sets to max(|dets|, |tracks|) and builds the matrix.
inline CostMatrix build_cost_matrix(std::span<const MatchEvidence> dets,
                                    std::span<const MatchEvidence> tracks, const MatchWeights& w) {
  const std::size_t n = std::max(dets.size(), tracks.size());
  std::vector<std::optional<MatchEvidence>> pd(n), pt(n);
  for (std::size_t i = 0; i < dets.size(); ++i) pd[i] = dets[i];
  for (std::size_t i = 0; i < tracks.size(); ++i) pt[i] = tracks[i];
  return build_cost_matrix(pd, pt, w);
}

struct Assignment {
  std::vector<std::size_t> perm;  // row -> column

  double cost(const CostMatrix& c) const {
    double total = 0.0;
    for (std::size_t r = 0; r < perm.size(); ++r) total += c.at(r, perm[r]);
    return total;
  }
};

namespace detail {

struct LapSolution {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u;  // row potentials
  std::vector<double> v;  // column potentials
};

// Shortest augmenting path Hungarian method, O(n^3). `cost(r, c)` for r, c in [0, n).
template <typename CostFn>
LapSolution solve_lap(std::size_t n, CostFn cost) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
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
  LapSolution s;
  s.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0) s.row_to_col[p[j] - 1] = j - 1;
  }
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

}  // namespace detail

/// Exact minimum-cost assignment. Among optimal permutations (within a relative tolerance of
/// 1e-9) the lexicographically smallest one is returned.
inline Assignment hungarian(const CostMatrix& c) {
  const std::size_t n = c.n;
  if (c.entries.size() != n * n) throw ShapeError("cost matrix entry count does not match n");
  double max_abs = 0.0;
  for (double e : c.entries) {
    if (!std::isfinite(e)) throw InputError("cost matrix has non-finite entries");
    max_abs = std::max(max_abs, std::abs(e));
  }
  if (n == 0) return {};

  const auto full = detail::solve_lap(n, [&](std::size_t r, std::size_t col) { return c.at(r, col); });
  std::vector<std::size_t> best = full.row_to_col;
  double optimum = 0.0;
  for (std::size_t r = 0; r < n; ++r) optimum += c.at(r, best[r]);
  const double tol = 1e-9 * std::max(1.0, max_abs) * static_cast<double>(n);

  // Walk rows in order and move each to the smallest column that still admits an optimal
  // completion. Only edges tight under the optimal duals can belong to an optimal solution.
  std::vector<bool> col_used(n, false);
  double fixed_cost = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t col = 0; col < best[r]; ++col) {
      if (col_used[col]) continue;
      if (c.at(r, col) - full.u[r] - full.v[col] > tol) continue;

      std::vector<std::size_t> rows, cols;
      for (std::size_t rr = r + 1; rr < n; ++rr) rows.push_back(rr);
      for (std::size_t cc = 0; cc < n; ++cc) {
        if (!col_used[cc] && cc != col) cols.push_back(cc);
      }
      const auto sub = detail::solve_lap(
          rows.size(), [&](std::size_t a, std::size_t b) { return c.at(rows[a], cols[b]); });
      double total = fixed_cost + c.at(r, col);
      for (std::size_t k = 0; k < rows.size(); ++k) total += c.at(rows[k], cols[sub.row_to_col[k]]);
      if (total <= optimum + tol) {
        best[r] = col;
        for (std::size_t k = 0; k < rows.size(); ++k) best[rows[k]] = cols[sub.row_to_col[k]];
        break;
      }
    }
    col_used[best[r]] = true;
    fixed_cost += c.at(r, best[r]);
  }
  return Assignment{std::move(best)};
}

}  // namespace dsg
