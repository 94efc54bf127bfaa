#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "dsg/error.hpp"

namespace dsg {

/// Axis-aligned box in center form, all components relative to image size.
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Corner form, clamped to the unit square.
struct Corners {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double area() const noexcept { return (x1 - x0) * (y1 - y0); }
};

struct BoxCostWeights {
  double lambda_iou = 1.0;
  double lambda_l1 = 2.0;

  void validate() const {
    if (!std::isfinite(lambda_iou) || !std::isfinite(lambda_l1) || lambda_iou < 0.0 ||
        lambda_l1 < 0.0) {
      throw ConfigError("box cost weights must be finite and non-negative");
    }
  }
};

inline bool is_finite(const BBox& b) noexcept {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h);
}

inline void require_finite(const BBox& b) {
  if (!is_finite(b)) throw InputError("bounding box has non-finite components");
}

/// True when every component lies in [0,1].
inline bool in_unit_range(const BBox& b) noexcept {
  auto ok = [](double v) { return v >= 0.0 && v <= 1.0; };
  return ok(b.cx) && ok(b.cy) && ok(b.w) && ok(b.h);
}

inline Corners to_corners(const BBox& b) noexcept {
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  Corners c{clamp01(b.cx - 0.5 * b.w), clamp01(b.cy - 0.5 * b.h), clamp01(b.cx + 0.5 * b.w),
            clamp01(b.cy + 0.5 * b.h)};
  c.x1 = std::max(c.x1, c.x0);
  c.y1 = std::max(c.y1, c.y0);
  return c;
}

inline BBox from_corners(double x0, double y0, double x1, double y1) noexcept {
  return BBox{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
}

namespace detail {

struct Overlap {
  double inter = 0.0;
  double uni = 0.0;
  double enclosing = 0.0;
};

inline Overlap overlap(const BBox& a, const BBox& b) {
  require_finite(a);
  require_finite(b);
  const Corners ca = to_corners(a);
  const Corners cb = to_corners(b);
  const double iw = std::max(0.0, std::min(ca.x1, cb.x1) - std::max(ca.x0, cb.x0));
  const double ih = std::max(0.0, std::min(ca.y1, cb.y1) - std::max(ca.y0, cb.y0));
  Overlap o;
  o.inter = iw * ih;
  o.uni = ca.area() + cb.area() - o.inter;
  o.enclosing = (std::max(ca.x1, cb.x1) - std::min(ca.x0, cb.x0)) *
                (std::max(ca.y1, cb.y1) - std::min(ca.y0, cb.y0));
  return o;
}

}  // namespace detail

/// Intersection over union; boxes with zero area overlap nothing.
inline double iou(const BBox& a, const BBox& b) {
  const auto o = detail::overlap(a, b);
  if (o.uni <= 0.0) return 0.0;
  return o.inter / o.uni;
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
/// A zero-area enclosing box contributes no penalty.
inline double giou(const BBox& a, const BBox& b) {
  const auto o = detail::overlap(a, b);
  const double base = o.uni > 0.0 ? o.inter / o.uni : 0.0;
  if (o.enclosing <= 0.0) return base;
  return base - std::max(0.0, o.enclosing - o.uni) / o.enclosing;
}

/// lambda_iou * (1 - GIoU) + lambda_l1 * |a - b|_1 on the center-form 4-vectors.
inline double box_cost(const BBox& a, const BBox& b, const BoxCostWeights& w) {
  w.validate();
  const double l1 =
      std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
  const double giou_term = w.lambda_iou == 0.0 ? 0.0 : w.lambda_iou * (1.0 - giou(a, b));
  return giou_term + w.lambda_l1 * l1;
}

struct ScoredBox {
  BBox box;
  double score = 0.0;
};

struct NmsCluster {
  std::size_t representative = 0;
  /// Input indices; the representative comes first, then suppressed boxes in rank order.
  std::vector<std::size_t> members;
};

/// Greedy NMS by descending score (ties: lower input index first). Every suppressed box joins
/// the cluster of the box that suppressed it.
inline std::vector<NmsCluster> nms_cluster(std::span<const ScoredBox> dets, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw ConfigError("NMS IoU threshold must lie in (0, 1)");
  }
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw InputError("NMS score is not finite");
    require_finite(d.box);
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<bool> taken(dets.size(), false);
  std::vector<NmsCluster> clusters;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t rep = order[r];
    if (taken[rep]) continue;
    taken[rep] = true;
    NmsCluster cluster{rep, {rep}};
    for (std::size_t s = r + 1; s < order.size(); ++s) {
      const std::size_t cand = order[s];
      if (taken[cand]) continue;
      if (iou(dets[rep].box, dets[cand].box) > iou_threshold) {
        taken[cand] = true;
        cluster.members.push_back(cand);
      }
    }
    clusters.push_back(std::move(cluster));
  }
  return clusters;
}

}  // namespace dsg
