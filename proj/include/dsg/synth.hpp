#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsg/data.hpp"
#include "dsg/error.hpp"

namespace dsg {

struct SynthConfig {
  std::size_t n_videos = 20;
  std::size_t frames_per_video = 30;
  std::size_t n_classes = 5;
  std::array<std::size_t, kCategories> arities{3, 3, 4};
  /// Scene size including the subject (class 0).
  std::size_t objects_per_scene = 3;
  /// Velocity persistence in [0, 1]; 1 is constant velocity.
  double smoothness = 0.9;
  double corruption = 0.0;
  double class_noise = 0.3;
  double feature_noise = 0.1;
  /// Weight of the class anchor inside each feature.
  double class_signal = 0.6;
  double union_noise = 0.1;
  /// Chance per frame that a visible object starts an occlusion gap.
  double occlusion_rate = 0.05;
  std::size_t max_gap = 3;
  /// Chance per frame that a pair's predicate in a category is redrawn.
  double predicate_switch = 0.2;
  std::size_t d_feat = 40;
  std::size_t d_union = 32;
  /// Detector-style output: jittered boxes, duplicate detections, separate ground truth.
  bool detector = false;
  double duplicate_rate = 0.3;
  double box_jitter = 0.02;
  double fps = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    for (auto a : arities)
      if (a < 1) throw ConfigError("synth: predicate arities must be at least 1");
    if (n_classes < 2) throw ConfigError("synth: at least two object classes are required");
    if (objects_per_scene < 2) throw ConfigError("synth: a scene needs a subject and at least one object");
    if (!(corruption >= 0.0 && corruption < 1.0)) throw ConfigError("synth: corruption rate must lie in [0, 1)");
    if (!(smoothness >= 0.0 && smoothness <= 1.0)) throw ConfigError("synth: smoothness must lie in [0, 1]");
    if (!(class_noise >= 0.0 && class_noise < 1.0)) throw ConfigError("synth: class_noise must lie in [0, 1)");
    if (!(occlusion_rate >= 0.0 && occlusion_rate <= 1.0) || !(duplicate_rate >= 0.0 && duplicate_rate <= 1.0) ||
        !(predicate_switch >= 0.0 && predicate_switch <= 1.0)) {
      throw ConfigError("synth: rates must lie in [0, 1]");
    }
    if (feature_noise < 0.0 || union_noise < 0.0 || box_jitter < 0.0 || class_signal < 0.0) {
      throw ConfigError("synth: noise levels must be non-negative");
    }
    if (d_feat == 0 || d_union == 0) throw ConfigError("synth: feature widths must be positive");
    if (!(fps > 0.0)) throw ConfigError("synth: fps must be positive");
  }

  DatasetHeader header() const { return {n_classes, d_feat, d_union, arities}; }
};

namespace detail {

inline std::vector<double> unit_gaussian(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  double norm = 0.0;
  for (auto& x : v) {
    x = g(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

inline void normalize(std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& x : v) x /= norm;
}

/// Shared anchors: one per object class and one per (category, predicate).
struct SynthWorld {
  std::vector<std::vector<double>> class_anchor;
  std::array<std::vector<std::vector<double>>, kCategories> predicate_anchor;

  explicit SynthWorld(const SynthConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) class_anchor.push_back(unit_gaussian(rng, cfg.d_feat));
    for (std::size_t cat = 0; cat < kCategories; ++cat)
      for (std::size_t p = 0; p < cfg.arities[cat]; ++p) predicate_anchor[cat].push_back(unit_gaussian(rng, cfg.d_union));
  }
};

struct SynthObject {
  int cls = 0;
  std::vector<double> instance;
  double x = 0.5, y = 0.5, w = 0.2, h = 0.2, vx = 0.0, vy = 0.0;
  std::size_t gap = 0;
  std::array<int, kCategories> predicate{};
};

inline double reflect(double v, double& vel) {
  if (v < 0.1) {
    vel = std::abs(vel);
    return 0.2 - v;
  }
  if (v > 0.9) {
    vel = -std::abs(vel);
    return 1.8 - v;
  }
  return v;
}

}  // namespace detail

/// Fully determined by cfg (including cfg.seed).
inline Dataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const detail::SynthWorld world(cfg);
  Dataset out;
  out.header = cfg.header();

  for (std::size_t v = 0; v < cfg.n_videos; ++v) {
    std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(v + 1)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    auto uniform_int = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    char name[32];
    std::snprintf(name, sizeof name, "v%04zu", v);

    std::vector<detail::SynthObject> objs(cfg.objects_per_scene);
    for (std::size_t k = 0; k < objs.size(); ++k) {
      auto& o = objs[k];
      o.cls = k == 0 ? 0 : static_cast<int>(uniform_int(1, cfg.n_classes - 1));
      o.instance = detail::unit_gaussian(rng, cfg.d_feat);
      o.x = 0.2 + 0.6 * u(rng);
      o.y = 0.2 + 0.6 * u(rng);
      o.w = 0.1 + 0.2 * u(rng);
      o.h = 0.1 + 0.2 * u(rng);
      o.vx = 0.02 * g(rng);
      o.vy = 0.02 * g(rng);
      for (std::size_t c = 0; c < kCategories; ++c) o.predicate[c] = static_cast<int>(uniform_int(0, cfg.arities[c] - 1));
    }

    for (std::size_t t = 0; t < cfg.frames_per_video; ++t) {
      FrameRecord f;
      f.video_id = name;
      f.frame_index = static_cast<int>(t);
      f.timestamp = static_cast<double>(t) / cfg.fps;

      std::vector<std::size_t> visible;
      for (std::size_t k = 0; k < objs.size(); ++k) {
        auto& o = objs[k];
        o.vx = cfg.smoothness * o.vx + (1.0 - cfg.smoothness) * 0.02 * g(rng);
        o.vy = cfg.smoothness * o.vy + (1.0 - cfg.smoothness) * 0.02 * g(rng);
        o.x = detail::reflect(o.x + o.vx, o.vx);
        o.y = detail::reflect(o.y + o.vy, o.vy);
        if (t > 0) {
          for (std::size_t c = 0; c < kCategories; ++c) {
            if (u(rng) < cfg.predicate_switch) o.predicate[c] = static_cast<int>(uniform_int(0, cfg.arities[c] - 1));
          }
        }
        if (k == 0) {
          visible.push_back(k);
          continue;
        }
        if (o.gap > 0) {
          --o.gap;
          continue;
        }
        if (t > 0 && cfg.max_gap > 0 && u(rng) < cfg.occlusion_rate) {
          o.gap = uniform_int(1, cfg.max_gap) - 1;
          continue;
        }
        visible.push_back(k);
      }

      // Ground truth ids are a per-frame shuffle so they carry no identity.
      std::vector<int> gt_id(visible.size());
      for (std::size_t i = 0; i < gt_id.size(); ++i) gt_id[i] = static_cast<int>(i);
      std::shuffle(gt_id.begin(), gt_id.end(), rng);
      FrameGroundTruth gt;
      for (std::size_t i = 0; i < visible.size(); ++i) {
        const auto& o = objs[visible[i]];
        gt.objects.push_back({gt_id[i], BBox{o.x, o.y, o.w, o.h}, o.cls, static_cast<int>(visible[i])});
      }
      for (std::size_t i = 1; i < visible.size(); ++i) {
        for (std::size_t c = 0; c < kCategories; ++c) {
          gt.triplets.push_back({gt_id[0], gt_id[i], c, objs[visible[i]].predicate[c]});
        }
      }
      std::sort(gt.objects.begin(), gt.objects.end(), [](const GtObject& a, const GtObject& b) { return a.id < b.id; });
      std::sort(gt.triplets.begin(), gt.triplets.end());

      auto union_for = [&](std::size_t a, std::size_t b) {
        std::vector<double> x(cfg.d_union, 0.0);
        if (a == 0 && b != 0) {
          for (std::size_t c = 0; c < kCategories; ++c) {
            const auto& anchor = world.predicate_anchor[c][static_cast<std::size_t>(objs[b].predicate[c])];
            for (std::size_t j = 0; j < x.size(); ++j) x[j] += anchor[j];
          }
        }
        for (auto& e : x) e += cfg.union_noise * g(rng);
        return x;
      };

      // detections: (source object, primary?)
      std::vector<std::pair<std::size_t, bool>> sources;
      for (std::size_t k : visible) {
        sources.push_back({k, true});
        if (cfg.detector && u(rng) < cfg.duplicate_rate) sources.push_back({k, false});
      }
      std::vector<int> det_id(sources.size());
      for (std::size_t i = 0; i < det_id.size(); ++i) det_id[i] = static_cast<int>(i);
      std::shuffle(det_id.begin(), det_id.end(), rng);

      std::vector<Detection> dets(sources.size());
      for (std::size_t i = 0; i < sources.size(); ++i) {
        const auto& [k, primary] = sources[i];
        const auto& o = objs[k];
        Detection& d = dets[i];
        d.frame_index = f.frame_index;
        if (cfg.detector) {
          d.detection_id = det_id[i];
          const double j = primary ? cfg.box_jitter : 2.0 * cfg.box_jitter;
          d.box = BBox{o.x + j * o.w * g(rng), o.y + j * o.h * g(rng), o.w * std::exp(j * g(rng)), o.h * std::exp(j * g(rng))};
        } else {
          d.detection_id = gt_id[static_cast<std::size_t>(std::find(visible.begin(), visible.end(), k) - visible.begin())];
          d.box = BBox{o.x, o.y, o.w, o.h};
        }
        int target = o.cls;
        if (u(rng) < cfg.corruption) {
          target = static_cast<int>(uniform_int(0, cfg.n_classes - 2));
          if (target >= o.cls) ++target;
        }
        d.class_dist.assign(cfg.n_classes, 0.0);
        double total = 0.0;
        for (auto& p : d.class_dist) total += (p = cfg.class_noise * u(rng));
        const double peak = primary ? 1.0 : 0.7;
        d.class_dist[static_cast<std::size_t>(target)] += peak;
        total += peak;
        for (auto& p : d.class_dist) p /= total;
        d.feature = o.instance;
        const auto& anchor = world.class_anchor[static_cast<std::size_t>(target)];
        for (std::size_t j = 0; j < d.feature.size(); ++j) {
          d.feature[j] += cfg.class_signal * anchor[j] + cfg.feature_noise * g(rng);
        }
        detail::normalize(d.feature);
      }

      if (cfg.detector) {
        for (std::size_t a = 0; a < dets.size(); ++a)
          for (std::size_t b = 0; b < dets.size(); ++b)
            if (a != b) f.pairs.push_back({dets[a].detection_id, dets[b].detection_id, union_for(sources[a].first, sources[b].first)});
      } else {
        for (std::size_t i = 1; i < visible.size(); ++i) {
          f.pairs.push_back({gt_id[0], gt_id[i], union_for(0, visible[i])});
        }
      }
      std::vector<std::size_t> order(dets.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].detection_id < dets[b].detection_id; });
      for (std::size_t i : order) f.detections.push_back(std::move(dets[i]));
      f.gt = std::move(gt);
      out.frames.push_back(std::move(f));
    }
  }
  return out;
}

}  // namespace dsg
