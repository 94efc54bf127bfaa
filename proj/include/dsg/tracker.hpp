#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dsg/assign.hpp"
#include "dsg/error.hpp"
#include "dsg/geom.hpp"
#include "json.hpp"

namespace dsg {

/// One detector output for one key frame.
struct Detection {
  int frame_index = 0;
  int detection_id = 0;
  BBox box;
  std::vector<double> class_dist;
  std::vector<double> feature;

  /// Detector confidence: the largest class probability.
  double score() const {
    return class_dist.empty() ? 0.0 : *std::max_element(class_dist.begin(), class_dist.end());
  }
  int argmax_class() const {
    return static_cast<int>(std::max_element(class_dist.begin(), class_dist.end()) -
                            class_dist.begin());
  }
  MatchEvidence evidence() const { return MatchEvidence{box, class_dist, feature}; }
};

inline void validate_detection(const Detection& d) {
  if (d.frame_index < 0) throw InputError("detection frame index is negative");
  if (!is_finite(d.box)) throw InputError("detection box is not finite");
  if (d.class_dist.empty()) throw InputError("detection class distribution is empty");
  double sum = 0.0;
  for (double p : d.class_dist) {
    if (!std::isfinite(p) || p < 0.0) throw InputError("class distribution has invalid entries");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InputError("class distribution does not sum to 1");
  for (double f : d.feature) {
    if (!std::isfinite(f)) throw InputError("detection feature is not finite");
  }
}

struct MemberRef {
  int frame_index = 0;
  int detection_id = 0;

  friend auto operator<=>(const MemberRef&, const MemberRef&) = default;
};

/// Detections matched across key frames plus their running statistics.
class Tracklet {
 public:
  Tracklet(int id, const Detection& first, double timestamp) : id_(id) {
    class_sum_.assign(first.class_dist.size(), 0.0);
    feature_sum_.assign(first.feature.size(), 0.0);
    add(first, timestamp);
  }

  int id() const noexcept { return id_; }
  const std::vector<MemberRef>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }
  const std::vector<double>& avg_class_dist() const noexcept { return avg_class_; }
  const std::vector<double>& avg_feature() const noexcept { return avg_feature_; }
  const BBox& last_box() const noexcept { return last_box_; }
  int last_frame() const noexcept { return last_frame_; }
  double last_timestamp() const noexcept { return last_timestamp_; }
  bool active() const noexcept { return active_; }
  void set_active(bool a) noexcept { active_ = a; }

  MatchEvidence evidence() const { return MatchEvidence{last_box_, avg_class_, avg_feature_}; }

  void add(const Detection& d, double timestamp) {
    if (!members_.empty() && d.frame_index <= last_frame_) {
      throw SequenceError("tracklet members must have strictly increasing frame indices");
    }
    if (d.class_dist.size() != class_sum_.size() || d.feature.size() != feature_sum_.size()) {
      throw ShapeError("detection dimensions differ from tracklet");
    }
    members_.push_back({d.frame_index, d.detection_id});
    const double n = static_cast<double>(members_.size());
    avg_class_.resize(class_sum_.size());
    avg_feature_.resize(feature_sum_.size());
    for (std::size_t i = 0; i < class_sum_.size(); ++i) {
      class_sum_[i] += d.class_dist[i];
      avg_class_[i] = class_sum_[i] / n;
    }
    for (std::size_t i = 0; i < feature_sum_.size(); ++i) {
      feature_sum_[i] += d.feature[i];
      avg_feature_[i] = feature_sum_[i] / n;
    }
    last_box_ = d.box;
    last_frame_ = d.frame_index;
    last_timestamp_ = timestamp;
    active_ = true;
  }

 private:
  int id_;
  std::vector<MemberRef> members_;
  std::vector<double> class_sum_;
  std::vector<double> feature_sum_;
  std::vector<double> avg_class_;
  std::vector<double> avg_feature_;
  BBox last_box_;
  int last_frame_ = -1;
  double last_timestamp_ = 0.0;
  bool active_ = true;
};

enum class ExpiryMode { key_frames, timestamps };

struct TrackerConfig {
  /// Inactivity horizon: a tracklet accepts a detection at frame i only if i - last_frame <= m.
  int m = 50;
  MatchWeights weights;
  ExpiryMode expiry = ExpiryMode::key_frames;
  /// Horizon in seconds, used when expiry == timestamps.
  double m_seconds = 50.0;

  void validate() const {
    if (m < 0) throw ConfigError("inactivity horizon m must be non-negative");
    if (expiry == ExpiryMode::timestamps && !(m_seconds >= 0.0)) {
      throw ConfigError("inactivity horizon in seconds must be non-negative");
    }
    weights.validate();
  }
};

struct StepAssignment {
  int tracklet_id = -1;
  bool is_new = false;
};

/// Online coarse tracker. Single writer: frames of one video must be stepped in order.
class Tracker {
 public:
  explicit Tracker(TrackerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const TrackerConfig& config() const noexcept { return cfg_; }
  const std::vector<Tracklet>& tracklets() const noexcept { return tracklets_; }
  int current_frame() const noexcept { return current_frame_; }

  bool is_matchable(const Tracklet& t, int frame_index, double timestamp) const {
    if (cfg_.expiry == ExpiryMode::timestamps) {
      return timestamp - t.last_timestamp() <= cfg_.m_seconds;
    }
    return frame_index - t.last_frame() <= cfg_.m;
  }

  /// Associates the detections of key frame `frame_index` with the active tracklets. Returns
  /// one assignment per detection, in input order.
  std::vector<StepAssignment> step(int frame_index, std::span<const Detection> dets,
                                   double timestamp = std::numeric_limits<double>::quiet_NaN()) {
    if (frame_index <= current_frame_) {
      throw SequenceError("frame " + std::to_string(frame_index) +
                          " is not after current frame " + std::to_string(current_frame_));
    }
    if (cfg_.expiry == ExpiryMode::timestamps) {
      if (!std::isfinite(timestamp)) throw SequenceError("timestamp expiry needs frame timestamps");
      if (!tracklets_.empty() && timestamp < last_timestamp_) {
        throw SequenceError("timestamps must be non-decreasing");
      }
    }
    for (const auto& d : dets) {
      if (d.frame_index != frame_index) {
        throw SequenceError("detection frame index differs from the stepped frame");
      }
      validate_detection(d);
    }
    current_frame_ = frame_index;
    last_timestamp_ = timestamp;

    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < tracklets_.size(); ++k) {
      if (is_matchable(tracklets_[k], frame_index, timestamp)) active.push_back(k);
    }

    const std::size_t n = std::max(dets.size(), active.size());
    std::vector<std::optional<MatchEvidence>> pd(n), pt(n);
    for (std::size_t j = 0; j < dets.size(); ++j) pd[j] = dets[j].evidence();
    for (std::size_t c = 0; c < active.size(); ++c) pt[c] = tracklets_[active[c]].evidence();
    const CostMatrix cost = build_cost_matrix(pd, pt, cfg_.weights);
    const Assignment sigma = hungarian(cost);

    std::vector<StepAssignment> out(dets.size());
    std::vector<std::pair<std::size_t, std::size_t>> appends;  // (tracklet slot, detection)
    std::vector<Tracklet> created;
    int next_id = next_id_;
    for (std::size_t j = 0; j < dets.size(); ++j) {
      const std::size_t col = sigma.perm[j];
      bool matched = col < active.size();
      if (matched) {
        const Tracklet& t = tracklets_[active[col]];
        const double cos_dist = cosine_similarity(dets[j].class_dist, t.avg_class_dist());
        const double cos_feat = cosine_similarity(dets[j].feature, t.avg_feature());
        if (cos_dist < cfg_.weights.tau && cos_feat < cfg_.weights.tau) matched = false;
      }
      if (matched) {
        appends.emplace_back(active[col], j);
        out[j] = {tracklets_[active[col]].id(), false};
      } else {
        created.emplace_back(next_id, dets[j], timestamp);
        out[j] = {next_id, true};
        ++next_id;
      }
    }
    for (auto [slot, j] : appends) tracklets_[slot].add(dets[j], timestamp);
    for (auto& t : created) tracklets_.push_back(std::move(t));
    next_id_ = next_id;
    for (auto& t : tracklets_) t.set_active(is_matchable(t, frame_index, timestamp));
    return out;
  }

 private:
  TrackerConfig cfg_;
  std::vector<Tracklet> tracklets_;
  int current_frame_ = -1;
  double last_timestamp_ = -std::numeric_limits<double>::infinity();
  int next_id_ = 0;
};

/// All detections of one key frame.
struct FrameDetections {
  int frame_index = 0;
  double timestamp = std::numeric_limits<double>::quiet_NaN();
  std::vector<Detection> detections;
};

/// Runs the tracker over a whole video and returns every tracklet, active or not.
inline std::vector<Tracklet> track_video(std::span<const FrameDetections> frames,
                                         const TrackerConfig& cfg) {
  Tracker tracker(cfg);
  for (const auto& f : frames) tracker.step(f.frame_index, f.detections, f.timestamp);
  return tracker.tracklets();
}

/// One element of a sequence fed to the object transformer. Detections that share a
/// position also share their positional encoding.
struct SequenceEntry {
  MemberRef ref;
  int position = 0;
  bool representative = true;

  friend bool operator==(const SequenceEntry&, const SequenceEntry&) = default;
};

struct TrackSequence {
  int id = 0;
  /// Grouping label for label-based sequences, -1 otherwise.
  int label = -1;
  std::vector<SequenceEntry> entries;

  friend bool operator==(const TrackSequence&, const TrackSequence&) = default;
};

inline std::vector<TrackSequence> to_sequences(std::span<const Tracklet> tracklets) {
  std::vector<TrackSequence> out;
  out.reserve(tracklets.size());
  for (const auto& t : tracklets) {
    TrackSequence s{t.id(), -1, {}};
    for (std::size_t p = 0; p < t.members().size(); ++p) {
      s.entries.push_back({t.members()[p], static_cast<int>(p), true});
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct ClusterTrackResult {
  /// Tracklets over cluster representatives.
  std::vector<Tracklet> tracklets;
  /// One sequence per tracklet holding every detection; cluster members carry their
  /// representative's position.
  std::vector<TrackSequence> sequences;
};

/// NMS-clusters each frame, tracks only the representatives, then attaches every cluster
/// member to its representative's tracklet at the representative's sequence position.
inline ClusterTrackResult cluster_and_track(std::span<const FrameDetections> frames,
                                            double nms_threshold, const TrackerConfig& cfg) {
  Tracker tracker(cfg);
  // tracklet id -> list of (frame, cluster member refs, representative ref)
  std::map<int, std::vector<std::vector<SequenceEntry>>> attached;
  for (const auto& f : frames) {
    std::vector<ScoredBox> scored;
    scored.reserve(f.detections.size());
    for (const auto& d : f.detections) scored.push_back({d.box, d.score()});
    auto clusters = nms_cluster(scored, nms_threshold);
    std::sort(clusters.begin(), clusters.end(),
              [](const NmsCluster& a, const NmsCluster& b) { return a.representative < b.representative; });
    std::vector<Detection> reps;
    reps.reserve(clusters.size());
    for (const auto& c : clusters) reps.push_back(f.detections[c.representative]);
    const auto assigned = tracker.step(f.frame_index, reps, f.timestamp);
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      std::vector<SequenceEntry> group;
      for (std::size_t m : clusters[c].members) {
        const auto& d = f.detections[m];
        group.push_back({{d.frame_index, d.detection_id}, 0, m == clusters[c].representative});
      }
      attached[assigned[c].tracklet_id].push_back(std::move(group));
    }
  }
  ClusterTrackResult result;
  result.tracklets = tracker.tracklets();
  for (const auto& t : result.tracklets) {
    TrackSequence s{t.id(), -1, {}};
    const auto& groups = attached[t.id()];
    for (std::size_t p = 0; p < groups.size(); ++p) {
      for (auto e : groups[p]) {
        e.position = static_cast<int>(p);
        s.entries.push_back(e);
      }
    }
    result.sequences.push_back(std::move(s));
  }
  return result;
}

/// Places detections with the same argmax class into one temporally ordered sequence.
/// Detections of one frame share a position. Sequences are ordered by label.
inline std::vector<TrackSequence> label_grouping(std::span<const FrameDetections> frames) {
  std::map<int, TrackSequence> by_label;
  std::map<int, int> last_frame;
  for (const auto& f : frames) {
    for (const auto& d : f.detections) {
      const int label = d.argmax_class();
      auto [it, inserted] = by_label.try_emplace(label, TrackSequence{label, label, {}});
      auto& seq = it->second;
      int pos = 0;
      if (!seq.entries.empty()) {
        pos = seq.entries.back().position;
        if (last_frame[label] != d.frame_index) ++pos;
      }
      last_frame[label] = d.frame_index;
      seq.entries.push_back({{d.frame_index, d.detection_id}, pos, true});
    }
  }
  std::vector<TrackSequence> out;
  for (auto& [label, seq] : by_label) out.push_back(std::move(seq));
  return out;
}

/// Every detection on its own: the no-context baseline.
inline std::vector<TrackSequence> singleton_sequences(std::span<const FrameDetections> frames) {
  std::vector<TrackSequence> out;
  int id = 0;
  for (const auto& f : frames) {
    for (const auto& d : f.detections) {
      out.push_back(TrackSequence{id++, -1, {{{d.frame_index, d.detection_id}, 0, true}}});
    }
  }
  return out;
}

inline nlohmann::json box_to_json(const BBox& b) { return nlohmann::json::array({b.cx, b.cy, b.w, b.h}); }

/// One line of the tracklet dump.
inline nlohmann::json tracklet_record(const std::string& video_id, const Tracklet& t) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : t.members()) members.push_back({m.frame_index, m.detection_id});
  return nlohmann::json{{"video", video_id},
                        {"id", t.id()},
                        {"members", std::move(members)},
                        {"class_dist", t.avg_class_dist()},
                        {"feature", t.avg_feature()},
                        {"box", box_to_json(t.last_box())},
                        {"last_frame", t.last_frame()},
                        {"active", t.active()}};
}

inline void write_tracklet_dump(std::ostream& os, const std::string& video_id,
                                std::span<const Tracklet> tracklets) {
  for (const auto& t : tracklets) os << tracklet_record(video_id, t).dump() << '\n';
}

}  // namespace dsg
