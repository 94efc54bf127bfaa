#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/geom.hpp"
#include "dsg/sgmodel.hpp"
#include "json.hpp"

namespace dsg {

enum class Task { sgcls, sgdet };
enum class Constraint { with, none };

inline const char* to_string(Task t) { return t == Task::sgcls ? "sgcls" : "sgdet"; }
inline const char* to_string(Constraint c) { return c == Constraint::with ? "with" : "none"; }

inline Task parse_task(const std::string& s) {
  if (s == "sgcls") return Task::sgcls;
  if (s == "sgdet") return Task::sgdet;
  throw ConfigError("unknown task '" + s + "' (expected sgcls or sgdet)");
}

struct PredictedObject {
  int id = 0;
  BBox box;
  std::vector<double> class_dist;

  int label() const {
    return static_cast<int>(std::max_element(class_dist.begin(), class_dist.end()) - class_dist.begin());
  }
  double score() const { return max_probability(class_dist); }
};

struct PredictedPair {
  std::size_t subject = 0;
  std::size_t object = 0;
  /// Per category, one score per local predicate index.
  std::array<std::vector<double>, kCategories> scores;
};

struct FramePrediction {
  std::string video;
  int frame_index = 0;
  std::vector<PredictedObject> objects;
  std::vector<PredictedPair> pairs;
};

struct GtObject {
  int id = 0;
  BBox box;
  int label = 0;
  int track = -1;
};

struct GtTriplet {
  int subject = 0;  ///< gt object id
  int object = 0;
  std::size_t category = 0;
  int predicate = 0;  ///< local index within the category

  friend auto operator<=>(const GtTriplet&, const GtTriplet&) = default;
};

struct FrameGroundTruth {
  std::vector<GtObject> objects;
  std::vector<GtTriplet> triplets;
};

struct RankedTriplet {
  std::size_t pair = 0;
  std::size_t category = 0;
  std::size_t predicate = 0;  ///< local index
  std::size_t predicate_id = 0;  ///< global id
  double score = 0.0;
};

inline std::size_t global_predicate_id(std::span<const std::size_t> arities, std::size_t cat, std::size_t i) {
  std::size_t offset = 0;
  for (std::size_t c = 0; c < cat; ++c) offset += arities[c];
  return offset + i;
}

/// Candidate triplets ordered by descending score; ties go to the lower (pair, predicate id).
/// With the constraint each pair offers its best predicate per category; without it every
/// predicate is a candidate.
inline std::vector<RankedTriplet> rank_triplets(const FramePrediction& f, Constraint mode) {
  std::vector<RankedTriplet> out;
  std::array<std::size_t, kCategories> arities{};
  for (const auto& p : f.pairs) {
    for (std::size_t c = 0; c < kCategories; ++c) arities[c] = std::max(arities[c], p.scores[c].size());
  }
  for (std::size_t k = 0; k < f.pairs.size(); ++k) {
    const auto& p = f.pairs[k];
    if (p.subject >= f.objects.size() || p.object >= f.objects.size()) {
      throw InputError("pair refers to a missing object");
    }
    const double cs = f.objects[p.subject].score();
    const double co = f.objects[p.object].score();
    for (std::size_t c = 0; c < kCategories; ++c) {
      const auto& s = p.scores[c];
      if (s.empty()) continue;
      if (s.size() != arities[c]) throw ShapeError("pairs disagree on predicate arity");
      if (mode == Constraint::with) {
        const std::size_t best = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
        out.push_back({k, c, best, global_predicate_id(arities, c, best), triplet_score(cs, s[best], co)});
      } else {
        for (std::size_t i = 0; i < s.size(); ++i) {
          out.push_back({k, c, i, global_predicate_id(arities, c, i), triplet_score(cs, s[i], co)});
        }
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedTriplet& a, const RankedTriplet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.pair != b.pair) return a.pair < b.pair;
    return a.predicate_id < b.predicate_id;
  });
  return out;
}

/// Index of the unclaimed ground truth a predicted box matches (IoU strictly above 0.5 and
/// equal labels), choosing the highest IoU and then the lowest index.
inline std::optional<std::size_t> match_detection(const BBox& box, int label, std::span<const GtObject> gts,
                                                  const std::vector<bool>& claimed = {}) {
  std::optional<std::size_t> best;
  double best_iou = 0.5;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!claimed.empty() && claimed[g]) continue;
    if (gts[g].label != label) continue;
    const double v = iou(box, gts[g].box);
    if (v > best_iou) {
      best_iou = v;
      best = g;
    }
  }
  return best;
}

/// For every predicted object, the ground-truth index it stands for, or none. SGCls matches by
/// object id and label; SGDet claims ground truths greedily by descending prediction score.
inline std::vector<std::optional<std::size_t>> match_objects(const FramePrediction& f, const FrameGroundTruth& gt,
                                                             Task task) {
  std::vector<std::optional<std::size_t>> out(f.objects.size());
  if (task == Task::sgcls) {
    for (std::size_t i = 0; i < f.objects.size(); ++i) {
      for (std::size_t g = 0; g < gt.objects.size(); ++g) {
        if (gt.objects[g].id == f.objects[i].id && gt.objects[g].label == f.objects[i].label()) out[i] = g;
      }
    }
    return out;
  }
  std::vector<std::size_t> order(f.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return f.objects[a].score() > f.objects[b].score(); });
  std::vector<bool> claimed(gt.objects.size(), false);
  for (std::size_t i : order) {
    const auto m = match_detection(f.objects[i].box, f.objects[i].label(), gt.objects, claimed);
    if (m) {
      claimed[*m] = true;
      out[i] = m;
    }
  }
  return out;
}

/// Fraction of predicted classes equal to the ground truth.
inline double object_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("object_accuracy: length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(truth.size());
}

/// Which ground-truth triplets of one frame are recovered in the top K.
inline std::vector<bool> frame_hits(const FramePrediction& f, const FrameGroundTruth& gt,
                                    std::span<const RankedTriplet> ranked,
                                    std::span<const std::optional<std::size_t>> matches, std::size_t k) {
  std::set<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> found;
  const std::size_t top = std::min(k, ranked.size());
  for (std::size_t r = 0; r < top; ++r) {
    const auto& t = ranked[r];
    const auto& p = f.pairs[t.pair];
    if (!matches[p.subject] || !matches[p.object]) continue;
    found.insert({*matches[p.subject], *matches[p.object], t.category, t.predicate});
  }
  std::map<int, std::size_t> gt_index;
  for (std::size_t g = 0; g < gt.objects.size(); ++g) gt_index[gt.objects[g].id] = g;
  std::vector<bool> hits(gt.triplets.size(), false);
  for (std::size_t i = 0; i < gt.triplets.size(); ++i) {
    const auto& t = gt.triplets[i];
    const auto s = gt_index.find(t.subject), o = gt_index.find(t.object);
    if (s == gt_index.end() || o == gt_index.end()) throw ValidationError("triplet refers to a missing gt object");
    hits[i] = found.contains({s->second, o->second, t.category, static_cast<std::size_t>(t.predicate)});
  }
  return hits;
}

struct MetricsReport {
  Task task = Task::sgcls;
  std::vector<Constraint> modes;
  std::vector<std::size_t> ks;
  /// recall[mode][k], mean_recall[mode][k]
  std::map<Constraint, std::map<std::size_t, double>> recall;
  std::map<Constraint, std::map<std::size_t, double>> mean_recall;
  /// per-class recall keyed by global predicate id, for each mode and K
  std::map<Constraint, std::map<std::size_t, std::map<std::size_t, double>>> class_recall;
  double object_accuracy = 0.0;
  std::size_t frames = 0;
  std::size_t frames_with_triplets = 0;
  std::size_t objects = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "dsg-metrics";
    j["version"] = 1;
    j["task"] = to_string(task);
    j["frames"] = frames;
    j["frames_with_triplets"] = frames_with_triplets;
    j["objects"] = objects;
    j["object_accuracy"] = object_accuracy;
    nlohmann::json modes_json = nlohmann::json::object();
    for (auto m : modes) {
      nlohmann::json mj;
      for (auto k : ks) {
        const std::string key = "R@" + std::to_string(k);
        mj["recall"][key] = recall.at(m).at(k);
        mj["mean_recall"]["mR@" + std::to_string(k)] = mean_recall.at(m).at(k);
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [cls, v] : class_recall.at(m).at(k)) per[std::to_string(cls)] = v;
        mj["class_recall"][key] = per;
      }
      modes_json[to_string(m)] = mj;
    }
    j["constraint"] = modes_json;
    return j;
  }

  std::string table() const {
    std::string out;
    char buf[128];
    std::snprintf(buf, sizeof buf, "task %s  frames %zu  objects %zu  object accuracy %.4f\n", to_string(task),
                  frames, objects, object_accuracy);
    out += buf;
    std::snprintf(buf, sizeof buf, "%-12s", "constraint");
    out += buf;
    for (auto k : ks) {
      std::snprintf(buf, sizeof buf, "%10s", ("R@" + std::to_string(k)).c_str());
      out += buf;
    }
    for (auto k : ks) {
      std::snprintf(buf, sizeof buf, "%10s", ("mR@" + std::to_string(k)).c_str());
      out += buf;
    }
    out += '\n';
    for (auto m : modes) {
      std::snprintf(buf, sizeof buf, "%-12s", to_string(m));
      out += buf;
      for (auto k : ks) {
        std::snprintf(buf, sizeof buf, "%10.4f", recall.at(m).at(k));
        out += buf;
      }
      for (auto k : ks) {
        std::snprintf(buf, sizeof buf, "%10.4f", mean_recall.at(m).at(k));
        out += buf;
      }
      out += '\n';
    }
    return out;
  }
};

/// Accumulates frames and reduces them into a MetricsReport.
class Evaluator {
 public:
  Evaluator(Task task, std::vector<std::size_t> ks, std::vector<Constraint> modes,
            std::array<std::size_t, kCategories> arities)
      : task_(task), ks_(std::move(ks)), modes_(std::move(modes)), arities_(arities) {
    if (ks_.empty() || modes_.empty()) throw ConfigError("evaluator needs at least one K and one mode");
    for (auto k : ks_)
      if (k == 0) throw ConfigError("K must be positive");
  }

  void add(const FramePrediction& f, const FrameGroundTruth& gt) {
    ++frames_;
    for (const auto& t : gt.triplets) {
      if (t.category >= kCategories || t.predicate < 0 || static_cast<std::size_t>(t.predicate) >= arities_[t.category]) {
        throw ValidationError("ground-truth predicate out of range");
      }
    }
    const auto matches = match_objects(f, gt, task_);
    std::vector<bool> gt_hit(gt.objects.size(), false);
    for (const auto& m : matches)
      if (m) gt_hit[*m] = true;
    objects_ += gt.objects.size();
    for (bool b : gt_hit) correct_objects_ += b ? 1 : 0;
    if (gt.triplets.empty()) return;
    ++frames_with_triplets_;
    for (auto mode : modes_) {
      const auto ranked = rank_triplets(f, mode);
      for (auto k : ks_) {
        const auto hits = frame_hits(f, gt, ranked, matches, k);
        auto& acc = acc_[{mode, k}];
        std::size_t h = 0;
        for (std::size_t i = 0; i < hits.size(); ++i) {
          h += hits[i] ? 1 : 0;
          const auto cls = global_predicate_id(arities_, gt.triplets[i].category,
                                               static_cast<std::size_t>(gt.triplets[i].predicate));
          acc.class_total[cls] += 1;
          acc.class_hits[cls] += hits[i] ? 1 : 0;
        }
        acc.recall_sum += static_cast<double>(h) / static_cast<double>(hits.size());
      }
    }
  }

  MetricsReport report() const {
    MetricsReport r;
    r.task = task_;
    r.modes = modes_;
    r.ks = ks_;
    r.frames = frames_;
    r.frames_with_triplets = frames_with_triplets_;
    r.objects = objects_;
    r.object_accuracy = objects_ == 0 ? 0.0 : static_cast<double>(correct_objects_) / static_cast<double>(objects_);
    for (auto mode : modes_) {
      for (auto k : ks_) {
        const auto it = acc_.find({mode, k});
        if (it == acc_.end()) {
          r.recall[mode][k] = 0.0;
          r.mean_recall[mode][k] = 0.0;
          r.class_recall[mode][k] = {};
          continue;
        }
        const auto& acc = it->second;
        r.recall[mode][k] = acc.recall_sum / static_cast<double>(frames_with_triplets_);
        double sum = 0.0;
        for (const auto& [cls, total] : acc.class_total) {
          const double v = static_cast<double>(acc.class_hits.at(cls)) / static_cast<double>(total);
          r.class_recall[mode][k][cls] = v;
          sum += v;
        }
        r.mean_recall[mode][k] = acc.class_total.empty() ? 0.0 : sum / static_cast<double>(acc.class_total.size());
      }
    }
    return r;
  }

 private:
  struct Accumulator {
    double recall_sum = 0.0;
    std::map<std::size_t, std::size_t> class_total, class_hits;
  };

  Task task_;
  std::vector<std::size_t> ks_;
  std::vector<Constraint> modes_;
  std::array<std::size_t, kCategories> arities_;
  std::map<std::pair<Constraint, std::size_t>, Accumulator> acc_;
  std::size_t frames_ = 0, frames_with_triplets_ = 0, objects_ = 0, correct_objects_ = 0;
};

}  // namespace dsg
