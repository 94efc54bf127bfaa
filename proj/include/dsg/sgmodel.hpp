#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/geom.hpp"
#include "dsg/nn/layers.hpp"
#include "dsg/tracker.hpp"

namespace dsg {

/// Predicate categories in the order attention, spatial, contact.
inline constexpr std::size_t kCategories = 3;
inline constexpr std::array<const char*, kCategories> kCategoryNames{"attention", "spatial", "contact"};

struct ModelConfig {
  std::size_t n_classes = 5;
  std::array<std::size_t, kCategories> arities{3, 3, 4};

  std::size_t d_feat = 40;
  std::size_t w_box = 16;
  std::size_t w_dist = 8;
  std::size_t obj_heads = 4;
  std::size_t obj_ffn = 64;
  std::size_t obj_layers = 3;
  std::size_t class_hidden = 32;

  std::size_t d_union = 32;
  std::size_t w_vis = 16;
  std::size_t w_sp = 16;
  std::size_t w_sem = 8;
  std::size_t rel_heads = 4;
  std::size_t rel_ffn = 64;
  std::size_t spatial_layers = 1;
  std::size_t temporal_layers = 3;

  double dropout = 0.1;

  std::size_t d_object() const { return w_box + w_dist + d_feat; }
  std::size_t d_relation() const { return 2 * w_vis + w_sp + 2 * w_sem; }
  std::size_t n_predicates() const { return arities[0] + arities[1] + arities[2]; }
  /// Global predicate id of local index `i` in category `cat`.
  std::size_t predicate_id(std::size_t cat, std::size_t i) const {
    std::size_t offset = 0;
    for (std::size_t c = 0; c < cat; ++c) offset += arities[c];
    return offset + i;
  }

  static ModelConfig paper() {
    ModelConfig c;
    c.n_classes = 35;
    c.arities = {3, 6, 16};
    c.d_feat = 2048;
    c.w_box = 128;
    c.w_dist = 200;
    c.obj_heads = 8;
    c.obj_ffn = 2048;
    c.class_hidden = 1024;
    c.d_union = 256 * 7 * 7;
    c.w_vis = 512;
    c.w_sp = 512;
    c.w_sem = 200;
    c.rel_heads = 8;
    c.rel_ffn = 2048;
    return c;
  }

  static ModelConfig toy() { return ModelConfig{}; }

  nn::EncoderConfig object_encoder() const { return {d_object(), obj_heads, obj_ffn, obj_layers, dropout}; }
  nn::EncoderConfig spatial_encoder() const { return {d_relation(), rel_heads, rel_ffn, spatial_layers, dropout}; }
  nn::EncoderConfig temporal_encoder() const { return {d_relation(), rel_heads, rel_ffn, temporal_layers, dropout}; }

  void validate() const {
    if (n_classes < 1) throw ConfigError("model needs at least one object class");
    for (auto a : arities)
      if (a < 1) throw ConfigError("predicate arities must be at least 1");
    if (d_feat == 0 || w_box == 0 || w_dist == 0 || class_hidden == 0 || d_union == 0 || w_vis == 0 ||
        w_sp == 0 || w_sem == 0) {
      throw ConfigError("model widths must be positive");
    }
    object_encoder().validate();
    spatial_encoder().validate();
    temporal_encoder().validate();
  }
};

/// One detection as the model sees it. `label` is the training target (-1 when unknown).
struct ModelDetection {
  int frame_index = 0;
  int detection_id = 0;
  BBox box;
  std::vector<double> class_dist;
  std::vector<double> feature;
  int label = -1;
};

/// A subject-object pair in one frame; indices point into the sample's detections.
struct PairInput {
  std::size_t subject = 0;
  std::size_t object = 0;
  std::vector<double> union_feature;
  /// Annotated local predicate indices per category; empty means no annotation.
  std::array<std::vector<int>, kCategories> predicates;
};

/// Everything one forward pass consumes: one video.
struct VideoSample {
  std::vector<ModelDetection> detections;
  /// Per detection: id of its object sequence and its position inside that sequence.
  std::vector<int> sequence;
  std::vector<int> position;
  std::vector<PairInput> pairs;
};

/// Fills sequence/position from sequences given by reference. Every detection must occur
/// exactly once.
inline void assign_sequences(VideoSample& s, std::span<const TrackSequence> sequences) {
  std::map<MemberRef, std::size_t> row;
  for (std::size_t i = 0; i < s.detections.size(); ++i) {
    const MemberRef ref{s.detections[i].frame_index, s.detections[i].detection_id};
    if (!row.emplace(ref, i).second) throw InputError("duplicate detection in video sample");
  }
  s.sequence.assign(s.detections.size(), -1);
  s.position.assign(s.detections.size(), 0);
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    for (const auto& e : sequences[k].entries) {
      const auto it = row.find(e.ref);
      if (it == row.end()) throw InputError("sequence refers to an unknown detection");
      if (s.sequence[it->second] != -1) throw InputError("detection placed in two sequences");
      s.sequence[it->second] = static_cast<int>(k);
      s.position[it->second] = e.position;
    }
  }
  for (int id : s.sequence)
    if (id < 0) throw InputError("detection missing from every sequence");
}

/// Groups of pairs sharing (subject class, object class). Returns per pair its group id
/// (groups numbered by first appearance) and its position: the rank of its frame among the
/// group's distinct frames.
struct TemporalGroups {
  std::vector<int> group;
  std::vector<int> position;
  std::size_t count = 0;
};

inline TemporalGroups temporal_groups(std::span<const int> pair_frames, std::span<const int> subject_class,
                                      std::span<const int> object_class) {
  const std::size_t n = pair_frames.size();
  if (subject_class.size() != n || object_class.size() != n) throw ShapeError("temporal_groups: length mismatch");
  TemporalGroups g;
  g.group.resize(n);
  g.position.resize(n);
  std::map<std::pair<int, int>, int> ids;
  std::vector<std::vector<int>> frames;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [it, inserted] = ids.try_emplace({subject_class[i], object_class[i]}, static_cast<int>(ids.size()));
    if (inserted) frames.emplace_back();
    g.group[i] = it->second;
    frames[static_cast<std::size_t>(it->second)].push_back(pair_frames[i]);
  }
  for (auto& f : frames) {
    std::sort(f.begin(), f.end());
    f.erase(std::unique(f.begin(), f.end()), f.end());
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = frames[static_cast<std::size_t>(g.group[i])];
    g.position[i] = static_cast<int>(std::lower_bound(f.begin(), f.end(), pair_frames[i]) - f.begin());
  }
  g.count = frames.size();
  return g;
}

struct ObjectOutput {
  nn::Var tokens;    ///< O + PE, the encoder input
  nn::Var features;  ///< F~
  nn::Var logits;
  nn::Tensor probs;  ///< C~
};

struct PredicateScores {
  nn::Var attention;  ///< softmax rows
  nn::Var spatial;    ///< sigmoid
  nn::Var contact;    ///< sigmoid
  const nn::Var& category(std::size_t c) const { return c == 0 ? attention : c == 1 ? spatial : contact; }
};

struct RelationOutput {
  nn::Var embedding;  ///< r
  nn::Var spatial_context;
  nn::Var temporal_context;  ///< Z
  PredicateScores scores;
  TemporalGroups groups;
};

/// max(c~_s) * p * max(c~_o)
inline double triplet_score(double subject_confidence, double predicate_score, double object_confidence) {
  return subject_confidence * predicate_score * object_confidence;
}

inline double max_probability(std::span<const double> dist) {
  if (dist.empty()) throw ShapeError("empty class distribution");
  return *std::max_element(dist.begin(), dist.end());
}

inline std::vector<int> argmax_rows(const nn::Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const auto r = t.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

/// Object transformer plus spatial-temporal relationship transformer.
class SceneGraphModel {
 public:
  SceneGraphModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
    cfg_.validate();
    box_ = nn::Linear(store_, "obj.box", 4, cfg_.w_box);
    dist_ = nn::Linear(store_, "obj.dist", cfg_.n_classes, cfg_.w_dist, false);
    object_encoder_ = nn::Encoder(store_, "obj.encoder", cfg_.object_encoder());
    class_hidden_ = nn::Linear(store_, "obj.head.hidden", cfg_.d_object(), cfg_.class_hidden);
    class_out_ = nn::Linear(store_, "obj.head.out", cfg_.class_hidden, cfg_.n_classes);

    subject_ = nn::Linear(store_, "rel.subject", cfg_.d_feat, cfg_.w_vis, false);
    object_ = nn::Linear(store_, "rel.object", cfg_.d_feat, cfg_.w_vis, false);
    boxes_ = nn::Linear(store_, "rel.boxes", 8, cfg_.d_union);
    spatial_embed_ = nn::Linear(store_, "rel.spatial", cfg_.d_union, cfg_.w_sp, false);
    glove_ = store_.weight("rel.glove", cfg_.n_classes, cfg_.w_sem);
    spatial_encoder_ = nn::Encoder(store_, "rel.spatial_encoder", cfg_.spatial_encoder());
    temporal_encoder_ = nn::Encoder(store_, "rel.temporal_encoder", cfg_.temporal_encoder());
    for (std::size_t c = 0; c < kCategories; ++c) {
      heads_[c] = nn::Linear(store_, std::string("rel.head.") + kCategoryNames[c], cfg_.d_relation(), cfg_.arities[c]);
    }
  }

  SceneGraphModel(const SceneGraphModel&) = delete;
  SceneGraphModel& operator=(const SceneGraphModel&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return store_; }
  const nn::ParamStore& params() const noexcept { return store_; }
  const nn::Encoder& spatial_encoder() const noexcept { return spatial_encoder_; }
  const nn::Encoder& temporal_encoder() const noexcept { return temporal_encoder_; }

  /// Rows o = [g_box(b), g_dist(c~), f] for every detection.
  nn::Var embed_objects(const VideoSample& s, const nn::ForwardContext& ctx) const {
    check_sample(s);
    const std::size_t n = s.detections.size();
    nn::Tensor boxes(n, 4), dists(n, cfg_.n_classes), feats(n, cfg_.d_feat);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& d = s.detections[i];
      const std::array<double, 4> b{d.box.cx, d.box.cy, d.box.w, d.box.h};
      std::copy(b.begin(), b.end(), boxes.row(i).begin());
      std::copy(d.class_dist.begin(), d.class_dist.end(), dists.row(i).begin());
      std::copy(d.feature.begin(), d.feature.end(), feats.row(i).begin());
    }
    standardize_columns(boxes);
    const nn::Var g_box = nn::apply_dropout(nn::relu(box_(nn::Var::constant(std::move(boxes)))), cfg_.dropout, ctx);
    const nn::Var g_dist = dist_(nn::Var::constant(std::move(dists)));
    return nn::concat_cols({g_box, g_dist, nn::Var::constant(std::move(feats))});
  }

  ObjectOutput forward_objects(const VideoSample& s, const nn::ForwardContext& ctx) const {
    ObjectOutput out;
    if (s.detections.empty()) return out;
    const nn::Var o = embed_objects(s, ctx);
    out.tokens = nn::add(o, nn::Var::constant(nn::positional_rows(s.position, cfg_.d_object())));
    out.features = object_encoder_(out.tokens, s.sequence, ctx);
    out.logits = class_out_(nn::relu(class_hidden_(out.features)));
    out.probs = softmax_values(out.logits.value());
    return out;
  }

  /// r = [r_vs, r_sp, r_se] for every pair; `classes` gives the class of each detection used
  /// for the semantic embedding.
  nn::Var embed_relationships(const VideoSample& s, const nn::Var& features, std::span<const int> classes) const {
    const std::size_t n = s.pairs.size();
    if (classes.size() != s.detections.size()) throw ShapeError("one class per detection required");
    if (features.rows() != s.detections.size() || features.cols() != cfg_.d_object()) {
      throw ShapeError("object features have the wrong shape");
    }
    std::vector<std::size_t> subj(n), obj(n);
    std::vector<std::size_t> subj_cls(n), obj_cls(n);
    nn::Tensor unions(n, cfg_.d_union), pair_boxes(n, 8);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& p = s.pairs[k];
      if (p.subject >= s.detections.size() || p.object >= s.detections.size()) {
        throw ShapeError("pair refers to a missing detection");
      }
      if (s.detections[p.subject].frame_index != s.detections[p.object].frame_index) {
        throw InputError("subject and object must come from the same frame");
      }
      if (p.union_feature.size() != cfg_.d_union) throw ShapeError("union feature has the wrong width");
      subj[k] = p.subject;
      obj[k] = p.object;
      subj_cls[k] = checked_class(classes[p.subject]);
      obj_cls[k] = checked_class(classes[p.object]);
      std::copy(p.union_feature.begin(), p.union_feature.end(), unions.row(k).begin());
      const auto& bs = s.detections[p.subject].box;
      const auto& bo = s.detections[p.object].box;
      const std::array<double, 8> b{bs.cx, bs.cy, bs.w, bs.h, bo.cx, bo.cy, bo.w, bo.h};
      std::copy(b.begin(), b.end(), pair_boxes.row(k).begin());
    }
    const nn::Var f_tilde = nn::slice_cols(features, cfg_.d_object() - cfg_.d_feat, cfg_.d_feat);
    const nn::Var r_vs = nn::concat_cols({subject_(nn::gather_rows(f_tilde, subj)), object_(nn::gather_rows(f_tilde, obj))});
    const nn::Var r_sp =
        spatial_embed_(nn::add(nn::Var::constant(std::move(unions)), boxes_(nn::Var::constant(std::move(pair_boxes)))));
    const nn::Var r_se = nn::concat_cols({nn::gather_rows(glove_, subj_cls), nn::gather_rows(glove_, obj_cls)});
    return nn::concat_cols({r_vs, r_sp, r_se});
  }

  PredicateScores predicate_heads(const nn::Var& z) const {
    return {nn::softmax_rows(heads_[0](z)), nn::sigmoid(heads_[1](z)), nn::sigmoid(heads_[2](z))};
  }

  RelationOutput forward_relations(const VideoSample& s, const ObjectOutput& objects, std::span<const int> classes,
                                   const nn::ForwardContext& ctx) const {
    RelationOutput out;
    if (s.pairs.empty()) return out;
    out.embedding = embed_relationships(s, objects.features, classes);
    std::vector<int> frames(s.pairs.size()), sc(s.pairs.size()), oc(s.pairs.size());
    for (std::size_t k = 0; k < s.pairs.size(); ++k) {
      frames[k] = s.detections[s.pairs[k].subject].frame_index;
      sc[k] = classes[s.pairs[k].subject];
      oc[k] = classes[s.pairs[k].object];
    }
    out.spatial_context = spatial_encoder_(out.embedding, frames, ctx);
    out.groups = temporal_groups(frames, sc, oc);
    const nn::Var with_pe =
        nn::add(out.spatial_context, nn::Var::constant(nn::positional_rows(out.groups.position, cfg_.d_relation())));
    out.temporal_context = temporal_encoder_(with_pe, out.groups.group, ctx);
    out.scores = predicate_heads(out.temporal_context);
    return out;
  }

  /// Training objective with teacher forcing: ground-truth classes drive the semantic
  /// embedding and the temporal grouping (argmax where a label is unknown).
  nn::Var loss(const VideoSample& s, const nn::ForwardContext& ctx) const {
    const ObjectOutput objects = forward_objects(s, ctx);
    if (s.detections.empty()) return nn::Var::constant(nn::Tensor(1, 1));
    std::vector<int> classes = argmax_rows(objects.probs);
    std::vector<int> labels(s.detections.size());
    for (std::size_t i = 0; i < s.detections.size(); ++i) {
      labels[i] = s.detections[i].label;
      if (labels[i] >= 0) classes[i] = labels[i];
    }
    const RelationOutput rel = forward_relations(s, objects, classes, ctx);
    return total_loss(objects.logits, labels, rel.scores, s.pairs);
  }

  /// Sum of per-detection cross-entropy and per-category margin losses over all pairs.
  static nn::Var total_loss(const nn::Var& logits, const std::vector<int>& labels, const PredicateScores& scores,
                            std::span<const PairInput> pairs) {
    nn::Var total = nn::cross_entropy(logits, labels);
    if (pairs.empty()) return total;
    for (std::size_t c = 0; c < kCategories; ++c) {
      std::vector<std::vector<int>> positives(pairs.size());
      for (std::size_t k = 0; k < pairs.size(); ++k) positives[k] = pairs[k].predicates[c];
      total = nn::add(total, nn::multilabel_margin(scores.category(c), std::move(positives)));
    }
    return total;
  }

 private:
  void check_sample(const VideoSample& s) const {
    const std::size_t n = s.detections.size();
    if (s.sequence.size() != n || s.position.size() != n) throw ShapeError("sample lacks sequence assignments");
    for (const auto& d : s.detections) {
      if (d.class_dist.size() != cfg_.n_classes) throw ShapeError("class distribution width differs from n_classes");
      if (d.feature.size() != cfg_.d_feat) throw ShapeError("feature width differs from d_feat");
    }
  }

  std::size_t checked_class(int c) const {
    if (c < 0 || static_cast<std::size_t>(c) >= cfg_.n_classes) throw ShapeError("class index out of range");
    return static_cast<std::size_t>(c);
  }

  /// Per-video standardization of each box coordinate; a flat column keeps unit scale.
  static void standardize_columns(nn::Tensor& t) {
    const double n = static_cast<double>(t.rows());
    for (std::size_t j = 0; j < t.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < t.rows(); ++i) mean += t(i, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < t.rows(); ++i) var += (t(i, j) - mean) * (t(i, j) - mean);
      double sd = std::sqrt(var / n);
      if (sd < 1e-6) sd = 1.0;
      for (std::size_t i = 0; i < t.rows(); ++i) t(i, j) = (t(i, j) - mean) / sd;
    }
  }

  static nn::Tensor softmax_values(const nn::Tensor& logits) {
    nn::Tensor p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      const auto r = logits.row(i);
      const double mx = *std::max_element(r.begin(), r.end());
      double z = 0.0;
      for (std::size_t j = 0; j < r.size(); ++j) z += (p(i, j) = std::exp(r[j] - mx));
      for (std::size_t j = 0; j < r.size(); ++j) p(i, j) /= z;
    }
    return p;
  }

  ModelConfig cfg_;
  nn::ParamStore store_;
  nn::Linear box_, dist_;
  nn::Encoder object_encoder_;
  nn::Linear class_hidden_, class_out_;
  nn::Linear subject_, object_, boxes_, spatial_embed_;
  nn::Var glove_;
  nn::Encoder spatial_encoder_, temporal_encoder_;
  std::array<nn::Linear, kCategories> heads_;
};

}  // namespace dsg
