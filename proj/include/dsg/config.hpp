#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsg/data.hpp"
#include "dsg/error.hpp"
#include "dsg/nn/adamw.hpp"
#include "dsg/sgeval.hpp"
#include "dsg/sgmodel.hpp"
#include "dsg/synth.hpp"
#include "dsg/tracker.hpp"

namespace dsg {

/// Ordered key -> value settings; later assignments win.
using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

/// `key = value` per line; `#` starts a comment.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(n, "expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(n, "empty key");
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

enum class Grouping { track, cluster, label, none };

inline const char* to_string(Grouping g) {
  switch (g) {
    case Grouping::track: return "track";
    case Grouping::cluster: return "cluster";
    case Grouping::label: return "label";
    case Grouping::none: return "none";
  }
  return "?";
}

struct TrainConfig {
  std::size_t epochs = 500;
  nn::AdamWConfig adamw;
  /// Last N videos are held out of training.
  std::size_t holdout = 0;
  /// Evaluate on the training split every N epochs (0 = never); stops early once both targets hold.
  std::size_t eval_every = 0;
  double stop_accuracy = 0.0;
  double stop_recall = 0.0;
};

enum class Split { all, train, holdout };

struct RunConfig {
  Task task = Task::sgcls;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::filesystem::path predictions;

  SynthConfig synth;
  Grouping grouping = Grouping::track;
  TrackerConfig tracker;
  double nms_threshold = 0.5;

  bool paper_scale = false;
  ModelConfig model;
  TrainConfig train;

  std::vector<std::size_t> ks{10, 20, 50};
  std::vector<Constraint> modes{Constraint::with, Constraint::none};
  Split split = Split::all;

  std::filesystem::path data_path() const { return data.empty() ? out / "dataset.jsonl" : data; }
  std::filesystem::path checkpoint_path() const { return checkpoint.empty() ? out / "model.ckpt" : checkpoint; }

  /// Model dims follow the dataset; widths follow the scale and overrides.
  ModelConfig model_for(const DatasetHeader& h) const {
    ModelConfig m = model;
    m.n_classes = h.n_classes;
    m.arities = h.arities;
    m.d_feat = h.d_feat;
    m.d_union = h.d_union;
    m.validate();
    return m;
  }

  KeyValues to_kv() const;
  std::uint64_t hash() const;
};

namespace detail {

class KvReader {
 public:
  explicit KvReader(const KeyValues& kv) : kv_(kv) {}

  bool has(const std::string& k) const { return kv_.count(k) > 0; }

  std::string str(const std::string& k, std::string def) {
    used_.insert(k);
    const auto it = kv_.find(k);
    return it == kv_.end() ? def : it->second;
  }

  double real(const std::string& k, double def) {
    const std::string s = str(k, "");
    if (s.empty()) return def;
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(k + ": not a number: '" + s + "'");
    return v;
  }

  std::uint64_t count(const std::string& k, std::uint64_t def) {
    const std::string s = str(k, "");
    if (s.empty()) return def;
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(k + ": not a non-negative integer: '" + s + "'");
    return v;
  }

  bool flag(const std::string& k, bool def) {
    const std::string s = str(k, "");
    if (s.empty()) return def;
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(k + ": expected true or false");
  }

  std::vector<std::size_t> list(const std::string& k, std::vector<std::size_t> def) {
    const std::string s = str(k, "");
    if (s.empty()) return def;
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string t = trim(item);
      std::size_t v = 0;
      const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
      if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) throw ConfigError(k + ": bad list entry '" + t + "'");
      out.push_back(v);
    }
    return out;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

 private:
  const KeyValues& kv_;
  std::set<std::string> used_;
};

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

inline std::vector<Constraint> parse_constraint(const std::string& s) {
  if (s == "with") return {Constraint::with};
  if (s == "none") return {Constraint::none};
  if (s == "both") return {Constraint::with, Constraint::none};
  throw ConfigError("constraint must be with, none or both (got '" + s + "')");
}

/// Builds a validated RunConfig; unknown keys are errors. Task-dependent defaults
/// (grouping, tracker cost weights, detector-style synthesis) apply unless set explicitly.
inline RunConfig make_run_config(const KeyValues& kv) {
  detail::KvReader r(kv);
  RunConfig c;
  c.task = parse_task(r.str("task", "sgcls"));
  const bool det = c.task == Task::sgdet;
  c.seed = r.count("seed", 0);
  c.out = r.str("out", "out");
  c.data = r.str("data", "");
  c.checkpoint = r.str("checkpoint", "");
  c.predictions = r.str("predictions", "");

  auto& s = c.synth;
  s.seed = c.seed;
  s.n_videos = r.count("synth.videos", s.n_videos);
  s.frames_per_video = r.count("synth.frames", s.frames_per_video);
  s.n_classes = r.count("synth.classes", s.n_classes);
  const auto ar = r.list("synth.arities", {s.arities.begin(), s.arities.end()});
  if (ar.size() != kCategories) throw ConfigError("synth.arities needs three entries (attention, spatial, contact)");
  std::copy(ar.begin(), ar.end(), s.arities.begin());
  s.objects_per_scene = r.count("synth.objects", s.objects_per_scene);
  s.smoothness = r.real("synth.smoothness", s.smoothness);
  s.corruption = r.real("synth.corruption", s.corruption);
  s.class_noise = r.real("synth.class_noise", s.class_noise);
  s.feature_noise = r.real("synth.feature_noise", s.feature_noise);
  s.class_signal = r.real("synth.class_signal", s.class_signal);
  s.union_noise = r.real("synth.union_noise", s.union_noise);
  s.occlusion_rate = r.real("synth.occlusion_rate", s.occlusion_rate);
  s.max_gap = r.count("synth.max_gap", s.max_gap);
  s.predicate_switch = r.real("synth.predicate_switch", s.predicate_switch);
  s.d_feat = r.count("synth.d_feat", s.d_feat);
  s.d_union = r.count("synth.d_union", s.d_union);
  s.detector = r.flag("synth.detector", det);
  s.duplicate_rate = r.real("synth.duplicate_rate", s.duplicate_rate);
  s.box_jitter = r.real("synth.box_jitter", s.box_jitter);
  s.fps = r.real("synth.fps", s.fps);
  s.validate();

  const std::string g = r.str("tracker.grouping", det ? "cluster" : "track");
  if (g == "track") c.grouping = Grouping::track;
  else if (g == "cluster") c.grouping = Grouping::cluster;
  else if (g == "label") c.grouping = Grouping::label;
  else if (g == "none") c.grouping = Grouping::none;
  else throw ConfigError("tracker.grouping must be track, cluster, label or none");
  c.tracker.m = static_cast<int>(r.count("tracker.m", 50));
  c.tracker.weights.lambda_feat = r.real("tracker.lambda_feat", det ? 0.0 : 2.0);
  c.tracker.weights.box.lambda_iou = r.real("tracker.lambda_iou", det ? 0.0 : 1.0);
  c.tracker.weights.box.lambda_l1 = r.real("tracker.lambda_l1", det ? 0.0 : 2.0);
  c.tracker.weights.tau = r.real("tracker.tau", 0.5);
  c.tracker.validate();
  c.nms_threshold = r.real("tracker.nms", 0.5);
  if (!(c.nms_threshold >= 0.0 && c.nms_threshold <= 1.0)) throw ConfigError("tracker.nms must lie in [0, 1]");

  const std::string scale = r.str("model.scale", "toy");
  if (scale != "toy" && scale != "paper") throw ConfigError("model.scale must be toy or paper");
  c.paper_scale = scale == "paper";
  auto& m = c.model;
  m = c.paper_scale ? ModelConfig::paper() : ModelConfig::toy();
  m.w_box = r.count("model.w_box", m.w_box);
  m.w_dist = r.count("model.w_dist", m.w_dist);
  m.obj_heads = r.count("model.obj_heads", m.obj_heads);
  m.obj_ffn = r.count("model.obj_ffn", m.obj_ffn);
  m.obj_layers = r.count("model.obj_layers", m.obj_layers);
  m.class_hidden = r.count("model.class_hidden", m.class_hidden);
  m.w_vis = r.count("model.w_vis", m.w_vis);
  m.w_sp = r.count("model.w_sp", m.w_sp);
  m.w_sem = r.count("model.w_sem", m.w_sem);
  m.rel_heads = r.count("model.rel_heads", m.rel_heads);
  m.rel_ffn = r.count("model.rel_ffn", m.rel_ffn);
  m.spatial_layers = r.count("model.spatial_layers", m.spatial_layers);
  m.temporal_layers = r.count("model.temporal_layers", m.temporal_layers);
  m.dropout = r.real("model.dropout", m.dropout);
  if (!(m.dropout >= 0.0 && m.dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");

  auto& t = c.train;
  t.epochs = r.count("train.epochs", t.epochs);
  t.adamw.lr = r.real("train.lr", c.paper_scale ? 1e-5 : 1e-3);
  t.adamw.weight_decay = r.real("train.weight_decay", t.adamw.weight_decay);
  t.adamw.validate();
  t.holdout = r.count("train.holdout", 0);
  t.eval_every = r.count("train.eval_every", 0);
  t.stop_accuracy = r.real("train.stop_accuracy", 0.0);
  t.stop_recall = r.real("train.stop_recall", 0.0);

  c.ks = r.list("eval.k", c.ks);
  if (c.ks.empty()) throw ConfigError("eval.k must list at least one K");
  for (auto k : c.ks)
    if (k == 0) throw ConfigError("eval.k entries must be positive");
  c.modes = parse_constraint(r.str("eval.constraint", "both"));
  const std::string split = r.str("eval.split", "all");
  if (split == "all") c.split = Split::all;
  else if (split == "train") c.split = Split::train;
  else if (split == "holdout") c.split = Split::holdout;
  else throw ConfigError("eval.split must be all, train or holdout");

  r.reject_unknown();
  return c;
}

/// Every effective setting, including resolved defaults.
inline KeyValues RunConfig::to_kv() const {
  KeyValues kv;
  auto num = [](double v) { return format_double(v); };
  kv["task"] = to_string(task);
  kv["seed"] = std::to_string(seed);
  kv["out"] = out.string();
  kv["data"] = data.string();
  kv["checkpoint"] = checkpoint.string();
  kv["predictions"] = predictions.string();
  kv["synth.videos"] = std::to_string(synth.n_videos);
  kv["synth.frames"] = std::to_string(synth.frames_per_video);
  kv["synth.classes"] = std::to_string(synth.n_classes);
  kv["synth.arities"] = detail::join({synth.arities.begin(), synth.arities.end()});
  kv["synth.objects"] = std::to_string(synth.objects_per_scene);
  kv["synth.smoothness"] = num(synth.smoothness);
  kv["synth.corruption"] = num(synth.corruption);
  kv["synth.class_noise"] = num(synth.class_noise);
  kv["synth.feature_noise"] = num(synth.feature_noise);
  kv["synth.class_signal"] = num(synth.class_signal);
  kv["synth.union_noise"] = num(synth.union_noise);
  kv["synth.occlusion_rate"] = num(synth.occlusion_rate);
  kv["synth.max_gap"] = std::to_string(synth.max_gap);
  kv["synth.predicate_switch"] = num(synth.predicate_switch);
  kv["synth.d_feat"] = std::to_string(synth.d_feat);
  kv["synth.d_union"] = std::to_string(synth.d_union);
  kv["synth.detector"] = synth.detector ? "true" : "false";
  kv["synth.duplicate_rate"] = num(synth.duplicate_rate);
  kv["synth.box_jitter"] = num(synth.box_jitter);
  kv["synth.fps"] = num(synth.fps);
  kv["tracker.grouping"] = to_string(grouping);
  kv["tracker.m"] = std::to_string(tracker.m);
  kv["tracker.lambda_feat"] = num(tracker.weights.lambda_feat);
  kv["tracker.lambda_iou"] = num(tracker.weights.box.lambda_iou);
  kv["tracker.lambda_l1"] = num(tracker.weights.box.lambda_l1);
  kv["tracker.tau"] = num(tracker.weights.tau);
  kv["tracker.nms"] = num(nms_threshold);
  kv["model.scale"] = paper_scale ? "paper" : "toy";
  kv["model.w_box"] = std::to_string(model.w_box);
  kv["model.w_dist"] = std::to_string(model.w_dist);
  kv["model.obj_heads"] = std::to_string(model.obj_heads);
  kv["model.obj_ffn"] = std::to_string(model.obj_ffn);
  kv["model.obj_layers"] = std::to_string(model.obj_layers);
  kv["model.class_hidden"] = std::to_string(model.class_hidden);
  kv["model.w_vis"] = std::to_string(model.w_vis);
  kv["model.w_sp"] = std::to_string(model.w_sp);
  kv["model.w_sem"] = std::to_string(model.w_sem);
  kv["model.rel_heads"] = std::to_string(model.rel_heads);
  kv["model.rel_ffn"] = std::to_string(model.rel_ffn);
  kv["model.spatial_layers"] = std::to_string(model.spatial_layers);
  kv["model.temporal_layers"] = std::to_string(model.temporal_layers);
  kv["model.dropout"] = num(model.dropout);
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.lr"] = num(train.adamw.lr);
  kv["train.weight_decay"] = num(train.adamw.weight_decay);
  kv["train.holdout"] = std::to_string(train.holdout);
  kv["train.eval_every"] = std::to_string(train.eval_every);
  kv["train.stop_accuracy"] = num(train.stop_accuracy);
  kv["train.stop_recall"] = num(train.stop_recall);
  kv["eval.k"] = detail::join(ks);
  kv["eval.constraint"] = modes.size() == 2 ? "both" : to_string(modes.front());
  kv["eval.split"] = split == Split::all ? "all" : split == Split::train ? "train" : "holdout";
  return kv;
}

inline std::string canonical_text(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

inline std::uint64_t RunConfig::hash() const { return fnv1a(canonical_text(to_kv())); }

inline RunConfig load_run_config(const std::filesystem::path& path, const KeyValues& overrides = {}) {
  KeyValues kv = path.empty() ? KeyValues{} : parse_key_values(read_file(path));
  for (const auto& [k, v] : overrides) kv[k] = v;
  return make_run_config(kv);
}

}  // namespace dsg
