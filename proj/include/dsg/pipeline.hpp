#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsg/config.hpp"
#include "dsg/data.hpp"
#include "dsg/error.hpp"
#include "dsg/nn/adamw.hpp"
#include "dsg/nn/checkpoint.hpp"
#include "dsg/sgeval.hpp"
#include "dsg/sgmodel.hpp"
#include "dsg/synth.hpp"
#include "dsg/tracker.hpp"
#include "json.hpp"

namespace dsg {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------- grouping

struct VideoGrouping {
  std::vector<Tracklet> tracklets;  ///< empty unless a tracker ran
  std::vector<TrackSequence> sequences;
};

inline VideoGrouping group_video(const VideoView& v, const RunConfig& cfg) {
  std::vector<FrameDetections> frames;
  frames.reserve(v.frames.size());
  for (const auto* f : v.frames) frames.push_back(to_frame_detections(*f));
  VideoGrouping g;
  switch (cfg.grouping) {
    case Grouping::track:
      g.tracklets = track_video(frames, cfg.tracker);
      g.sequences = to_sequences(g.tracklets);
      break;
    case Grouping::cluster: {
      auto r = cluster_and_track(frames, cfg.nms_threshold, cfg.tracker);
      g.tracklets = std::move(r.tracklets);
      g.sequences = std::move(r.sequences);
      break;
    }
    case Grouping::label:
      g.sequences = label_grouping(frames);
      break;
    case Grouping::none:
      g.sequences = singleton_sequences(frames);
      break;
  }
  return g;
}

// ---------------------------------------------------------------- samples

/// Stand-in union feature when a record carries none: u_j = (f_s[j mod d] + f_o[j mod d]) / 2.
inline std::vector<double> default_union_feature(const Detection& s, const Detection& o, std::size_t d_union) {
  std::vector<double> u(d_union);
  const std::size_t d = s.feature.size();
  for (std::size_t j = 0; j < d_union; ++j) u[j] = 0.5 * (s.feature[j % d] + o.feature[j % d]);
  return u;
}

/// Ground-truth object behind a detection: same id (SGCls) or best IoU > 0.5 (SGDet).
inline std::optional<std::size_t> gt_for_detection(const Detection& d, const FrameGroundTruth& gt, Task task) {
  if (task == Task::sgcls) {
    for (std::size_t i = 0; i < gt.objects.size(); ++i)
      if (gt.objects[i].id == d.detection_id) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> best;
  double best_iou = 0.5;
  for (std::size_t i = 0; i < gt.objects.size(); ++i) {
    const double v = iou(d.box, gt.objects[i].box);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return best;
}

/// A video flattened for the model, with the bookkeeping to map outputs back to frames.
struct VideoBatch {
  std::string video;
  VideoSample sample;
  /// frame_rows[f] lists the sample rows of frame f; frame_pairs[f] its pair indices.
  std::vector<std::vector<std::size_t>> frame_rows;
  std::vector<std::vector<std::size_t>> frame_pairs;
  std::vector<const FrameRecord*> frames;
};

inline VideoBatch make_batch(const VideoView& v, const DatasetHeader& h, const RunConfig& cfg) {
  VideoBatch b;
  b.video = v.id;
  b.frames = v.frames;
  auto& s = b.sample;
  for (const auto* f : v.frames) {
    std::map<int, std::size_t> row_of;
    std::vector<std::optional<std::size_t>> gt_of;
    auto& rows = b.frame_rows.emplace_back();
    for (const auto& d : f->detections) {
      ModelDetection md{d.frame_index, d.detection_id, d.box, d.class_dist, d.feature, -1};
      std::optional<std::size_t> g;
      if (f->gt) {
        g = gt_for_detection(d, *f->gt, cfg.task);
        if (g) md.label = f->gt->objects[*g].label;
      }
      gt_of.push_back(g);
      row_of[d.detection_id] = s.detections.size();
      rows.push_back(s.detections.size());
      s.detections.push_back(std::move(md));
    }
    std::vector<PairRecord> pairs = f->pairs;
    if (pairs.empty()) {
      for (const auto& a : f->detections)
        for (const auto& o : f->detections)
          if (a.detection_id != o.detection_id) pairs.push_back({a.detection_id, o.detection_id, default_union_feature(a, o, h.d_union)});
    }
    auto& pair_ids = b.frame_pairs.emplace_back();
    for (auto& p : pairs) {
      PairInput in;
      in.subject = row_of.at(p.subject);
      in.object = row_of.at(p.object);
      in.union_feature = std::move(p.union_feature);
      const std::size_t first = rows.front();
      const auto gs = gt_of[in.subject - first];
      const auto go = gt_of[in.object - first];
      if (f->gt && gs && go) {
        const int sid = f->gt->objects[*gs].id;
        const int oid = f->gt->objects[*go].id;
        for (const auto& t : f->gt->triplets)
          if (t.subject == sid && t.object == oid) in.predicates[t.category].push_back(t.predicate);
        for (auto& ps : in.predicates) {
          std::sort(ps.begin(), ps.end());
          ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
        }
      }
      pair_ids.push_back(s.pairs.size());
      s.pairs.push_back(std::move(in));
    }
  }
  const auto grouping = group_video(v, cfg);
  assign_sequences(s, grouping.sequences);
  return b;
}

inline std::vector<VideoView> select_split(std::vector<VideoView> videos, std::size_t holdout, Split split) {
  if (holdout > videos.size()) throw ConfigError("train.holdout exceeds the number of videos");
  const std::size_t cut = videos.size() - holdout;
  if (split == Split::train) videos.resize(cut);
  if (split == Split::holdout) videos.erase(videos.begin(), videos.begin() + static_cast<std::ptrdiff_t>(cut));
  return videos;
}

// ---------------------------------------------------------------- inference

inline std::vector<FramePrediction> predict_video(const SceneGraphModel& model, const VideoBatch& b) {
  const auto& s = b.sample;
  std::vector<FramePrediction> out;
  const nn::ForwardContext ctx;
  ObjectOutput objects;
  RelationOutput rel;
  if (!s.detections.empty()) {
    objects = model.forward_objects(s, ctx);
    const std::vector<int> classes = argmax_rows(objects.probs);
    rel = model.forward_relations(s, objects, classes, ctx);
  }
  for (std::size_t f = 0; f < b.frames.size(); ++f) {
    FramePrediction p;
    p.video = b.video;
    p.frame_index = b.frames[f]->frame_index;
    std::map<std::size_t, std::size_t> local;
    for (std::size_t r : b.frame_rows[f]) {
      local[r] = p.objects.size();
      const auto& d = s.detections[r];
      const auto row = objects.probs.row(r);
      p.objects.push_back({d.detection_id, d.box, std::vector<double>(row.begin(), row.end())});
    }
    for (std::size_t k : b.frame_pairs[f]) {
      PredictedPair pp{local.at(s.pairs[k].subject), local.at(s.pairs[k].object), {}};
      for (std::size_t c = 0; c < kCategories; ++c) {
        const auto row = rel.scores.category(c).value().row(k);
        pp.scores[c].assign(row.begin(), row.end());
      }
      p.pairs.push_back(std::move(pp));
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Perfect predictions read straight off the ground truth: one-hot classes, one-hot scores.
inline std::vector<FramePrediction> oracle_predictions(const Dataset& d) {
  std::vector<FramePrediction> out;
  for (const auto& f : d.frames) {
    FramePrediction p;
    p.video = f.video_id;
    p.frame_index = f.frame_index;
    if (!f.gt) throw InputError("frame without ground truth");
    std::map<int, std::size_t> local;
    for (const auto& o : f.gt->objects) {
      std::vector<double> dist(d.header.n_classes, 0.0);
      dist[static_cast<std::size_t>(o.label)] = 1.0;
      local[o.id] = p.objects.size();
      p.objects.push_back({o.id, o.box, std::move(dist)});
    }
    std::map<std::pair<int, int>, std::size_t> pair_of;
    for (const auto& t : f.gt->triplets) {
      const auto [it, inserted] = pair_of.try_emplace({t.subject, t.object}, p.pairs.size());
      if (inserted) {
        PredictedPair pp{local.at(t.subject), local.at(t.object), {}};
        for (std::size_t c = 0; c < kCategories; ++c) pp.scores[c].assign(d.header.arities[c], 0.0);
        p.pairs.push_back(std::move(pp));
      }
      p.pairs[it->second].scores[t.category][static_cast<std::size_t>(t.predicate)] = 1.0;
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline MetricsReport evaluate_predictions(const std::vector<FramePrediction>& preds, const Dataset& d,
                                          const std::vector<VideoView>& videos, const RunConfig& cfg) {
  std::map<std::pair<std::string, int>, const FrameRecord*> truth;
  for (const auto& v : videos)
    for (const auto* f : v.frames) truth[{f->video_id, f->frame_index}] = f;
  Evaluator ev(cfg.task, cfg.ks, cfg.modes, d.header.arities);
  std::size_t used = 0;
  for (const auto& p : preds) {
    const auto it = truth.find({p.video, p.frame_index});
    if (it == truth.end()) continue;
    if (!it->second->gt) throw InputError("frame " + p.video + "/" + std::to_string(p.frame_index) + " lacks ground truth");
    ev.add(p, *it->second->gt);
    ++used;
  }
  if (used != truth.size()) throw InputError("predictions do not cover every evaluated frame");
  return ev.report();
}

// ---------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> object_accuracy;
  std::optional<double> recall;  ///< with-constraint recall at the smallest K
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  bool stopped_early = false;
};

inline MetricsReport evaluate_model(const SceneGraphModel& model, const std::vector<VideoBatch>& batches,
                                    const Dataset& d, const std::vector<VideoView>& videos, const RunConfig& cfg) {
  std::vector<FramePrediction> preds;
  for (const auto& b : batches) {
    auto p = predict_video(model, b);
    preds.insert(preds.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return evaluate_predictions(preds, d, videos, cfg);
}

/// One video per optimizer step; videos visited in a seeded shuffle each epoch.
inline TrainResult train_model(SceneGraphModel& model, const std::vector<VideoBatch>& batches, const Dataset& d,
                               const std::vector<VideoView>& videos, const RunConfig& cfg,
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  TrainResult result;
  nn::AdamW opt(cfg.train.adamw);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(batches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RunConfig eval_cfg = cfg;
  eval_cfg.modes = {Constraint::with};
  const std::size_t k = *std::min_element(cfg.ks.begin(), cfg.ks.end());
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t i : order) {
      model.params().zero_grad();
      const nn::ForwardContext ctx{true, &rng, nullptr};
      const nn::Var loss = model.loss(batches[i].sample, ctx);
      const double l = loss.value()[0];
      if (!std::isfinite(l)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " on video " + batches[i].video +
                            " (step " + std::to_string(opt.step_count() + 1) + ", lr " + format_double(cfg.train.adamw.lr) + ")");
      }
      nn::backward(loss);
      opt.step(model.params().all());
      total += l;
    }
    EpochRecord rec{epoch, batches.empty() ? 0.0 : total / static_cast<double>(batches.size()), {}, {}};
    if (cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0) {
      const auto r = evaluate_model(model, batches, d, videos, eval_cfg);
      rec.object_accuracy = r.object_accuracy;
      rec.recall = r.recall.at(Constraint::with).at(k);
    }
    result.curve.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.object_accuracy && (cfg.train.stop_accuracy > 0.0 || cfg.train.stop_recall > 0.0) &&
        *rec.object_accuracy >= cfg.train.stop_accuracy && *rec.recall >= cfg.train.stop_recall) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

inline std::string loss_curve_tsv(const TrainResult& r) {
  std::string out = "epoch\tloss\tobject_accuracy\trecall\n";
  char buf[160];
  for (const auto& e : r.curve) {
    std::snprintf(buf, sizeof buf, "%zu\t%.10g\t", e.epoch, e.loss);
    out += buf;
    out += e.object_accuracy ? format_double(*e.object_accuracy) : "";
    out += '\t';
    out += e.recall ? format_double(*e.recall) : "";
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- reports

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "dsg-metrics") throw InputError("not a dsg-metrics file");
  MetricsReport r;
  r.task = parse_task(j.at("task").get<std::string>());
  r.frames = j.at("frames").get<std::size_t>();
  r.frames_with_triplets = j.at("frames_with_triplets").get<std::size_t>();
  r.objects = j.at("objects").get<std::size_t>();
  r.object_accuracy = j.at("object_accuracy").get<double>();
  std::set<std::size_t> ks;
  for (const auto& [mode, mj] : j.at("constraint").items()) {
    const Constraint m = mode == "with" ? Constraint::with : Constraint::none;
    r.modes.push_back(m);
    for (const auto& [key, v] : mj.at("recall").items()) {
      const std::size_t k = std::stoul(key.substr(2));
      ks.insert(k);
      r.recall[m][k] = v.get<double>();
      r.mean_recall[m][k] = mj.at("mean_recall").at("mR@" + std::to_string(k)).get<double>();
      for (const auto& [cls, cv] : mj.at("class_recall").at(key).items()) r.class_recall[m][k][std::stoul(cls)] = cv.get<double>();
    }
  }
  std::sort(r.modes.begin(), r.modes.end());
  r.ks.assign(ks.begin(), ks.end());
  return r;
}

// ---------------------------------------------------------------- commands

struct Artifact {
  std::string name;
  std::filesystem::path path;
};

class Run {
 public:
  explicit Run(RunConfig cfg, std::ostream* log = nullptr) : cfg_(std::move(cfg)), log_(log) {}

  const RunConfig& config() const noexcept { return cfg_; }

  int execute(const std::string& command) {
    if (command == "synth") synth();
    else if (command == "track") track();
    else if (command == "train") train();
    else if (command == "eval") eval();
    else if (command == "report") report();
    else throw ConfigError("unknown command '" + command + "'");
    write_manifest(command);
    return 0;
  }

  const std::vector<Artifact>& outputs() const noexcept { return outputs_; }
  const std::optional<TrainResult>& train_result() const noexcept { return train_result_; }
  const std::optional<MetricsReport>& metrics() const noexcept { return metrics_; }

 private:
  void synth() {
    const Dataset d = synth_generate(cfg_.synth);
    emit("dataset", cfg_.data_path(), emit_dataset(d));
    say("synth: " + std::to_string(group_videos(d).size()) + " videos, " + std::to_string(d.frames.size()) + " frames");
  }

  void track() {
    const Dataset d = load_data();
    nlohmann::json h{{"format", kTrackletsFormat}, {"version", kFormatVersion}, {"grouping", to_string(cfg_.grouping)}};
    std::string text = h.dump() + '\n';
    std::size_t count = 0;
    for (const auto& v : group_videos(d)) {
      const auto g = group_video(v, cfg_);
      for (const auto& s : g.sequences) {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& e : s.entries) entries.push_back({e.ref.frame_index, e.ref.detection_id, e.position, e.representative});
        nlohmann::json rec{{"video", v.id}, {"id", s.id}, {"label", s.label}, {"entries", std::move(entries)}};
        for (const auto& t : g.tracklets) {
          if (t.id() != s.id) continue;
          rec["tracklet"] = tracklet_record(v.id, t);
          rec["tracklet"].erase("video");
        }
        text += rec.dump() + '\n';
        ++count;
      }
    }
    emit("tracklets", cfg_.out / "tracklets.jsonl", text);
    say("track: " + std::to_string(count) + " sequences (" + to_string(cfg_.grouping) + ")");
  }

  void train() {
    const Dataset d = load_data();
    const auto videos = select_split(group_videos(d), cfg_.train.holdout, Split::train);
    std::vector<VideoBatch> batches;
    for (const auto& v : videos) batches.push_back(make_batch(v, d.header, cfg_));
    SceneGraphModel model(cfg_.model_for(d.header), cfg_.seed);
    train_result_ = train_model(model, batches, d, videos, cfg_, [&](const EpochRecord& e) {
      if (!log_ || (e.epoch % 10 != 0 && !e.object_accuracy)) return;
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %zu  loss %.6f", e.epoch, e.loss);
      std::string line = buf;
      if (e.object_accuracy) {
        std::snprintf(buf, sizeof buf, "  object accuracy %.4f  R@%zu(with) %.4f", *e.object_accuracy,
                      *std::min_element(cfg_.ks.begin(), cfg_.ks.end()), *e.recall);
        line += buf;
      }
      say(line);
    });
    std::ostringstream ck;
    nn::write_checkpoint(ck, model.params());
    emit("checkpoint", cfg_.checkpoint_path(), ck.str());
    emit("loss_curve", cfg_.out / "loss.tsv", loss_curve_tsv(*train_result_));
    say("train: " + std::to_string(train_result_->curve.size()) + " epochs" +
        (train_result_->stopped_early ? " (targets reached)" : ""));
  }

  void eval() {
    const Dataset d = load_data();
    const auto videos = select_split(group_videos(d), cfg_.train.holdout, cfg_.split);
    std::vector<FramePrediction> preds;
    if (!cfg_.predictions.empty()) {
      const PredictionSet ps = parse_predictions(read_file(cfg_.predictions));
      inputs_.push_back({"predictions", cfg_.predictions});
      if (ps.header.n_classes != d.header.n_classes || ps.header.arities != d.header.arities) {
        throw ValidationError("prediction file does not match the dataset's classes or arities");
      }
      if (ps.task != cfg_.task) throw ConfigError("prediction file was produced for another task");
      preds = ps.frames;
    } else {
      SceneGraphModel model(cfg_.model_for(d.header), cfg_.seed);
      if (!std::filesystem::exists(cfg_.checkpoint_path())) {
        throw InputError("no checkpoint at " + cfg_.checkpoint_path().string() + " (run train first or set predictions)");
      }
      nn::load_checkpoint(cfg_.checkpoint_path(), model.params());
      inputs_.push_back({"checkpoint", cfg_.checkpoint_path()});
      for (const auto& v : videos) {
        auto p = predict_video(model, make_batch(v, d.header, cfg_));
        preds.insert(preds.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
      }
      emit("predictions", cfg_.out / "predictions.jsonl", emit_predictions({cfg_.task, d.header, preds}));
    }
    metrics_ = evaluate_predictions(preds, d, videos, cfg_);
    emit("metrics", cfg_.out / "metrics.json", metrics_->to_json().dump(2) + '\n');
    say(metrics_->table());
  }

  void report() {
    const auto path = cfg_.out / "metrics.json";
    if (!std::filesystem::exists(path)) throw InputError("no metrics at " + path.string() + " (run eval first)");
    inputs_.push_back({"metrics", path});
    metrics_ = metrics_from_json(nlohmann::json::parse(read_file(path)));
    std::string text = metrics_->table();
    text += "\nper-predicate recall (with constraint, K=" + std::to_string(metrics_->ks.back()) + ")\n";
    if (metrics_->class_recall.count(Constraint::with)) {
      char buf[64];
      for (const auto& [cls, v] : metrics_->class_recall.at(Constraint::with).at(metrics_->ks.back())) {
        std::snprintf(buf, sizeof buf, "  predicate %-4zu %8.4f\n", cls, v);
        text += buf;
      }
    }
    emit("report", cfg_.out / "report.txt", text);
    say(text);
  }

  Dataset load_data() {
    if (!std::filesystem::exists(cfg_.data_path())) {
      throw InputError("no dataset at " + cfg_.data_path().string() + " (run synth first or set data)");
    }
    inputs_.push_back({"dataset", cfg_.data_path()});
    return ingest(cfg_.data_path());
  }

  void emit(const std::string& name, const std::filesystem::path& path, const std::string& contents) {
    write_atomic(path, contents);
    outputs_.push_back({name, path});
  }

  void say(const std::string& s) const {
    if (log_) *log_ << s << (s.empty() || s.back() != '\n' ? "\n" : "");
  }

  void write_manifest(const std::string& command) {
    auto files = [](const std::vector<Artifact>& list) {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& a : list) j[a.name] = {{"path", a.path.string()}, {"fnv1a", hex64(fnv1a(read_file(a.path)))}};
      return j;
    };
    nlohmann::json m;
    m["format"] = "dsg-manifest";
    m["version"] = kFormatVersion;
    m["command"] = command;
    m["config_hash"] = hex64(cfg_.hash());
    m["seed"] = cfg_.seed;
    m["config"] = cfg_.to_kv();
    m["inputs"] = files(inputs_);
    m["outputs"] = files(outputs_);
    m["versions"] = {{"dsg", kVersion},        {"frames", kFormatVersion},     {"predictions", kFormatVersion},
                     {"metrics", 1},           {"checkpoint", nn::kCheckpointVersion}};
    if (train_result_) {
      m["summary"] = {{"epochs", train_result_->curve.size()},
                      {"final_loss", train_result_->curve.empty() ? 0.0 : train_result_->curve.back().loss},
                      {"stopped_early", train_result_->stopped_early}};
    }
    const auto path = cfg_.out / (command + ".manifest.json");
    write_atomic(path, m.dump(2) + '\n');
    outputs_.push_back({"manifest", path});
  }

  RunConfig cfg_;
  std::ostream* log_;
  std::vector<Artifact> inputs_;
  std::vector<Artifact> outputs_;
  std::optional<TrainResult> train_result_;
  std::optional<MetricsReport> metrics_;
};

/// Re-creates the RunConfig recorded in a manifest.
inline RunConfig config_from_manifest(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_file(path));
  if (j.value("format", std::string()) != "dsg-manifest") throw InputError("not a dsg-manifest file");
  return make_run_config(j.at("config").get<KeyValues>());
}

}  // namespace dsg
