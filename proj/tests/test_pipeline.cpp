#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dsg/config.hpp"
#include "dsg/data.hpp"
#include "dsg/pipeline.hpp"
#include "dsg/synth.hpp"
#include "oracles.hpp"

namespace {

namespace fs = std::filesystem;
using dsg::KeyValues;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dsg_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

dsg::SynthConfig small_synth(std::uint64_t seed = 3) {
  dsg::SynthConfig c;
  c.n_videos = 3;
  c.frames_per_video = 6;
  c.d_feat = 12;
  c.d_union = 8;
  c.seed = seed;
  return c;
}

KeyValues small_run(const fs::path& out) {
  return {{"out", out.string()},         {"synth.videos", "3"},       {"synth.frames", "6"},
          {"synth.d_feat", "12"},        {"synth.d_union", "8"},      {"model.w_box", "4"},
          {"model.w_dist", "4"},         {"model.obj_heads", "2"},    {"model.obj_ffn", "8"},
          {"model.obj_layers", "1"},     {"model.class_hidden", "8"}, {"model.w_vis", "4"},
          {"model.w_sp", "4"},           {"model.w_sem", "2"},        {"model.rel_heads", "2"},
          {"model.rel_ffn", "8"},        {"model.temporal_layers", "1"}};
}

// ---------------------------------------------------------------- config

TEST(Config, ParsesCommentsAndWhitespace) {
  const auto kv = dsg::parse_key_values("# header\n task = sgdet  # trailing\n\nseed=7\n");
  EXPECT_EQ(kv.at("task"), "sgdet");
  EXPECT_EQ(kv.at("seed"), "7");
  EXPECT_EQ(kv.size(), 2u);
}

TEST(Config, MalformedLineReportsLineNumber) {
  try {
    dsg::parse_key_values("seed = 1\n\nnot a pair\n");
    FAIL() << "expected ParseError";
  } catch (const dsg::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Config, UnknownKeyAndBadValuesAreRejected) {
  EXPECT_THROW(dsg::make_run_config({{"no.such.key", "1"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"seed", "-3"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"tracker.lambda_feat", "-1"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"synth.arities", "3,0,4"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"synth.arities", "3,4"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"synth.corruption", "1"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"eval.k", "10,0"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"eval.constraint", "some"}}), dsg::ConfigError);
  EXPECT_THROW(dsg::make_run_config({{"task", "predcls"}}), dsg::ConfigError);
}

TEST(Config, TaskSelectsTrackerDefaults) {
  const auto cls = dsg::make_run_config({});
  EXPECT_EQ(cls.grouping, dsg::Grouping::track);
  EXPECT_EQ(cls.tracker.m, 50);
  EXPECT_EQ(cls.tracker.weights.lambda_feat, 2.0);
  EXPECT_EQ(cls.tracker.weights.box.lambda_iou, 1.0);
  EXPECT_EQ(cls.tracker.weights.box.lambda_l1, 2.0);
  EXPECT_EQ(cls.tracker.weights.tau, 0.5);
  EXPECT_FALSE(cls.synth.detector);

  const auto det = dsg::make_run_config({{"task", "sgdet"}});
  EXPECT_EQ(det.grouping, dsg::Grouping::cluster);
  EXPECT_EQ(det.tracker.weights.lambda_feat, 0.0);
  EXPECT_EQ(det.tracker.weights.box.lambda_iou, 0.0);
  EXPECT_EQ(det.tracker.weights.box.lambda_l1, 0.0);
  EXPECT_TRUE(det.synth.detector);
  EXPECT_EQ(det.nms_threshold, 0.5);
}

TEST(Config, ScaleSelectsLearningRate) {
  EXPECT_EQ(dsg::make_run_config({}).train.adamw.lr, 1e-3);
  const auto paper = dsg::make_run_config({{"model.scale", "paper"}});
  EXPECT_EQ(paper.train.adamw.lr, 1e-5);
  EXPECT_EQ(paper.model.d_object(), 2376u);
  EXPECT_EQ(paper.model.d_relation(), 1936u);
}

TEST(Config, EffectiveSettingsRoundTrip) {
  const auto a = dsg::make_run_config({{"task", "sgdet"}, {"seed", "11"}, {"synth.corruption", "0.25"}, {"eval.k", "5,10"}});
  const auto b = dsg::make_run_config(a.to_kv());
  EXPECT_EQ(a.to_kv(), b.to_kv());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), dsg::make_run_config({}).hash());
  EXPECT_EQ(a.to_kv().at("synth.corruption"), "0.25");
}

// ---------------------------------------------------------------- ingest

TEST(Ingest, RoundTripIsIdentity) {
  auto cfg = small_synth();
  cfg.detector = true;
  const auto d = dsg::synth_generate(cfg);
  const std::string text = dsg::emit_dataset(d);
  const auto back = dsg::parse_dataset(text);
  EXPECT_EQ(dsg::emit_dataset(back), text);
  ASSERT_EQ(back.frames.size(), d.frames.size());
  EXPECT_EQ(back.header, d.header);
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    const auto& a = d.frames[i];
    const auto& b = back.frames[i];
    ASSERT_EQ(a.detections.size(), b.detections.size());
    for (std::size_t k = 0; k < a.detections.size(); ++k) {
      EXPECT_EQ(a.detections[k].box, b.detections[k].box);
      EXPECT_EQ(a.detections[k].class_dist, b.detections[k].class_dist);
      EXPECT_EQ(a.detections[k].feature, b.detections[k].feature);
    }
    EXPECT_EQ(a.pairs, b.pairs);
    EXPECT_EQ(a.gt->triplets, b.gt->triplets);
  }
}

std::string one_frame(const std::string& dist) {
  return R"({"format":"dsg-frames","version":1,"n_classes":2,"d_feat":1,"d_union":1,"arities":[1,1,1]})"
         "\n"
         R"({"video":"a","frame":0,"detections":[{"id":0,"box":[0.5,0.5,0.1,0.1],"class_dist":)" +
         dist + R"(,"feature":[1.0]}]})" + "\n";
}

TEST(Ingest, NearUnitDistributionIsRenormalized) {
  const auto d = dsg::parse_dataset(one_frame("[0.50001, 0.5]"));
  const auto& p = d.frames[0].detections[0].class_dist;
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-15);
  EXPECT_NEAR(p[0], 0.50001 / 1.00001, 1e-15);
}

TEST(Ingest, FarFromUnitDistributionIsRejected) {
  EXPECT_THROW(dsg::parse_dataset(one_frame("[0.25, 0.25]")), dsg::ValidationError);
  EXPECT_THROW(dsg::parse_dataset(one_frame("[1.5, -0.5]")), dsg::ValidationError);
  EXPECT_THROW(dsg::parse_dataset(one_frame("[1.0]")), dsg::ValidationError);
}

TEST(Ingest, MalformedRecordReportsLineNumber) {
  std::string text = one_frame("[0.5, 0.5]");
  text += "{\"video\": \"a\", \"frame\": 1, \"detections\": [\n";
  try {
    dsg::parse_dataset(text);
    FAIL() << "expected ParseError";
  } catch (const dsg::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  try {
    dsg::parse_dataset(one_frame("[0.5, 0.5]") + R"({"video":"a","frame":1})" + "\n");
    FAIL() << "expected ParseError";
  } catch (const dsg::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(dsg::parse_dataset(""), dsg::ParseError);
  EXPECT_THROW(dsg::parse_dataset(R"({"format":"dsg-predictions","version":1})"), dsg::ParseError);
}

TEST(Ingest, InvariantViolationsAreRejected) {
  const std::string head = one_frame("[0.5, 0.5]");
  auto bad = [&](const std::string& line) { return head + line + "\n"; };
  // frame order
  EXPECT_THROW(dsg::parse_dataset(bad(R"({"video":"a","frame":0,"detections":[]})")), dsg::ValidationError);
  // duplicate detection id
  EXPECT_THROW(dsg::parse_dataset(bad(
                   R"({"video":"b","frame":0,"detections":[{"id":1,"box":[0,0,1,1],"class_dist":[1,0],"feature":[0]},)"
                   R"({"id":1,"box":[0,0,1,1],"class_dist":[1,0],"feature":[0]}]})")),
               dsg::ValidationError);
  // triplet on a missing box
  EXPECT_THROW(dsg::parse_dataset(bad(
                   R"({"video":"b","frame":0,"detections":[],"gt":{"objects":[{"id":0,"box":[0,0,1,1],"label":1}],)"
                   R"("triplets":[{"subject":0,"object":4,"category":0,"predicate":0}]}})")),
               dsg::ValidationError);
  // predicate beyond arity
  EXPECT_THROW(dsg::parse_dataset(bad(
                   R"({"video":"b","frame":0,"detections":[],"gt":{"objects":[{"id":0,"box":[0,0,1,1],"label":1},)"
                   R"({"id":1,"box":[0,0,1,1],"label":0}],"triplets":[{"subject":0,"object":1,"category":2,"predicate":1}]}})")),
               dsg::ValidationError);
  // pair on an unknown detection
  EXPECT_THROW(dsg::parse_dataset(bad(
                   R"({"video":"b","frame":0,"detections":[{"id":1,"box":[0,0,1,1],"class_dist":[1,0],"feature":[0]}],)"
                   R"("pairs":[{"subject":1,"object":2,"union":[0]}]})")),
               dsg::ValidationError);
}

TEST(Predictions, RoundTrip) {
  const auto d = dsg::synth_generate(small_synth());
  dsg::PredictionSet ps{dsg::Task::sgcls, d.header, dsg::oracle_predictions(d)};
  const std::string text = dsg::emit_predictions(ps);
  const auto back = dsg::parse_predictions(text);
  EXPECT_EQ(dsg::emit_predictions(back), text);
  EXPECT_EQ(back.frames.size(), d.frames.size());
}

// ---------------------------------------------------------------- synth

TEST(Synth, SameSeedIsByteIdentical) {
  auto cfg = small_synth(9);
  cfg.corruption = 0.2;
  cfg.detector = true;
  EXPECT_EQ(dsg::emit_dataset(dsg::synth_generate(cfg)), dsg::emit_dataset(dsg::synth_generate(cfg)));
  auto other = cfg;
  other.seed = 10;
  EXPECT_NE(dsg::emit_dataset(dsg::synth_generate(cfg)), dsg::emit_dataset(dsg::synth_generate(other)));
}

TEST(Synth, CleanEvidencePeaksAtTrueClass) {
  auto cfg = small_synth();
  cfg.n_videos = 10;
  const auto d = dsg::synth_generate(cfg);
  std::size_t n = 0;
  for (const auto& f : d.frames) {
    for (const auto& det : f.detections) {
      const auto& gt = f.gt->objects;
      const auto it = std::find_if(gt.begin(), gt.end(), [&](const dsg::GtObject& o) { return o.id == det.detection_id; });
      ASSERT_NE(it, gt.end());
      EXPECT_EQ(det.argmax_class(), it->label);
      EXPECT_EQ(det.box, it->box);
      ++n;
    }
  }
  EXPECT_GT(n, 100u);
}

TEST(Synth, CorruptionRateMatchesConfiguration) {
  auto cfg = small_synth(21);
  cfg.corruption = 0.3;
  cfg.objects_per_scene = 2;
  cfg.occlusion_rate = 0.0;
  cfg.n_videos = 200;
  cfg.frames_per_video = 25;
  const auto d = dsg::synth_generate(cfg);
  std::size_t total = 0, corrupted = 0;
  for (const auto& f : d.frames) {
    for (const auto& det : f.detections) {
      for (const auto& o : f.gt->objects) {
        if (o.id != det.detection_id) continue;
        ++total;
        corrupted += det.argmax_class() != o.label;
      }
    }
  }
  ASSERT_GE(total, 10000u);
  EXPECT_NEAR(static_cast<double>(corrupted) / static_cast<double>(total), 0.3, 0.03);
}

TEST(Synth, InconsistentArityIsAConfigError) {
  auto cfg = small_synth();
  cfg.arities = {3, 0, 4};
  EXPECT_THROW(dsg::synth_generate(cfg), dsg::ConfigError);
}

TEST(Synth, SceneStructure) {
  auto cfg = small_synth(4);
  cfg.objects_per_scene = 4;
  cfg.n_videos = 5;
  const auto d = dsg::synth_generate(cfg);
  for (const auto& f : d.frames) {
    const auto& gt = *f.gt;
    std::size_t subjects = 0;
    for (const auto& o : gt.objects) subjects += o.track == 0;
    ASSERT_EQ(subjects, 1u);
    EXPECT_EQ(gt.triplets.size(), 3 * (gt.objects.size() - 1));
    EXPECT_EQ(f.pairs.size(), gt.objects.size() - 1);
    for (const auto& t : gt.triplets) {
      const auto s = std::find_if(gt.objects.begin(), gt.objects.end(), [&](const dsg::GtObject& o) { return o.id == t.subject; });
      EXPECT_EQ(s->label, 0);
      EXPECT_EQ(s->track, 0);
    }
  }
}

TEST(Synth, DetectorModeAddsDuplicatesNearTruth) {
  auto cfg = small_synth(5);
  cfg.detector = true;
  cfg.duplicate_rate = 0.5;
  cfg.n_videos = 6;
  const auto d = dsg::synth_generate(cfg);
  std::size_t extra = 0;
  for (const auto& f : d.frames) {
    ASSERT_GE(f.detections.size(), f.gt->objects.size());
    extra += f.detections.size() - f.gt->objects.size();
    for (const auto& det : f.detections) {
      double best = 0.0;
      for (const auto& o : f.gt->objects) best = std::max(best, dsg::iou(det.box, o.box));
      EXPECT_GT(best, 0.5);
    }
    EXPECT_EQ(f.pairs.size(), f.detections.size() * (f.detections.size() - 1));
  }
  EXPECT_GT(extra, 0u);
}

TEST(Synth, CleanVideosTrackPerfectly) {
  auto cfg = small_synth(6);
  cfg.n_videos = 8;
  cfg.frames_per_video = 20;
  cfg.objects_per_scene = 4;
  const auto d = dsg::synth_generate(cfg);
  const auto run = dsg::make_run_config({});
  for (const auto& v : dsg::group_videos(d)) {
    const auto g = dsg::group_video(v, run);
    std::map<std::pair<int, int>, int> track_of;
    for (const auto* f : v.frames)
      for (const auto& o : f->gt->objects) track_of[{f->frame_index, o.id}] = o.track;
    std::vector<std::vector<int>> groups;
    for (const auto& s : g.sequences) {
      auto& grp = groups.emplace_back();
      for (const auto& e : s.entries) grp.push_back(track_of.at({e.ref.frame_index, e.ref.detection_id}));
    }
    const auto pc = oracle::purity_completeness(groups);
    EXPECT_EQ(pc.purity, 1.0) << v.id;
    EXPECT_EQ(pc.completeness, 1.0) << v.id;
  }
}

// ---------------------------------------------------------------- batches

TEST(Batch, LabelsAndPredicatesFollowGroundTruth) {
  const auto d = dsg::synth_generate(small_synth());
  const auto run = dsg::make_run_config({});
  const auto videos = dsg::group_videos(d);
  const auto b = dsg::make_batch(videos[0], d.header, run);
  std::size_t rows = 0, pairs = 0;
  for (std::size_t f = 0; f < b.frames.size(); ++f) {
    const auto& gt = *b.frames[f]->gt;
    for (std::size_t r : b.frame_rows[f]) {
      const auto& det = b.sample.detections[r];
      for (const auto& o : gt.objects) {
        if (o.id == det.detection_id) {
          EXPECT_EQ(det.label, o.label);
        }
      }
      ++rows;
    }
    for (std::size_t k : b.frame_pairs[f]) {
      const auto& p = b.sample.pairs[k];
      const int sid = b.sample.detections[p.subject].detection_id;
      const int oid = b.sample.detections[p.object].detection_id;
      for (std::size_t c = 0; c < dsg::kCategories; ++c) {
        std::vector<int> want;
        for (const auto& t : gt.triplets)
          if (t.subject == sid && t.object == oid && t.category == c) want.push_back(t.predicate);
        EXPECT_EQ(p.predicates[c], want);
      }
      ++pairs;
    }
  }
  EXPECT_EQ(rows, b.sample.detections.size());
  EXPECT_EQ(pairs, b.sample.pairs.size());
}

TEST(Batch, MissingUnionFeatureUsesDocumentedStandIn) {
  dsg::Detection s{0, 0, {}, {1.0}, {1.0, 2.0, 3.0}};
  dsg::Detection o{0, 1, {}, {1.0}, {3.0, 0.0, 1.0}};
  EXPECT_EQ(dsg::default_union_feature(s, o, 5), (std::vector<double>{2.0, 1.0, 2.0, 2.0, 1.0}));
}

// ---------------------------------------------------------------- commands

TEST(Run, EvalOfGroundTruthPredictionsIsPerfect) {
  for (const char* task : {"sgcls", "sgdet"}) {
    const auto out = scratch(std::string("oracle_") + task);
    auto kv = small_run(out);
    kv["task"] = task;
    dsg::Run(dsg::make_run_config(kv)).execute("synth");
    const auto d = dsg::ingest(out / "dataset.jsonl");
    dsg::write_atomic(out / "gt.jsonl",
                      dsg::emit_predictions({dsg::parse_task(task), d.header, dsg::oracle_predictions(d)}));
    kv["predictions"] = (out / "gt.jsonl").string();
    dsg::Run run(dsg::make_run_config(kv));
    run.execute("eval");
    const auto& m = *run.metrics();
    EXPECT_EQ(m.object_accuracy, 1.0) << task;
    for (auto mode : {dsg::Constraint::with, dsg::Constraint::none}) {
      for (std::size_t k : {10u, 20u, 50u}) {
        EXPECT_EQ(m.recall.at(mode).at(k), 1.0) << task;
        EXPECT_EQ(m.mean_recall.at(mode).at(k), 1.0) << task;
      }
    }
  }
}

TEST(Run, ZeroEpochTrainThenEvalTwiceIsIdentical) {
  const auto out = scratch("zero_epoch");
  auto kv = small_run(out);
  kv["train.epochs"] = "0";
  const auto cfg = dsg::make_run_config(kv);
  dsg::Run(cfg).execute("synth");
  dsg::Run(cfg).execute("train");
  dsg::Run(cfg).execute("eval");
  const std::string first = dsg::read_file(out / "metrics.json");
  const std::string first_pred = dsg::read_file(out / "predictions.jsonl");
  dsg::Run(cfg).execute("eval");
  EXPECT_EQ(dsg::read_file(out / "metrics.json"), first);
  EXPECT_EQ(dsg::read_file(out / "predictions.jsonl"), first_pred);
}

TEST(Run, EveryCommandIsReproducible) {
  const auto a = scratch("repro_a");
  auto kv = small_run(a);
  kv["train.epochs"] = "2";
  const auto cfg = dsg::make_run_config(kv);
  std::map<std::string, std::string> seen;
  for (const char* cmd : {"synth", "track", "train", "eval", "report"}) {
    dsg::Run run(cfg);
    run.execute(cmd);
    for (const auto& o : run.outputs()) seen[o.path.string()] = dsg::read_file(o.path);
  }
  for (const char* cmd : {"synth", "track", "train", "eval", "report"}) {
    dsg::Run run(cfg);
    run.execute(cmd);
    for (const auto& o : run.outputs()) EXPECT_EQ(dsg::read_file(o.path), seen.at(o.path.string())) << o.path;
  }
  EXPECT_GE(seen.size(), 10u);
}

TEST(Run, ManifestRecreatesTheRun) {
  const auto out = scratch("manifest");
  auto kv = small_run(out);
  kv["seed"] = "5";
  const auto cfg = dsg::make_run_config(kv);
  dsg::Run(cfg).execute("synth");
  const auto manifest = nlohmann::json::parse(dsg::read_file(out / "synth.manifest.json"));
  EXPECT_EQ(manifest.at("config_hash").get<std::string>(), dsg::hex64(cfg.hash()));
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), 5u);
  EXPECT_FALSE(manifest.contains("time"));
  const auto again = dsg::config_from_manifest(out / "synth.manifest.json");
  EXPECT_EQ(again.hash(), cfg.hash());
  const std::string before = dsg::read_file(out / "dataset.jsonl");
  dsg::Run(again).execute("synth");
  EXPECT_EQ(dsg::read_file(out / "dataset.jsonl"), before);
  EXPECT_EQ(manifest.at("outputs").at("dataset").at("fnv1a").get<std::string>(), dsg::hex64(dsg::fnv1a(before)));
}

TEST(Run, MissingInputsAreDescriptive) {
  const auto out = scratch("missing");
  const auto cfg = dsg::make_run_config(small_run(out));
  for (const char* cmd : {"track", "train", "eval", "report"}) {
    try {
      dsg::Run(cfg).execute(cmd);
      FAIL() << cmd;
    } catch (const dsg::InputError& e) {
      EXPECT_NE(std::string(e.what()).find("run "), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(dsg::Run(cfg).execute("fly"), dsg::ConfigError);
}

TEST(Run, NonFiniteLossAbortsTraining) {
  const auto d = dsg::synth_generate(small_synth());
  const auto cfg = dsg::make_run_config(small_run(scratch("nan")));
  const auto videos = dsg::group_videos(d);
  std::vector<dsg::VideoBatch> batches{dsg::make_batch(videos[0], d.header, cfg)};
  batches[0].sample.detections[0].feature[0] = std::nan("");
  dsg::SceneGraphModel model(cfg.model_for(d.header), 1);
  try {
    dsg::train_model(model, batches, d, {videos[0]}, cfg);
    FAIL() << "expected TrainingError";
  } catch (const dsg::TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find(videos[0].id), std::string::npos);
  }
}

TEST(Run, HoldoutSplitsVideos) {
  const auto d = dsg::synth_generate(small_synth());
  const auto all = dsg::group_videos(d);
  EXPECT_EQ(dsg::select_split(all, 1, dsg::Split::train).size(), 2u);
  const auto held = dsg::select_split(all, 1, dsg::Split::holdout);
  ASSERT_EQ(held.size(), 1u);
  EXPECT_EQ(held[0].id, all.back().id);
  EXPECT_THROW(dsg::select_split(all, 4, dsg::Split::train), dsg::ConfigError);
}

TEST(Run, ReportRendersStoredMetrics) {
  const auto out = scratch("report");
  auto kv = small_run(out);
  kv["train.epochs"] = "0";
  kv["eval.k"] = "1,5";
  const auto cfg = dsg::make_run_config(kv);
  for (const char* cmd : {"synth", "train", "eval"}) dsg::Run(cfg).execute(cmd);
  dsg::Run rep(cfg);
  rep.execute("report");
  const auto stored = nlohmann::json::parse(dsg::read_file(out / "metrics.json"));
  EXPECT_EQ(rep.metrics()->to_json(), stored);
  const std::string table = dsg::read_file(out / "report.txt");
  EXPECT_NE(table.find("R@5"), std::string::npos);
  EXPECT_NE(table.find("mR@1"), std::string::npos);
}

}  // namespace
