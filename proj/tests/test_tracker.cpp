#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "dsg/tracker.hpp"
#include "oracles.hpp"
#include "video_fixtures.hpp"

namespace {

using dsg::BBox;
using dsg::Detection;
using dsg::FrameDetections;

Detection det(int frame, int id, BBox box, std::vector<double> c, std::vector<double> f) {
  return Detection{frame, id, box, std::move(c), std::move(f)};
}

dsg::TrackerConfig sgcls_config(int m = 50) {
  dsg::TrackerConfig cfg;
  cfg.m = m;
  return cfg;
}

TEST(TrackerStep, FirstDetectionCreatesTracklet) {
  dsg::Tracker tr(sgcls_config());
  const std::vector<Detection> d{det(0, 0, {0.5, 0.5, 0.2, 0.2}, {1.0, 0.0}, {1.0, 0.0})};
  const auto a = tr.step(0, d);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_TRUE(a[0].is_new);
  ASSERT_EQ(tr.tracklets().size(), 1u);
  EXPECT_EQ(tr.tracklets()[0].members().size(), 1u);
}

TEST(TrackerStep, IdenticalDetectionIsAppended) {
  dsg::Tracker tr(sgcls_config());
  const BBox b{0.5, 0.5, 0.2, 0.2};
  const std::vector<Detection> f0{det(0, 0, b, {0.7, 0.3}, {1.0, 2.0})};
  const std::vector<Detection> f1{det(1, 0, b, {0.7, 0.3}, {1.0, 2.0})};
  tr.step(0, f0);
  const auto a = tr.step(1, f1);
  EXPECT_FALSE(a[0].is_new);
  EXPECT_EQ(a[0].tracklet_id, 0);
  ASSERT_EQ(tr.tracklets().size(), 1u);
  EXPECT_EQ(tr.tracklets()[0].size(), 2u);
}

TEST(TrackerStep, LowSimilarityMatchIsRejected) {
  dsg::Tracker tr(sgcls_config());
  const BBox b{0.5, 0.5, 0.2, 0.2};
  tr.step(0, std::vector<Detection>{det(0, 0, b, {1.0, 0.0, 0.0}, {1.0, 0.0})});
  // class cosine 0.3: a / sqrt(a^2 + b^2) = 0.3 with a + b = 1
  const double ratio = std::sqrt(0.91 / 0.09);
  const double a = 1.0 / (1.0 + ratio);
  const std::vector<double> c{a, 1.0 - a, 0.0};
  const std::vector<double> f{0.2, std::sqrt(0.96)};
  ASSERT_NEAR(dsg::cosine_similarity(c, std::vector<double>{1.0, 0.0, 0.0}), 0.3, 1e-12);
  const auto r = tr.step(1, std::vector<Detection>{det(1, 0, b, c, f)});
  EXPECT_TRUE(r[0].is_new);
  EXPECT_EQ(r[0].tracklet_id, 1);
  EXPECT_EQ(tr.tracklets().size(), 2u);
  EXPECT_EQ(tr.tracklets()[0].size(), 1u);
}

TEST(TrackerStep, OneHighSimilaritySuffices) {
  dsg::Tracker tr(sgcls_config());
  const BBox b{0.5, 0.5, 0.2, 0.2};
  tr.step(0, std::vector<Detection>{det(0, 0, b, {1.0, 0.0}, {1.0, 0.0})});
  // class evidence disagrees completely but the feature still matches
  const auto r = tr.step(1, std::vector<Detection>{det(1, 0, b, {0.0, 1.0}, {1.0, 0.1})});
  EXPECT_FALSE(r[0].is_new);
}

TEST(TrackerStep, OutOfOrderFramesAreSequencingErrors) {
  dsg::Tracker tr(sgcls_config());
  tr.step(3, std::vector<Detection>{});
  EXPECT_THROW(tr.step(3, std::vector<Detection>{}), dsg::SequenceError);
  EXPECT_THROW(tr.step(2, std::vector<Detection>{}), dsg::SequenceError);
  EXPECT_THROW(tr.step(5, std::vector<Detection>{det(4, 0, {0.5, 0.5, 0.1, 0.1}, {1.0}, {1.0})}),
               dsg::SequenceError);
}

TEST(TrackerStep, InvalidDistributionRejected) {
  dsg::Tracker tr(sgcls_config());
  EXPECT_THROW(tr.step(0, std::vector<Detection>{det(0, 0, {0.5, 0.5, 0.1, 0.1}, {0.5, 0.4}, {1.0})}),
               dsg::InputError);
  EXPECT_THROW(tr.step(1, std::vector<Detection>{det(1, 0, {0.5, 0.5, 0.1, 0.1}, {1.2, -0.2}, {1.0})}),
               dsg::InputError);
}

TEST(TrackVideo, SteadyObjectFormsOneTracklet) {
  std::vector<FrameDetections> frames;
  for (int f = 0; f < 30; ++f) {
    frames.push_back({f, 0.0, {det(f, 0, {0.3, 0.3, 0.2, 0.2}, {0.1, 0.9}, {1.0, 1.0, 0.0})}});
  }
  const auto t = dsg::track_video(frames, sgcls_config());
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].size(), 30u);
}

TEST(TrackVideo, TwoSeparatedObjectsStayPure) {
  fixtures::VideoSpec spec;
  spec.n_objects = 2;
  spec.n_frames = 25;
  const auto v = fixtures::make_video(spec, 21);
  const auto t = dsg::track_video(v.frames, sgcls_config());
  ASSERT_EQ(t.size(), 2u);
  const auto pc = oracle::purity_completeness(fixtures::identity_groups(v, t));
  EXPECT_EQ(pc.purity, 1.0);
  EXPECT_EQ(pc.completeness, 1.0);
}

std::vector<FrameDetections> with_gap(int m, int absent) {
  std::vector<FrameDetections> frames;
  const BBox b{0.5, 0.5, 0.2, 0.2};
  frames.push_back({0, 0.0, {det(0, 0, b, {1.0, 0.0}, {1.0, 0.0})}});
  for (int f = 1; f <= absent; ++f) frames.push_back({f, 0.0, {}});
  const int back = absent + 1;
  frames.push_back({back, 0.0, {det(back, 0, b, {1.0, 0.0}, {1.0, 0.0})}});
  (void)m;
  return frames;
}

TEST(TrackVideo, ExpiryAfterMoreThanMFrames) {
  const int m = 5;
  EXPECT_EQ(dsg::track_video(with_gap(m, m + 1), sgcls_config(m)).size(), 2u);
  EXPECT_EQ(dsg::track_video(with_gap(m, m), sgcls_config(m)).size(), 2u);
  // a gap of exactly m key frames between detections keeps the tracklet alive
  EXPECT_EQ(dsg::track_video(with_gap(m, m - 1), sgcls_config(m)).size(), 1u);
}

TEST(TrackVideo, TimestampExpiry) {
  dsg::TrackerConfig cfg;
  cfg.expiry = dsg::ExpiryMode::timestamps;
  cfg.m_seconds = 2.0;
  const BBox b{0.5, 0.5, 0.2, 0.2};
  std::vector<FrameDetections> frames{{0, 0.0, {det(0, 0, b, {1.0, 0.0}, {1.0, 0.0})}},
                                      {1, 1.5, {det(1, 0, b, {1.0, 0.0}, {1.0, 0.0})}},
                                      {2, 4.0, {det(2, 0, b, {1.0, 0.0}, {1.0, 0.0})}}};
  const auto t = dsg::track_video(frames, cfg);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].size(), 2u);
  frames[2].timestamp = std::nan("");
  EXPECT_THROW(dsg::track_video(frames, cfg), dsg::SequenceError);
}

TEST(TrackVideo, RandomVideosKeepInvariants) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    fixtures::VideoSpec spec;
    spec.n_objects = 1 + static_cast<int>(seed % 5);
    spec.n_frames = 15 + static_cast<int>(seed % 10);
    spec.class_noise = 0.6;
    spec.feature_noise = 0.8;
    spec.drop_prob = 0.2;
    const auto v = fixtures::make_video(spec, 100 + seed);
    const int m = 3;
    const auto t = dsg::track_video(v.frames, sgcls_config(m));

    std::set<dsg::MemberRef> all;
    std::size_t total = 0;
    for (const auto& f : v.frames)
      for (const auto& d : f.detections) {
        all.insert({d.frame_index, d.detection_id});
        ++total;
      }
    std::set<dsg::MemberRef> covered;
    std::size_t members = 0;
    for (const auto& tr : t) {
      for (std::size_t i = 0; i < tr.members().size(); ++i) {
        covered.insert(tr.members()[i]);
        ++members;
        if (i > 0) {
          ASSERT_LT(tr.members()[i - 1].frame_index, tr.members()[i].frame_index);
          ASSERT_LE(tr.members()[i].frame_index - tr.members()[i - 1].frame_index, m);
        }
      }
      // running averages against batch recomputation
      std::vector<double> c(tr.avg_class_dist().size(), 0.0), fe(tr.avg_feature().size(), 0.0);
      for (const auto& mref : tr.members()) {
        for (const auto& f : v.frames) {
          if (f.frame_index != mref.frame_index) continue;
          for (const auto& d : f.detections) {
            if (d.detection_id != mref.detection_id) continue;
            for (std::size_t k = 0; k < c.size(); ++k) c[k] += d.class_dist[k];
            for (std::size_t k = 0; k < fe.size(); ++k) fe[k] += d.feature[k];
          }
        }
      }
      for (std::size_t k = 0; k < c.size(); ++k) ASSERT_NEAR(tr.avg_class_dist()[k], c[k] / tr.size(), 1e-9);
      for (std::size_t k = 0; k < fe.size(); ++k) ASSERT_NEAR(tr.avg_feature()[k], fe[k] / tr.size(), 1e-9);
    }
    EXPECT_EQ(members, total);
    EXPECT_EQ(covered, all);
  }
}

TEST(TrackVideo, Deterministic) {
  fixtures::VideoSpec spec;
  spec.class_noise = 0.5;
  spec.feature_noise = 0.5;
  spec.drop_prob = 0.1;
  const auto v = fixtures::make_video(spec, 77);
  std::ostringstream a, b;
  dsg::write_tracklet_dump(a, "v", dsg::track_video(v.frames, sgcls_config()));
  dsg::write_tracklet_dump(b, "v", dsg::track_video(v.frames, sgcls_config()));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_FALSE(a.str().empty());
}

TEST(TrackletDump, RecordFields) {
  std::vector<FrameDetections> frames{{0, 0.0, {det(0, 4, {0.5, 0.5, 0.2, 0.2}, {0.25, 0.75}, {2.0})}}};
  const auto t = dsg::track_video(frames, sgcls_config());
  const auto rec = dsg::tracklet_record("vid", t[0]);
  EXPECT_EQ(rec["video"], "vid");
  EXPECT_EQ(rec["id"], 0);
  EXPECT_EQ(rec["members"][0][0], 0);
  EXPECT_EQ(rec["members"][0][1], 4);
  EXPECT_EQ(rec["class_dist"][1], 0.75);
  EXPECT_EQ(rec["box"][2], 0.2);
}

TEST(ClusterAndTrack, SingleDetectionsMatchPlainTracking) {
  fixtures::VideoSpec spec;
  spec.n_objects = 3;
  spec.class_noise = 0.3;
  const auto v = fixtures::make_video(spec, 5);
  const auto plain = dsg::track_video(v.frames, sgcls_config());
  const auto clustered = dsg::cluster_and_track(v.frames, 0.5, sgcls_config());
  EXPECT_EQ(dsg::to_sequences(plain), clustered.sequences);
}

TEST(ClusterAndTrack, DuplicatesShareTrackletAndPosition) {
  std::vector<FrameDetections> frames;
  for (int f = 0; f < 6; ++f) {
    const BBox b{0.3 + 0.01 * f, 0.5, 0.2, 0.2};
    BBox b2 = b;
    b2.cx += 0.005;
    frames.push_back({f, 0.0, {det(f, 0, b, {0.9, 0.1}, {1.0, 0.0}), det(f, 1, b2, {0.8, 0.2}, {1.0, 0.1})}});
  }
  const auto r = dsg::cluster_and_track(frames, 0.5, sgcls_config());
  ASSERT_EQ(r.tracklets.size(), 1u);
  ASSERT_EQ(r.sequences.size(), 1u);
  const auto& s = r.sequences[0];
  ASSERT_EQ(s.entries.size(), 12u);
  for (int f = 0; f < 6; ++f) {
    const auto& rep = s.entries[static_cast<std::size_t>(2 * f)];
    const auto& dup = s.entries[static_cast<std::size_t>(2 * f + 1)];
    EXPECT_TRUE(rep.representative);
    EXPECT_EQ(rep.ref.detection_id, 0);
    EXPECT_FALSE(dup.representative);
    EXPECT_EQ(rep.position, f);
    EXPECT_EQ(dup.position, f);
  }
}

TEST(ClusterAndTrack, TrackletCountEqualsObjectCount) {
  fixtures::VideoSpec spec;
  spec.n_objects = 3;
  spec.n_frames = 20;
  auto v = fixtures::make_video(spec, 8);
  // add a slightly weaker near-duplicate of every detection
  for (auto& f : v.frames) {
    const auto originals = f.detections;
    int next = static_cast<int>(originals.size());
    for (const auto& d : originals) {
      Detection dup = d;
      dup.detection_id = next++;
      dup.box.cx += 0.004;
      for (auto& p : dup.class_dist) p = 0.9 * p + 0.1 / static_cast<double>(dup.class_dist.size());
      f.detections.push_back(dup);
    }
  }
  const auto r = dsg::cluster_and_track(v.frames, 0.5, sgcls_config());
  EXPECT_EQ(r.tracklets.size(), 3u);
  for (const auto& s : r.sequences) EXPECT_EQ(s.entries.size(), 40u);
}

TEST(LabelGrouping, SingleClassOneSequence) {
  std::vector<FrameDetections> frames;
  for (int f = 0; f < 4; ++f) {
    frames.push_back({f, 0.0, {det(f, 0, {0.5, 0.5, 0.1, 0.1}, {0.0, 0.0, 0.0, 1.0}, {1.0})}});
  }
  const auto s = dsg::label_grouping(frames);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].label, 3);
  EXPECT_EQ(s[0].entries.size(), 4u);
}

TEST(LabelGrouping, InterleavedClassesKeepFrameOrder) {
  std::vector<FrameDetections> frames;
  for (int f = 0; f < 6; ++f) {
    const int cls = f % 2;
    std::vector<double> c{cls == 0 ? 1.0 : 0.0, cls == 1 ? 1.0 : 0.0};
    frames.push_back({f, 0.0, {det(f, 0, {0.5, 0.5, 0.1, 0.1}, c, {1.0})}});
  }
  const auto s = dsg::label_grouping(frames);
  ASSERT_EQ(s.size(), 2u);
  for (const auto& seq : s) {
    ASSERT_EQ(seq.entries.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(seq.entries[i].ref.frame_index, static_cast<int>(2 * i) + seq.label);
      EXPECT_EQ(seq.entries[i].position, static_cast<int>(i));
    }
  }
}

TEST(LabelGrouping, AgreesWithTrackingOnCleanData) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    fixtures::VideoSpec spec;
    spec.n_objects = 4;
    spec.n_classes = 6;
    const auto v = fixtures::make_video(spec, 300 + seed);
    auto partition = [](const std::vector<dsg::TrackSequence>& seqs) {
      std::set<std::set<dsg::MemberRef>> p;
      for (const auto& s : seqs) {
        std::set<dsg::MemberRef> members;
        for (const auto& e : s.entries) members.insert(e.ref);
        p.insert(members);
      }
      return p;
    };
    EXPECT_EQ(partition(dsg::label_grouping(v.frames)),
              partition(dsg::to_sequences(dsg::track_video(v.frames, sgcls_config()))));
  }
}

}  // namespace
