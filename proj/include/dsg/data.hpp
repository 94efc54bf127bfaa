#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/sgeval.hpp"
#include "dsg/sgmodel.hpp"
#include "dsg/tracker.hpp"
#include "json.hpp"

namespace dsg {

inline constexpr const char* kFramesFormat = "dsg-frames";
inline constexpr const char* kPredictionsFormat = "dsg-predictions";
inline constexpr const char* kTrackletsFormat = "dsg-tracklets";
inline constexpr int kFormatVersion = 1;

/// Distributions off by at most this much are renormalized on ingest; larger drift is rejected.
inline constexpr double kRenormTolerance = 1e-4;

struct PairRecord {
  int subject = 0;  ///< detection id
  int object = 0;
  std::vector<double> union_feature;

  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

struct FrameRecord {
  std::string video_id;
  int frame_index = 0;
  std::optional<double> timestamp;
  std::vector<Detection> detections;
  std::vector<PairRecord> pairs;
  std::optional<FrameGroundTruth> gt;
};

struct DatasetHeader {
  std::size_t n_classes = 0;
  std::size_t d_feat = 0;
  std::size_t d_union = 0;
  std::array<std::size_t, kCategories> arities{};

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<FrameRecord> frames;
};

/// Frames of one video, in file order.
struct VideoView {
  std::string id;
  std::vector<const FrameRecord*> frames;
};

inline std::vector<VideoView> group_videos(const Dataset& d) {
  std::vector<VideoView> out;
  std::map<std::string, std::size_t> index;
  for (const auto& f : d.frames) {
    const auto [it, inserted] = index.try_emplace(f.video_id, out.size());
    if (inserted) out.push_back({f.video_id, {}});
    out[it->second].frames.push_back(&f);
  }
  return out;
}

inline FrameDetections to_frame_detections(const FrameRecord& f) {
  return {f.frame_index, f.timestamp.value_or(std::numeric_limits<double>::quiet_NaN()), f.detections};
}

// ---------------------------------------------------------------- files

/// Writes to a sibling temp file and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open " + tmp.string() + " for writing");
    os << contents;
    os.flush();
    if (!os) throw InputError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------- json codec

namespace detail {

using nlohmann::json;

inline BBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be [cx, cy, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline std::vector<double> doubles(const json& j, const char* what) {
  if (!j.is_array()) throw InputError(std::string(what) + " must be an array");
  std::vector<double> v;
  v.reserve(j.size());
  for (const auto& x : j) v.push_back(x.get<double>());
  return v;
}

inline const json& field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw InputError(std::string("missing field '") + key + "'");
  return *it;
}

template <class T>
std::optional<T> header_value(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) return std::nullopt;
  return it->get<T>();
}

/// Returns a message on failure; renormalizes in place within tolerance.
inline std::optional<std::string> normalize_distribution(std::vector<double>& p, std::size_t width) {
  if (p.size() != width) return "class distribution has " + std::to_string(p.size()) + " entries, expected " + std::to_string(width);
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) return std::string("class distribution has a negative or non-finite entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kRenormTolerance) return "class distribution sums to " + std::to_string(sum);
  if (std::abs(sum - 1.0) > 1e-12)
    for (double& v : p) v /= sum;
  return std::nullopt;
}

}  // namespace detail

inline nlohmann::json header_json(const char* format, const DatasetHeader& h) {
  return {{"format", format},           {"version", kFormatVersion}, {"n_classes", h.n_classes},
          {"d_feat", h.d_feat},         {"d_union", h.d_union},      {"arities", h.arities}};
}

inline nlohmann::json frame_json(const FrameRecord& f) {
  using nlohmann::json;
  json j;
  j["video"] = f.video_id;
  j["frame"] = f.frame_index;
  if (f.timestamp) j["timestamp"] = *f.timestamp;
  json dets = json::array();
  for (const auto& d : f.detections) {
    dets.push_back({{"id", d.detection_id}, {"box", box_to_json(d.box)}, {"class_dist", d.class_dist}, {"feature", d.feature}});
  }
  j["detections"] = std::move(dets);
  if (!f.pairs.empty()) {
    json pairs = json::array();
    for (const auto& p : f.pairs) pairs.push_back({{"subject", p.subject}, {"object", p.object}, {"union", p.union_feature}});
    j["pairs"] = std::move(pairs);
  }
  if (f.gt) {
    json objs = json::array();
    for (const auto& o : f.gt->objects) {
      objs.push_back({{"id", o.id}, {"box", box_to_json(o.box)}, {"label", o.label}, {"track", o.track}});
    }
    json trips = json::array();
    for (const auto& t : f.gt->triplets) {
      trips.push_back({{"subject", t.subject}, {"object", t.object}, {"category", t.category}, {"predicate", t.predicate}});
    }
    j["gt"] = {{"objects", std::move(objs)}, {"triplets", std::move(trips)}};
  }
  return j;
}

inline std::string emit_dataset(const Dataset& d) {
  std::string out = header_json(kFramesFormat, d.header).dump() + '\n';
  for (const auto& f : d.frames) out += frame_json(f).dump() + '\n';
  return out;
}

/// Field-level decoding; invariants are checked separately by validate_frame.
inline FrameRecord frame_from_json(const nlohmann::json& j) {
  using detail::field;
  FrameRecord f;
  f.video_id = field(j, "video").get<std::string>();
  f.frame_index = field(j, "frame").get<int>();
  if (const auto it = j.find("timestamp"); it != j.end()) f.timestamp = it->get<double>();
  for (const auto& dj : field(j, "detections")) {
    Detection d;
    d.frame_index = f.frame_index;
    d.detection_id = field(dj, "id").get<int>();
    d.box = detail::box_from_json(field(dj, "box"));
    d.class_dist = detail::doubles(field(dj, "class_dist"), "class_dist");
    d.feature = detail::doubles(field(dj, "feature"), "feature");
    f.detections.push_back(std::move(d));
  }
  if (const auto it = j.find("pairs"); it != j.end()) {
    for (const auto& pj : *it) {
      f.pairs.push_back({field(pj, "subject").get<int>(), field(pj, "object").get<int>(),
                         detail::doubles(field(pj, "union"), "union")});
    }
  }
  if (const auto it = j.find("gt"); it != j.end()) {
    FrameGroundTruth gt;
    for (const auto& oj : field(*it, "objects")) {
      gt.objects.push_back({field(oj, "id").get<int>(), detail::box_from_json(field(oj, "box")),
                            field(oj, "label").get<int>(), oj.value("track", -1)});
    }
    for (const auto& tj : field(*it, "triplets")) {
      gt.triplets.push_back({field(tj, "subject").get<int>(), field(tj, "object").get<int>(),
                             field(tj, "category").get<std::size_t>(), field(tj, "predicate").get<int>()});
    }
    f.gt = std::move(gt);
  }
  return f;
}

/// Checks invariants and renormalizes near-unit distributions. Throws ValidationError.
inline void validate_frame(FrameRecord& f, const DatasetHeader& h, std::size_t line) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("line " + std::to_string(line) + ": " + what);
  };
  if (f.frame_index < 0) fail("negative frame index");
  if (f.timestamp && !std::isfinite(*f.timestamp)) fail("timestamp is not finite");
  std::set<int> ids;
  for (auto& d : f.detections) {
    if (!ids.insert(d.detection_id).second) fail("duplicate detection id " + std::to_string(d.detection_id));
    if (!is_finite(d.box) || d.box.w < 0.0 || d.box.h < 0.0) fail("detection box is not finite and non-negative");
    if (auto err = detail::normalize_distribution(d.class_dist, h.n_classes)) fail(*err);
    if (d.feature.size() != h.d_feat) fail("feature width differs from d_feat");
    for (double v : d.feature)
      if (!std::isfinite(v)) fail("feature is not finite");
  }
  for (const auto& p : f.pairs) {
    if (!ids.count(p.subject) || !ids.count(p.object)) fail("pair refers to an unknown detection");
    if (p.subject == p.object) fail("pair relates a detection to itself");
    if (p.union_feature.size() != h.d_union) fail("union feature width differs from d_union");
    for (double v : p.union_feature)
      if (!std::isfinite(v)) fail("union feature is not finite");
  }
  if (f.gt) {
    std::set<int> gt_ids;
    for (const auto& o : f.gt->objects) {
      if (!gt_ids.insert(o.id).second) fail("duplicate ground-truth object id");
      if (o.label < 0 || static_cast<std::size_t>(o.label) >= h.n_classes) fail("ground-truth label out of range");
      if (!is_finite(o.box)) fail("ground-truth box is not finite");
    }
    for (const auto& t : f.gt->triplets) {
      if (!gt_ids.count(t.subject) || !gt_ids.count(t.object)) fail("triplet refers to an unknown ground-truth box");
      if (t.category >= kCategories) fail("triplet category out of range");
      if (t.predicate < 0 || static_cast<std::size_t>(t.predicate) >= h.arities[t.category]) {
        fail("triplet predicate out of range");
      }
    }
  }
}

inline DatasetHeader parse_header(const nlohmann::json& j, const char* format, std::size_t line) {
  try {
    if (j.value("format", std::string()) != format) throw ParseError(line, std::string("expected a ") + format + " header");
    if (j.value("version", 0) != kFormatVersion) throw ParseError(line, "unsupported format version");
    DatasetHeader h;
    h.n_classes = detail::field(j, "n_classes").get<std::size_t>();
    h.d_feat = detail::field(j, "d_feat").get<std::size_t>();
    h.d_union = detail::field(j, "d_union").get<std::size_t>();
    h.arities = detail::field(j, "arities").get<std::array<std::size_t, kCategories>>();
    if (h.n_classes == 0) throw ValidationError("header: n_classes must be positive");
    for (auto a : h.arities)
      if (a == 0) throw ValidationError("header: arities must be positive");
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line, e.what());
  } catch (const InputError& e) {
    throw ParseError(line, e.what());
  }
}

/// Calls fn(json, line) for every non-empty line after the header; returns the header json.
template <class Fn>
nlohmann::json for_each_record(const std::string& text, Fn&& fn) {
  std::istringstream is(text);
  std::string s;
  std::size_t line = 0;
  std::optional<nlohmann::json> header;
  while (std::getline(is, s)) {
    ++line;
    if (s.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(s);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, std::string("malformed record: ") + e.what());
    }
    if (!header) {
      header = std::move(j);
      fn(*header, line, true);
      continue;
    }
    fn(j, line, false);
  }
  if (!header) throw ParseError(line, "missing header line");
  return *header;
}

inline Dataset parse_dataset(const std::string& text) {
  Dataset d;
  std::map<std::string, int> last_frame;
  for_each_record(text, [&](const nlohmann::json& j, std::size_t line, bool is_header) {
    if (is_header) {
      d.header = parse_header(j, kFramesFormat, line);
      return;
    }
    FrameRecord f;
    try {
      f = frame_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line, e.what());
    } catch (const InputError& e) {
      throw ParseError(line, e.what());
    }
    validate_frame(f, d.header, line);
    const auto [it, inserted] = last_frame.try_emplace(f.video_id, f.frame_index);
    if (!inserted) {
      if (f.frame_index <= it->second) {
        throw ValidationError("line " + std::to_string(line) + ": frames of a video must have increasing indices");
      }
      it->second = f.frame_index;
    }
    d.frames.push_back(std::move(f));
  });
  return d;
}

inline Dataset ingest(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

// ---------------------------------------------------------------- predictions

struct PredictionSet {
  Task task = Task::sgcls;
  DatasetHeader header;
  std::vector<FramePrediction> frames;
};

inline std::string emit_predictions(const PredictionSet& p) {
  using nlohmann::json;
  json h = header_json(kPredictionsFormat, p.header);
  h["task"] = to_string(p.task);
  std::string out = h.dump() + '\n';
  for (const auto& f : p.frames) {
    json objs = json::array();
    for (const auto& o : f.objects) objs.push_back({{"id", o.id}, {"box", box_to_json(o.box)}, {"class_dist", o.class_dist}});
    json pairs = json::array();
    for (const auto& pr : f.pairs) {
      pairs.push_back({{"subject", f.objects.at(pr.subject).id}, {"object", f.objects.at(pr.object).id}, {"scores", pr.scores}});
    }
    out += json{{"video", f.video}, {"frame", f.frame_index}, {"objects", std::move(objs)}, {"pairs", std::move(pairs)}}.dump();
    out += '\n';
  }
  return out;
}

inline PredictionSet parse_predictions(const std::string& text) {
  PredictionSet p;
  for_each_record(text, [&](const nlohmann::json& j, std::size_t line, bool is_header) {
    if (is_header) {
      p.header = parse_header(j, kPredictionsFormat, line);
      try {
        p.task = parse_task(detail::field(j, "task").get<std::string>());
      } catch (const std::exception& e) {
        throw ParseError(line, e.what());
      }
      return;
    }
    try {
      using detail::field;
      FramePrediction f;
      f.video = field(j, "video").get<std::string>();
      f.frame_index = field(j, "frame").get<int>();
      std::map<int, std::size_t> index;
      for (const auto& oj : field(j, "objects")) {
        PredictedObject o{field(oj, "id").get<int>(), detail::box_from_json(field(oj, "box")),
                          detail::doubles(field(oj, "class_dist"), "class_dist")};
        if (auto err = detail::normalize_distribution(o.class_dist, p.header.n_classes)) {
          throw ValidationError("line " + std::to_string(line) + ": " + *err);
        }
        if (!index.emplace(o.id, f.objects.size()).second) {
          throw ValidationError("line " + std::to_string(line) + ": duplicate object id");
        }
        f.objects.push_back(std::move(o));
      }
      for (const auto& pj : field(j, "pairs")) {
        const auto s = index.find(field(pj, "subject").get<int>());
        const auto o = index.find(field(pj, "object").get<int>());
        if (s == index.end() || o == index.end()) {
          throw ValidationError("line " + std::to_string(line) + ": pair refers to an unknown object");
        }
        PredictedPair pr{s->second, o->second, field(pj, "scores").get<std::array<std::vector<double>, kCategories>>()};
        for (std::size_t c = 0; c < kCategories; ++c) {
          if (pr.scores[c].size() != p.header.arities[c]) {
            throw ValidationError("line " + std::to_string(line) + ": score vector width differs from arity");
          }
        }
        f.pairs.push_back(std::move(pr));
      }
      p.frames.push_back(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line, e.what());
    } catch (const InputError& e) {
      throw ParseError(line, e.what());
    }
  });
  return p;
}

}  // namespace dsg
