#pragma once

// Checkpoint layout (version 1):
//   line 1   "DSGCKPT 1"
//   line 2   JSON manifest: {"dtype":"f64le","tensors":[{"name","shape":[r,c],"offset","count"}]}
//   payload  concatenated little-endian IEEE-754 doubles; offsets count scalars from the
//            start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/nn/layers.hpp"
#include "json.hpp"

namespace dsg::nn {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamStore& store) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : store.all()) {
    tensors.push_back({{"name", p.name},
                       {"shape", {p.value().rows(), p.value().cols()}},
                       {"offset", offset},
                       {"count", p.value().size()}});
    offset += p.value().size();
  }
  const nlohmann::json manifest{{"dtype", "f64le"}, {"tensors", tensors}};
  os << "DSGCKPT " << kCheckpointVersion << '\n' << manifest.dump() << '\n';
  for (const auto& p : store.all()) {
    for (double v : p.value().data()) {
      const std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      os.write(buf, 8);
    }
  }
  if (!os) throw Error("failed writing checkpoint");
}

/// Loads values into an existing store; names and shapes must match exactly.
inline void read_checkpoint(std::istream& is, ParamStore& store) {
  std::string magic;
  if (!std::getline(is, magic) || magic != "DSGCKPT " + std::to_string(kCheckpointVersion)) {
    throw ParseError(1, "not a version-" + std::to_string(kCheckpointVersion) + " checkpoint");
  }
  std::string line;
  if (!std::getline(is, line)) throw ParseError(2, "missing checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(2, e.what());
  }
  if (manifest.value("dtype", "") != "f64le") throw ParseError(2, "unsupported dtype");
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != store.all().size()) {
    throw ValidationError("checkpoint tensor count differs from the model");
  }
  std::vector<double> payload;
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.at("count").get<std::size_t>();
  payload.resize(total);
  for (std::size_t i = 0; i < total; ++i) {
    char buf[8];
    if (!is.read(buf, 8)) throw ValidationError("checkpoint payload truncated");
    std::uint64_t bits = 0;
    std::memcpy(&bits, buf, 8);
    payload[i] = std::bit_cast<double>(detail::to_little_endian(bits));
  }
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& t = tensors[k];
    auto& p = store.all()[k];
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (t.at("name").get<std::string>() != p.name || shape.size() != 2 ||
        shape[0] != p.value().rows() || shape[1] != p.value().cols()) {
      throw ValidationError("checkpoint tensor '" + t.at("name").get<std::string>() +
                            "' does not match model parameter '" + p.name + "'");
    }
    const auto offset = t.at("offset").get<std::size_t>();
    if (t.at("count").get<std::size_t>() != p.value().size() || offset > total ||
        total - offset < p.value().size()) {
      throw ValidationError("checkpoint tensor '" + p.name + "' lies outside the payload");
    }
    std::copy(payload.begin() + static_cast<std::ptrdiff_t>(offset),
              payload.begin() + static_cast<std::ptrdiff_t>(offset + p.value().size()),
              p.value().data().begin());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot open " + tmp.string());
    write_checkpoint(os, store);
  }
  std::filesystem::rename(tmp, path);
}

inline void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  read_checkpoint(is, store);
}

}  // namespace dsg::nn
