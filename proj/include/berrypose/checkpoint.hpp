// Copyright 2026 The berrypose Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/// \file
/// \brief Self-describing checkpoint files.
///
/// Layout:
///   16 bytes   magic "BERRYPOSE-CKPT1\n"
///   8 bytes    header length N, little endian
///   N bytes    JSON header (model config, anchors, mean size, codec,
///              training state, tensor table)
///   rest       float32 little-endian tensor data at the offsets in the table

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/error.hpp"
#include "berrypose/format.hpp"
#include "berrypose/network.hpp"

namespace berrypose {

inline constexpr char kCheckpointMagic[17] = "BERRYPOSE-CKPT1\n";

struct Checkpoint {
  std::string kind = "pose";  ///< "pose", "detect2d" or "backbone"
  ModelConfig model;
  AnchorSet anchors;
  MeanSize means;
  CodecConfig codec;
  int epoch = 0;
  Json train = Json::object();  ///< training configuration, informational plus resume
  Json extra = Json::object();  ///< e.g. the RNG state of a run
  std::map<std::string, std::vector<float>> tensors;
};

inline Json to_json(const ModelConfig& c) {
  return {{"backbone", c.backbone},         {"input_width", c.input_width},
          {"input_height", c.input_height}, {"anchors", c.anchors},
          {"stride", c.stride},             {"channels", c.channels},
          {"values_per_anchor", c.values_per_anchor}, {"head_conf_bias", c.head_conf_bias},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.backbone = detail::string(detail::field(j, "model", "backbone"), "model.backbone");
  c.input_width = detail::integer(detail::field(j, "model", "input_width"), "model.input_width");
  c.input_height = detail::integer(detail::field(j, "model", "input_height"), "model.input_height");
  c.anchors = detail::integer(detail::field(j, "model", "anchors"), "model.anchors");
  c.stride = detail::integer(detail::field(j, "model", "stride"), "model.stride");
  c.values_per_anchor = detail::integer(detail::field(j, "model", "values_per_anchor"), "model.values_per_anchor");
  c.channels.clear();
  const Json& ch = detail::field(j, "model", "channels");
  if (!ch.is_array()) throw ValidationError("model.channels", "expected an array");
  for (std::size_t i = 0; i < ch.size(); ++i) c.channels.push_back(detail::integer(ch[i], detail::index("model.channels", i)));
  if (j.contains("head_conf_bias")) c.head_conf_bias = j["head_conf_bias"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

inline Json to_json(const AnchorSet& a) {
  Json j = Json::array();
  for (const Anchor& p : a.priors()) j.push_back({p.w, p.h});
  return j;
}

inline AnchorSet anchors_from_json(const Json& j) {
  if (!j.is_array() || j.empty()) throw ValidationError("anchors", "expected a non-empty array");
  std::vector<Anchor> p;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto v = detail::numbers<2>(j[i], detail::index("anchors", i));
    p.push_back({v[0], v[1]});
  }
  return AnchorSet(std::move(p));
}

inline Json to_json(const CodecConfig& c) {
  return {{"alpha", c.alpha},
          {"distance_threshold", c.distance_threshold},
          {"conf_threshold", c.conf_threshold},
          {"nms_iou", c.nms_iou}};
}

inline CodecConfig codec_from_json(const Json& j) {
  CodecConfig c;
  c.alpha = detail::positive(detail::field(j, "codec", "alpha"), "codec.alpha");
  c.distance_threshold = detail::positive(detail::field(j, "codec", "distance_threshold"), "codec.distance_threshold");
  c.conf_threshold = detail::number(detail::field(j, "codec", "conf_threshold"), "codec.conf_threshold");
  c.nms_iou = detail::number(detail::field(j, "codec", "nms_iou"), "codec.nms_iou");
  return c;
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_floats(std::ostream& os, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (float f : v) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                  static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

}  // namespace detail

/// Writes to a temporary file and renames it into place, so an interrupted
/// save never clobbers a previous good checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Json table = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, v] : c.tensors) {
    table.push_back({{"name", name}, {"size", v.size()}, {"offset", offset}});
    offset += v.size() * 4;
  }
  const Json header = {{"kind", c.kind},
                       {"model", to_json(c.model)},
                       {"grid", {{"cells_x", c.model.grid().cells_x},
                                 {"cells_y", c.model.grid().cells_y},
                                 {"stride", c.model.stride},
                                 {"anchors", c.model.anchors}}},
                       {"anchors", to_json(c.anchors)},
                       {"mean_size", to_json(c.means)},
                       {"codec", to_json(c.codec)},
                       {"epoch", c.epoch},
                       {"train", c.train},
                       {"extra", c.extra},
                       {"dtype", "float32"},
                       {"tensors", table}};
  const std::string text = header.dump();
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError(tmp.string(), "cannot open for writing");
    os.write(kCheckpointMagic, 16);
    detail::put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, v] : c.tensors) detail::put_floats(os, v);
    if (!os) throw IoError(tmp.string(), "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string(), "cannot move checkpoint into place: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string(), "cannot open checkpoint");
  char magic[16];
  is.read(magic, 16);
  if (!is || std::memcmp(magic, kCheckpointMagic, 16) != 0) throw IoError(path.string(), "not a checkpoint");
  unsigned char lb[8];
  is.read(reinterpret_cast<char*>(lb), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
  const auto file_size = std::filesystem::file_size(path);
  if (!is || len > file_size) throw IoError(path.string(), "truncated header");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  Json h;
  try {
    h = Json::parse(text);
  } catch (const Json::exception& e) {
    throw IoError(path.string(), std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint c;
  try {
    c.kind = detail::string(detail::field(h, "", "kind"), "kind");
    c.model = model_config_from_json(detail::field(h, "", "model"));
    c.anchors = anchors_from_json(detail::field(h, "", "anchors"));
    const Json& ms = detail::field(h, "", "mean_size");
    c.means = {detail::positive(detail::field(ms, "mean_size", "h"), "mean_size.h"),
               detail::positive(detail::field(ms, "mean_size", "w"), "mean_size.w"),
               detail::positive(detail::field(ms, "mean_size", "l"), "mean_size.l")};
    c.codec = codec_from_json(detail::field(h, "", "codec"));
    c.epoch = detail::integer(detail::field(h, "", "epoch"), "epoch");
    c.train = h.value("train", Json::object());
    c.extra = h.value("extra", Json::object());
  } catch (const ValidationError& e) {
    throw IoError(path.string(), e.what());
  }
  const std::uint64_t data_start = 24 + len;
  for (const Json& t : detail::field(h, "", "tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::uint64_t n = t.at("size").get<std::uint64_t>();
    const std::uint64_t off = t.at("offset").get<std::uint64_t>();
    if (data_start + off + 4 * n > file_size) throw IoError(path.string(), "truncated tensor '" + name + "'");
    std::vector<float> v(n);
    is.seekg(static_cast<std::streamoff>(data_start + off));
    std::vector<unsigned char> raw(4 * n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::uint32_t u = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                              (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
      v[i] = std::bit_cast<float>(u);
    }
    if (!is) throw IoError(path.string(), "read failed");
    c.tensors[name] = std::move(v);
  }
  return c;
}

/// Model state, plus optimizer velocities under "opt." names when asked.
inline std::map<std::string, std::vector<float>> capture_state(Model<float>& m, bool with_optimizer) {
  std::map<std::string, std::vector<float>> out;
  for (auto& [name, v] : m.state()) out[name] = *v;
  if (with_optimizer)
    for (nn::Param<float>* p : m.params()) out["opt." + p->name] = p->velocity;
  return out;
}

inline void restore_optimizer(Model<float>& m, const std::map<std::string, std::vector<float>>& t) {
  for (nn::Param<float>* p : m.params()) {
    const auto it = t.find("opt." + p->name);
    if (it != t.end() && it->second.size() == p->velocity.size()) p->velocity = it->second;
  }
}

/// Builds the model stored in `c` and loads its weights. Throws when any
/// tensor is missing.
inline std::unique_ptr<Model<float>> model_from_checkpoint(const Checkpoint& c) {
  auto m = build_model<float>(c.model);
  const auto missing = m->load_state(c.tensors);
  if (!missing.empty()) throw ConfigError("checkpoint: missing tensor '" + missing.front() + "'");
  return m;
}

}  // namespace berrypose
