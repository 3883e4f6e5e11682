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
/// \brief JSON forms of annotations, manifests and detections.
///
/// Parsing is strict: every violation raises ValidationError carrying the
/// path of the offending field, e.g. `instances[2].size[0]`.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/error.hpp"
#include "berrypose/geometry.hpp"
#include "json.hpp"

namespace berrypose {

using Json = nlohmann::json;

inline constexpr const char* kManifestFormat = "berrypose-dataset";
inline constexpr int kFormatVersion = 1;

struct Annotation {
  int id = 0;  ///< value of this instance in mask.png
  OrientedBox3D box;
  double maturity = 0.0;
  double visible_fraction = 1.0;
  bool truncated = false;
};

struct AnnotationFile {
  int width = 0;
  int height = 0;
  CameraIntrinsics intrinsics;
  std::vector<Annotation> instances;
};

struct ManifestSample {
  std::string id;
  std::string split;  ///< "train" or "test"
};

struct Manifest {
  int count = 0;
  std::uint64_t seed = 0;
  int width = 0;
  int height = 0;
  std::vector<ManifestSample> samples;
  MeanSize mean_size;
  Json generator;  ///< generator settings, informational

  int split_count(const std::string& split) const {
    int n = 0;
    for (const auto& s : samples) n += s.split == split;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Reading helpers

namespace detail {

inline std::string join(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}
inline std::string index(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

inline const Json& field(const Json& j, const std::string& base, const std::string& key) {
  if (!j.is_object()) throw ValidationError(base.empty() ? "$" : base, "expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ValidationError(join(base, key), "missing");
  return *it;
}

inline double number(const Json& j, const std::string& path) {
  if (!j.is_number()) throw ValidationError(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ValidationError(path, "not finite");
  return v;
}

inline double positive(const Json& j, const std::string& path) {
  const double v = number(j, path);
  if (!(v > 0.0)) throw ValidationError(path, "must be positive");
  return v;
}

inline int integer(const Json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ValidationError(path, "expected an integer");
  return j.get<int>();
}

inline std::string string(const Json& j, const std::string& path) {
  if (!j.is_string()) throw ValidationError(path, "expected a string");
  return j.get<std::string>();
}

template <std::size_t N>
std::array<double, N> numbers(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != N)
    throw ValidationError(path, "expected an array of " + std::to_string(N) + " numbers");
  std::array<double, N> out;
  for (std::size_t i = 0; i < N; ++i) out[i] = number(j[i], index(path, i));
  return out;
}

}  // namespace detail

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw IoError(path.string(), std::string("malformed JSON: ") + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(path.string(), "write failed");
}

// ---------------------------------------------------------------------------
// Pieces

inline Json to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

inline Json to_json(const Pose& p) {
  const auto& q = p.rotation.quaternion();
  return {{"translation", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"rotation", {q.w(), q.x(), q.y(), q.z()}}};
}

inline Json to_json(const Size3D& s) { return Json::array({s.h, s.w, s.l}); }

inline Json to_json(const MeanSize& m) { return {{"h", m.h}, {"w", m.w}, {"l", m.l}}; }

inline Json to_json(const Keypoints2D& k) {
  Json a = Json::array();
  for (const Vec2& p : k) a.push_back({p.x(), p.y()});
  return a;
}

inline CameraIntrinsics intrinsics_from_json(const Json& j, const std::string& path, int width,
                                             int height) {
  CameraIntrinsics k;
  k.fx = detail::positive(detail::field(j, path, "fx"), detail::join(path, "fx"));
  k.fy = detail::positive(detail::field(j, path, "fy"), detail::join(path, "fy"));
  k.cx = detail::number(detail::field(j, path, "cx"), detail::join(path, "cx"));
  k.cy = detail::number(detail::field(j, path, "cy"), detail::join(path, "cy"));
  k.width = width;
  k.height = height;
  return k;
}

/// Rotation from a wxyz array; the norm must be within 1e-3 of one.
inline Rotation rotation_from_json(const Json& j, const std::string& path) {
  const auto q = detail::numbers<4>(j, path);
  const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (std::abs(n - 1.0) > 1e-3) throw ValidationError(path, "quaternion norm is " + std::to_string(n));
  return Rotation::from_wxyz(q[0], q[1], q[2], q[3]);
}

inline Size3D size_from_json(const Json& j, const std::string& path) {
  const auto s = detail::numbers<3>(j, path);
  for (std::size_t i = 0; i < 3; ++i)
    if (!(s[i] > 0.0)) throw ValidationError(detail::index(path, i), "size must be positive");
  return {s[0], s[1], s[2]};
}

inline Vec3 vec3_from_json(const Json& j, const std::string& path) {
  const auto v = detail::numbers<3>(j, path);
  return {v[0], v[1], v[2]};
}

// ---------------------------------------------------------------------------
// ann.json

inline Json to_json(const AnnotationFile& a) {
  Json inst = Json::array();
  for (const Annotation& x : a.instances) {
    const Json pose = to_json(x.box.pose);
    inst.push_back({{"id", x.id},
                    {"translation", pose["translation"]},
                    {"rotation", pose["rotation"]},
                    {"size", to_json(x.box.size)},
                    {"maturity", x.maturity},
                    {"visible_fraction", x.visible_fraction},
                    {"truncated", x.truncated}});
  }
  return {{"image", {{"width", a.width}, {"height", a.height}}},
          {"intrinsics", to_json(a.intrinsics)},
          {"instances", inst}};
}

inline AnnotationFile annotation_from_json(const Json& j) {
  AnnotationFile a;
  const Json& img = detail::field(j, "", "image");
  a.width = detail::integer(detail::field(img, "image", "width"), "image.width");
  a.height = detail::integer(detail::field(img, "image", "height"), "image.height");
  if (a.width <= 0) throw ValidationError("image.width", "must be positive");
  if (a.height <= 0) throw ValidationError("image.height", "must be positive");
  a.intrinsics = intrinsics_from_json(detail::field(j, "", "intrinsics"), "intrinsics", a.width, a.height);
  const Json& inst = detail::field(j, "", "instances");
  if (!inst.is_array()) throw ValidationError("instances", "expected an array");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const std::string p = detail::index("instances", i);
    const Json& x = inst[i];
    Annotation an;
    an.id = detail::integer(detail::field(x, p, "id"), detail::join(p, "id"));
    if (an.id < 1 || an.id > 65535) throw ValidationError(detail::join(p, "id"), "must be in [1, 65535]");
    an.box.pose.translation = vec3_from_json(detail::field(x, p, "translation"), detail::join(p, "translation"));
    an.box.pose.rotation = rotation_from_json(detail::field(x, p, "rotation"), detail::join(p, "rotation"));
    an.box.size = size_from_json(detail::field(x, p, "size"), detail::join(p, "size"));
    an.maturity = detail::number(detail::field(x, p, "maturity"), detail::join(p, "maturity"));
    if (an.maturity < 0.0 || an.maturity > 1.0)
      throw ValidationError(detail::join(p, "maturity"), "must be in [0, 1]");
    an.visible_fraction =
        detail::number(detail::field(x, p, "visible_fraction"), detail::join(p, "visible_fraction"));
    if (an.visible_fraction < 0.0 || an.visible_fraction > 1.0)
      throw ValidationError(detail::join(p, "visible_fraction"), "must be in [0, 1]");
    const Json& tr = detail::field(x, p, "truncated");
    if (!tr.is_boolean()) throw ValidationError(detail::join(p, "truncated"), "expected a boolean");
    an.truncated = tr.get<bool>();
    a.instances.push_back(an);
  }
  return a;
}

// ---------------------------------------------------------------------------
// manifest.json

inline Json to_json(const Manifest& m) {
  Json samples = Json::array();
  for (const auto& s : m.samples) samples.push_back({{"id", s.id}, {"split", s.split}});
  return {{"format", kManifestFormat},
          {"version", kFormatVersion},
          {"count", m.count},
          {"seed", m.seed},
          {"image", {{"width", m.width}, {"height", m.height}}},
          {"splits", {{"train", m.split_count("train")}, {"test", m.split_count("test")}}},
          {"mean_size", to_json(m.mean_size)},
          {"samples", samples},
          {"generator", m.generator.is_null() ? Json::object() : m.generator}};
}

inline Manifest manifest_from_json(const Json& j) {
  Manifest m;
  if (detail::string(detail::field(j, "", "format"), "format") != kManifestFormat)
    throw ValidationError("format", std::string("expected '") + kManifestFormat + "'");
  if (detail::integer(detail::field(j, "", "version"), "version") != kFormatVersion)
    throw ValidationError("version", "unsupported version");
  m.count = detail::integer(detail::field(j, "", "count"), "count");
  if (m.count < 0) throw ValidationError("count", "must be non-negative");
  const Json& seed = detail::field(j, "", "seed");
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) throw ValidationError("seed", "expected an integer");
  m.seed = seed.get<std::uint64_t>();
  const Json& img = detail::field(j, "", "image");
  m.width = detail::integer(detail::field(img, "image", "width"), "image.width");
  m.height = detail::integer(detail::field(img, "image", "height"), "image.height");
  const Json& ms = detail::field(j, "", "mean_size");
  m.mean_size.h = detail::positive(detail::field(ms, "mean_size", "h"), "mean_size.h");
  m.mean_size.w = detail::positive(detail::field(ms, "mean_size", "w"), "mean_size.w");
  m.mean_size.l = detail::positive(detail::field(ms, "mean_size", "l"), "mean_size.l");
  const Json& samples = detail::field(j, "", "samples");
  if (!samples.is_array()) throw ValidationError("samples", "expected an array");
  if (samples.size() != static_cast<std::size_t>(m.count))
    throw ValidationError("samples", "length differs from count");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string p = detail::index("samples", i);
    ManifestSample s;
    s.id = detail::string(detail::field(samples[i], p, "id"), detail::join(p, "id"));
    if (s.id.empty() || s.id.find('/') != std::string::npos || s.id.find("..") != std::string::npos)
      throw ValidationError(detail::join(p, "id"), "not a plain directory name");
    s.split = detail::string(detail::field(samples[i], p, "split"), detail::join(p, "split"));
    if (s.split != "train" && s.split != "test")
      throw ValidationError(detail::join(p, "split"), "must be 'train' or 'test'");
    m.samples.push_back(s);
  }
  const Json& splits = detail::field(j, "", "splits");
  const int tr = detail::integer(detail::field(splits, "splits", "train"), "splits.train");
  const int te = detail::integer(detail::field(splits, "splits", "test"), "splits.test");
  if (tr != m.split_count("train")) throw ValidationError("splits.train", "does not match samples");
  if (te != m.split_count("test")) throw ValidationError("splits.test", "does not match samples");
  if (j.contains("generator")) m.generator = j["generator"];
  return m;
}

// ---------------------------------------------------------------------------
// Detections (infer output and eval input)

struct DetectionFile {
  std::string image;
  CameraIntrinsics intrinsics;
  int width = 0;
  int height = 0;
  std::vector<Detection> detections;
};

inline Json to_json(const Detection& d) {
  Json j = {{"confidence", d.confidence},
            {"keypoints", to_json(d.keypoints)},
            {"size", to_json(d.size)},
            {"cell", {d.cell_y, d.cell_x}},
            {"anchor", d.anchor},
            {"pose_failed", d.pose_failed}};
  if (d.pose) j["pose"] = to_json(*d.pose);
  else j["pose"] = nullptr;
  return j;
}

inline Json to_json(const DetectionFile& f) {
  Json dets = Json::array();
  for (const Detection& d : f.detections) dets.push_back(to_json(d));
  return {{"image", f.image},
          {"width", f.width},
          {"height", f.height},
          {"intrinsics", to_json(f.intrinsics)},
          {"detections", dets}};
}

inline DetectionFile detections_from_json(const Json& j) {
  DetectionFile f;
  f.image = detail::string(detail::field(j, "", "image"), "image");
  f.width = detail::integer(detail::field(j, "", "width"), "width");
  f.height = detail::integer(detail::field(j, "", "height"), "height");
  f.intrinsics = intrinsics_from_json(detail::field(j, "", "intrinsics"), "intrinsics", f.width, f.height);
  const Json& dets = detail::field(j, "", "detections");
  if (!dets.is_array()) throw ValidationError("detections", "expected an array");
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const std::string p = detail::index("detections", i);
    const Json& x = dets[i];
    Detection d;
    d.confidence = detail::number(detail::field(x, p, "confidence"), detail::join(p, "confidence"));
    if (d.confidence < 0.0 || d.confidence > 1.0)
      throw ValidationError(detail::join(p, "confidence"), "must be in [0, 1]");
    const Json& kp = detail::field(x, p, "keypoints");
    const std::string kpp = detail::join(p, "keypoints");
    if (!kp.is_array() || kp.size() != kNumKeypoints)
      throw ValidationError(kpp, "expected 9 points");
    for (int k = 0; k < kNumKeypoints; ++k) {
      const auto v = detail::numbers<2>(kp[k], detail::index(kpp, k));
      d.keypoints[k] = Vec2(v[0], v[1]);
    }
    d.size = size_from_json(detail::field(x, p, "size"), detail::join(p, "size"));
    if (x.contains("cell")) {
      const auto c = detail::numbers<2>(x["cell"], detail::join(p, "cell"));
      d.cell_y = static_cast<int>(c[0]);
      d.cell_x = static_cast<int>(c[1]);
    }
    if (x.contains("anchor")) d.anchor = detail::integer(x["anchor"], detail::join(p, "anchor"));
    if (x.contains("pose_failed") && x["pose_failed"].is_boolean()) d.pose_failed = x["pose_failed"].get<bool>();
    if (x.contains("pose") && !x["pose"].is_null()) {
      const std::string pp = detail::join(p, "pose");
      Pose pose;
      pose.translation = vec3_from_json(detail::field(x["pose"], pp, "translation"), detail::join(pp, "translation"));
      pose.rotation = rotation_from_json(detail::field(x["pose"], pp, "rotation"), detail::join(pp, "rotation"));
      d.pose = pose;
    }
    f.detections.push_back(d);
  }
  return f;
}

}  // namespace berrypose
