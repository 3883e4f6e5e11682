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
/// \brief Indexed access to a generated dataset directory.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "berrypose/error.hpp"
#include "berrypose/format.hpp"
#include "berrypose/image_io.hpp"

namespace berrypose {

struct LoadedSample {
  std::string id;
  RgbImage rgb;
  AnnotationFile ann;

  std::vector<OrientedBox3D> boxes() const {
    std::vector<OrientedBox3D> out;
    for (const Annotation& a : ann.instances) out.push_back(a.box);
    return out;
  }
};

/// Manifest plus every ann.json, validated up front. Images are read on demand.
class Dataset {
 public:
  Dataset() = default;

  const std::filesystem::path& root() const { return root_; }
  const Manifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.samples.size(); }
  const ManifestSample& sample(std::size_t i) const { return manifest_.samples.at(i); }
  const AnnotationFile& annotation(std::size_t i) const { return anns_.at(i); }
  std::filesystem::path sample_dir(std::size_t i) const { return root_ / sample(i).id; }

  std::vector<std::size_t> split(const std::string& name) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (name == "all" || manifest_.samples[i].split == name) out.push_back(i);
    return out;
  }

  LoadedSample load(std::size_t i) const {
    LoadedSample s;
    s.id = sample(i).id;
    s.ann = anns_.at(i);
    s.rgb = read_rgb_png(sample_dir(i) / "rgb.png");
    if (s.rgb.width != s.ann.width || s.rgb.height != s.ann.height)
      throw ValidationError((sample_dir(i) / "rgb.png").string(), "image size differs from ann.json");
    return s;
  }

  friend Dataset load_dataset(const std::filesystem::path& dir);

 private:
  std::filesystem::path root_;
  Manifest manifest_;
  std::vector<AnnotationFile> anns_;
};

/// Reads and validates manifest.json and every ann.json. Errors name the file
/// and the offending field.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.root_ = dir;
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError(manifest_path.string(), "missing manifest");
  try {
    d.manifest_ = manifest_from_json(read_json_file(manifest_path));
  } catch (const ValidationError& e) {
    throw ValidationError(manifest_path.string() + ": " + e.field(), e.reason());
  }
  for (const ManifestSample& s : d.manifest_.samples) {
    const auto sd = dir / s.id;
    for (const char* f : {"rgb.png", "depth.png", "mask.png", "ann.json"})
      if (!std::filesystem::exists(sd / f)) throw IoError((sd / f).string(), "missing file");
    try {
      d.anns_.push_back(annotation_from_json(read_json_file(sd / "ann.json")));
    } catch (const ValidationError& e) {
      throw ValidationError((sd / "ann.json").string() + ": " + e.field(), e.reason());
    }
  }
  return d;
}

}  // namespace berrypose
