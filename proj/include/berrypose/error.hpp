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

#pragma once

#include <stdexcept>
#include <string>

namespace berrypose {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A 3D point with z <= 1e-6 was handed to the pinhole projection.
class BehindCameraError : public Error {
 public:
  using Error::Error;
};

/// Tensor or grid dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (ranges, divisibility, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Schema violation in an on-disk record. `field()` is a JSON-pointer-like path.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)), reason_(what) {}
  const std::string& field() const noexcept { return field_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string field_;
  std::string reason_;
};

/// File system failure. `path()` names the offending file.
class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// PnP diverged or produced a pose with points behind the camera.
class PnPError : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN/Inf loss.
class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace berrypose
