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
/// \brief PNG read/write for 8-bit RGB and 16-bit single-channel images.

#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "berrypose/error.hpp"

namespace berrypose {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  ///< row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t* at(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

struct Gray16Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> data;

  Gray16Image() = default;
  Gray16Image(int w, int h, std::uint16_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}
  std::uint16_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

// rows: height pointers to big-endian or byte rows as libpng wants them
inline void write_png(const std::filesystem::path& path, int width, int height, int color_type,
                      int bit_depth, const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw IoError(path.string(), "cannot open for writing");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string(), "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string(), "png write failed: " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& r : rows) png_write_row(png, r.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw IoError(path.string(), "write failed");
}

struct RawPng {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::vector<png_byte>> rows;
};

inline RawPng read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError(path.string(), "cannot open for reading");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError(path.string(), "not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string(), "libpng init failed");
  }
  RawPng out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string(), "png read failed: " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.rows.assign(static_cast<std::size_t>(out.height), std::vector<png_byte>(rowbytes));
  for (auto& r : out.rows) png_read_row(png, r.data(), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[y].assign(img.at(0, y), img.at(0, y) + static_cast<std::size_t>(img.width) * 3);
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

inline void write_png(const std::filesystem::path& path, const Gray16Image& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height),
                                          std::vector<png_byte>(static_cast<std::size_t>(img.width) * 2));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.at(x, y);
      rows[y][2 * x] = static_cast<png_byte>(v >> 8);
      rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

/// Reads any 8-bit PNG as RGB (gray is replicated, alpha dropped).
inline RgbImage read_rgb_png(const std::filesystem::path& path) {
  const detail::RawPng raw = detail::read_png(path);
  if (raw.bit_depth != 8) throw IoError(path.string(), "expected an 8-bit PNG");
  RgbImage img(raw.width, raw.height);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      const png_byte* p = raw.rows[y].data() + static_cast<std::size_t>(x) * raw.channels;
      std::uint8_t* q = img.at(x, y);
      if (raw.channels >= 3) {
        q[0] = p[0];
        q[1] = p[1];
        q[2] = p[2];
      } else {
        q[0] = q[1] = q[2] = p[0];
      }
    }
  return img;
}

inline Gray16Image read_gray16_png(const std::filesystem::path& path) {
  const detail::RawPng raw = detail::read_png(path);
  if (raw.bit_depth != 16 || raw.channels != 1)
    throw IoError(path.string(), "expected a 16-bit single-channel PNG");
  Gray16Image img(raw.width, raw.height);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      img.at(x, y) = static_cast<std::uint16_t>((raw.rows[y][2 * x] << 8) | raw.rows[y][2 * x + 1]);
  return img;
}

}  // namespace berrypose
