// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tilefuse/error.hpp"

namespace tilefuse {

struct Normalization {
  std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> std{0.26862954, 0.26130258, 0.27577711};

  bool operator==(const Normalization&) const = default;
};

/// Channel-first RGB image with values in [0,1] before normalization.
struct ImageBuffer {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // (3,H,W)
  Normalization norm;

  static ImageBuffer filled(std::size_t width, std::size_t height, double v) {
    ImageBuffer img;
    img.width = width;
    img.height = height;
    img.values.assign(3 * width * height, v);
    return img;
  }

  Dims dims() const { return {3, height, width}; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }

  void validate() const {
    if (width == 0 || height == 0) throw UsageError("image: zero extent");
    if (values.size() != 3 * width * height) throw ShapeError("image: buffer does not match (3,H,W)");
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("image: non-finite pixel value");
    for (double s : norm.std)
      if (!(s > 0)) throw UsageError("image: normalization std must be positive");
  }
};

/// Writes `bytes` to `path` through a temporary sibling and a rename, so
/// readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval <= 255).

inline ImageBuffer decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space_and_comments();
    std::size_t v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      any = true;
      if (v > (1u << 24)) throw UsageError("ppm: header value too large");
    }
    if (!any) throw UsageError("ppm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw UsageError("ppm: not a binary P6 file");
  pos = 2;
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (w == 0 || h == 0) throw UsageError("ppm: zero extent");
  if (maxval == 0 || maxval > 255) throw UsageError("ppm: only 8-bit maxval is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw UsageError("ppm: malformed header");
  ++pos;
  if (bytes.size() - pos < 3 * w * h) throw UsageError("ppm: truncated pixel data");
  ImageBuffer img;
  img.width = w;
  img.height = h;
  img.values.resize(3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<unsigned char>(bytes[pos + (y * w + x) * 3 + c]) / static_cast<double>(maxval);
  return img;
}

inline std::string encode_ppm(const ImageBuffer& img) {
  std::ostringstream os;
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + 3 * img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Raw float planar format:
//   bytes 0..3   magic "RFP1"
//   uint32 LE    rank
//   uint32 LE    extent, repeated `rank` times (row-major, outermost first)
//   float32 LE   product(extents) values
// Images are rank 3 (C,H,W); token dumps are rank 3 (views, tokens, dim).

inline constexpr char kRawFloatMagic[4] = {'R', 'F', 'P', '1'};

struct RawFloatArray {
  Dims dims;
  std::vector<float> values;
};

namespace detail_io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (in.size() - pos < 4) throw UsageError("raw float: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail_io

template <class Range>
std::string encode_raw_float(const Dims& dims, const Range& values) {
  std::string out(kRawFloatMagic, 4);
  detail_io::put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto e : dims) detail_io::put_u32(out, static_cast<std::uint32_t>(e));
  std::size_t n = 0;
  for (auto v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail_io::put_u32(out, bits);
    ++n;
  }
  if (n != dims_count(dims)) throw ShapeError("raw float: value count does not match dims " + dims_str(dims));
  return out;
}

inline RawFloatArray decode_raw_float(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kRawFloatMagic, 4) != 0)
    throw UsageError("raw float: bad magic");
  std::size_t pos = 4;
  const std::uint32_t rank = detail_io::get_u32(bytes, pos);
  if (rank == 0 || rank > 8) throw UsageError("raw float: unsupported rank " + std::to_string(rank));
  RawFloatArray arr;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto e = detail_io::get_u32(bytes, pos);
    if (e == 0) throw UsageError("raw float: zero extent");
    arr.dims.push_back(e);
  }
  const std::size_t n = dims_count(arr.dims);
  if ((bytes.size() - pos) != 4 * n) throw UsageError("raw float: payload size does not match header");
  arr.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail_io::get_u32(bytes, pos);
    std::memcpy(&arr.values[i], &bits, 4);
  }
  return arr;
}

inline ImageBuffer image_from_raw(const RawFloatArray& arr) {
  if (arr.dims.size() != 3 || arr.dims[0] != 3)
    throw UsageError("raw float image must be (3,H,W), got " + dims_str(arr.dims));
  ImageBuffer img;
  img.height = arr.dims[1];
  img.width = arr.dims[2];
  img.values.assign(arr.values.begin(), arr.values.end());
  img.validate();
  return img;
}

/// Loads a P6 PPM or a raw float planar image, chosen by file signature.
inline ImageBuffer load_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  ImageBuffer img;
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kRawFloatMagic, 4) == 0) {
    img = image_from_raw(decode_raw_float(bytes));
  } else {
    img = decode_ppm(bytes);
  }
  img.validate();
  return img;
}

}  // namespace tilefuse
