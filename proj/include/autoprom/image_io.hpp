#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "autoprom/error.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

/// 8-bit RGB PNG -> [3, H, W] floats v / 255.
inline Tensor<float> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw ValidationError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ValidationError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const std::size_t h = image.height, w = image.width;
  Tensor<float> t({3, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        t[(ch * h + r) * w + c] = static_cast<float>(buf[(r * w + c) * 3 + ch]) / 255.0f;
  return t;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// [3, H, W] floats in [0, 1] -> 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const Tensor<float>& img) {
  require_rank(img, 3, "write_png");
  if (img.dim(0) != 3) throw ShapeError("write_png: expected 3 channels, got " + shape_str(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> buf(h * w * 3);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) buf[(r * w + c) * 3 + ch] = to_byte(img[(ch * h + r) * w + c]);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw RuntimeAbort("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace autoprom
