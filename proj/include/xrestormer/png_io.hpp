#pragma once

// 8-bit RGB PNG through libpng's simplified API. Reading yields byte/255;
// writing stores floor(clip(x, 0, 1) * 255 + 0.5), so 0.5 becomes 128.
// Gray and palette files are expanded to RGB, alpha is composited on black.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xrestormer/image.hpp"

namespace xrestormer {

inline std::uint8_t quantize_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

inline Image read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError(path + ": " + img.message);
  }
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw IoError(path + ": 16-bit PNG, expected 8-bit");
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&img, &black, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError(path + ": " + msg);
  }
  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = bytes[i] / 255.0;
  return out;
}

inline void write_png(const std::string& path, const Image& im) {
  if (im.channels != 3) throw ContractError("write_png needs 3 channels, got " + std::to_string(im.channels));
  if (im.height == 0 || im.width == 0) throw ContractError("write_png: empty image");
  std::vector<std::uint8_t> bytes(im.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_byte(im.data[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError(path + ": " + img.message);
  }
}

}  // namespace xrestormer
