#pragma once

// Interleaved HWC images with double samples, nominally in [0,1].

#include <algorithm>
#include <cstddef>
#include <vector>

#include "xrestormer/tensor.hpp"

namespace xrestormer {

struct Image {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
  std::size_t pixels() const { return height * width; }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

inline Image flip_horizontal(const Image& im) {
  Image out(im.height, im.width, im.channels);
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(y, im.width - 1 - x, c);
  return out;
}

inline Image flip_vertical(const Image& im) {
  Image out(im.height, im.width, im.channels);
  for (std::size_t y = 0; y < im.height; ++y)
    std::copy_n(im.data.begin() + (im.height - 1 - y) * im.width * im.channels, im.width * im.channels,
                out.data.begin() + y * im.width * im.channels);
  return out;
}

inline Image crop(const Image& im, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > im.height || left + w > im.width) {
    throw ContractError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(top) +
                        "," + std::to_string(left) + ") outside " + std::to_string(im.height) + "x" +
                        std::to_string(im.width));
  }
  Image out(h, w, im.channels);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(im.data.begin() + ((top + y) * im.width + left) * im.channels, w * im.channels,
                out.data.begin() + y * w * im.channels);
  return out;
}

inline Image clamp01(Image im) {
  for (double& v : im.data) v = std::clamp(v, 0.0, 1.0);
  return im;
}

/// Stacks equally sized images into a [B, C, H, W] tensor.
template <class T>
Tensor<T> to_tensor(const std::vector<Image>& batch) {
  if (batch.empty()) throw ContractError("to_tensor: empty batch");
  const Image& first = batch.front();
  const std::size_t C = first.channels, H = first.height, W = first.width;
  Tensor<T> t(Shape{batch.size(), C, H, W});
  auto d = t.data();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (!batch[b].same_shape(first)) throw ShapeError("to_tensor: images differ in shape");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          d[((b * C + c) * H + y) * W + x] = static_cast<T>(batch[b].at(y, x, c));
  }
  return t;
}

template <class T>
Tensor<T> to_tensor(const Image& im) {
  return to_tensor<T>(std::vector<Image>{im});
}

/// Batch entry `b` of a [B, C, H, W] tensor.
template <class T>
Image to_image(const Tensor<T>& t, std::size_t b = 0) {
  if (t.rank() != 4 || b >= t.dim(0)) throw ShapeError("to_image: bad tensor " + shape_str(t.shape()));
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Image im(H, W, C);
  auto d = t.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) im.at(y, x, c) = d[((b * C + c) * H + y) * W + x];
  return im;
}

}  // namespace xrestormer
