#pragma once

// PSNR and SSIM over Image pairs, optionally on the BT.601 luma channel and
// with a border shaved off each side.

#include <cmath>
#include <limits>
#include <vector>

#include "xrestormer/image.hpp"

namespace xrestormer {

struct MetricConfig {
  bool use_y_channel = false;
  std::size_t crop_border = 0;
  double data_range = 1.0;
};

/// Returned by psnr() for identical inputs. Never average it.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// BT.601 luma in the limited range: Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255.
inline Image rgb_to_y(const Image& im) {
  if (im.channels != 3) throw ContractError("rgb_to_y needs 3 channels, got " + std::to_string(im.channels));
  Image y(im.height, im.width, 1);
  for (std::size_t p = 0; p < im.pixels(); ++p) {
    const double* px = &im.data[p * 3];
    y.data[p] = (65.481 * px[0] + 128.553 * px[1] + 24.966 * px[2] + 16.0) / 255.0;
  }
  return y;
}

namespace detail {

inline std::pair<Image, Image> metric_inputs(const Image& a, const Image& b, const MetricConfig& cfg,
                                             std::size_t min_extent) {
  if (!a.same_shape(b)) {
    throw ContractError("metric: image shapes differ (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                        "x" + std::to_string(a.channels) + " vs " + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + "x" + std::to_string(b.channels) + ")");
  }
  const std::size_t border = cfg.crop_border;
  if (a.height < 2 * border + min_extent || a.width < 2 * border + min_extent) {
    throw ContractError("metric: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " image with border " +
                        std::to_string(border) + " leaves less than " + std::to_string(min_extent) + " pixels");
  }
  auto prep = [&](const Image& im) {
    Image out = cfg.use_y_channel ? rgb_to_y(im) : im;
    if (border) out = crop(out, border, border, out.height - 2 * border, out.width - 2 * border);
    return out;
  };
  return {prep(a), prep(b)};
}

}  // namespace detail

/// 10 log10(range^2 / MSE); kPsnrIdentical when MSE = 0.
inline double psnr(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  const auto [x, y] = detail::metric_inputs(a, b, cfg, 1);
  double se = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = x.data[i] - y.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.data.size());
  if (mse == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(cfg.data_range * cfg.data_range / mse);
}

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Separable 'valid' filtering of one channel plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * plane[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region,
/// averaged over channels.
inline double ssim(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  constexpr std::size_t kWindow = 11;
  const auto [x, y] = detail::metric_inputs(a, b, cfg, kWindow);
  const double c1 = std::pow(0.01 * cfg.data_range, 2), c2 = std::pow(0.03 * cfg.data_range, 2);
  const auto k = detail::gaussian_window(kWindow, 1.5);
  const std::size_t H = x.height, W = x.width, C = x.channels;
  double total = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> p(H * W), q(H * W), pp(H * W), qq(H * W), pq(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
      p[i] = x.data[i * C + c];
      q[i] = y.data[i * C + c];
      pp[i] = p[i] * p[i];
      qq[i] = q[i] * q[i];
      pq[i] = p[i] * q[i];
    }
    const auto mu_p = detail::filter_valid(p, H, W, k), mu_q = detail::filter_valid(q, H, W, k);
    const auto e_pp = detail::filter_valid(pp, H, W, k), e_qq = detail::filter_valid(qq, H, W, k);
    const auto e_pq = detail::filter_valid(pq, H, W, k);
    double sum = 0.0;
    for (std::size_t i = 0; i < mu_p.size(); ++i) {
      const double mp = mu_p[i], mq = mu_q[i];
      const double vp = e_pp[i] - mp * mp, vq = e_qq[i] - mq * mq, cov = e_pq[i] - mp * mq;
      sum += ((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2));
    }
    total += sum / static_cast<double>(mu_p.size());
  }
  return total / static_cast<double>(C);
}

}  // namespace xrestormer
