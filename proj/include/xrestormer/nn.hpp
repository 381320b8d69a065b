#pragma once

// Convolution, normalisation, resampling and window partitioning over
// [B, C, H, W] feature maps.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "xrestormer/ops.hpp"

namespace xrestormer {

enum class PadMode { zeros, reflect };

namespace detail {

/// Source index for padded position `i` (may be negative) in an axis of
/// extent n. Reflection excludes the edge sample and folds repeatedly, so any
/// pad width is legal; an extent-1 axis replicates.
inline std::size_t reflect_index(long long i, long long n) {
  if (n == 1) return 0;
  const long long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

}  // namespace detail

/// Pads the two spatial axes of [B, C, H, W].
template <class T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right, PadMode mode) {
  if (x.rank() != 4) throw ShapeError("pad2d expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == 0 || W == 0) throw ShapeError("pad2d on empty spatial extent " + shape_str(x.shape()));
  const std::size_t Hp = H + top + bottom, Wp = W + left + right;
  std::vector<std::size_t> rows(Hp), cols(Wp);
  auto source = [mode](long long i, long long n) -> std::size_t {
    if (mode == PadMode::reflect) return detail::reflect_index(i, n);
    return (i < 0 || i >= n) ? detail::kNoSource : static_cast<std::size_t>(i);
  };
  for (std::size_t r = 0; r < Hp; ++r) rows[r] = source(static_cast<long long>(r) - static_cast<long long>(top), H);
  for (std::size_t c = 0; c < Wp; ++c) cols[c] = source(static_cast<long long>(c) - static_cast<long long>(left), W);
  auto map = std::make_shared<std::vector<std::size_t>>(planes * Hp * Wp);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < Hp; ++r) {
      for (std::size_t c = 0; c < Wp; ++c) {
        const bool inside = rows[r] != detail::kNoSource && cols[c] != detail::kNoSource;
        (*map)[(p * Hp + r) * Wp + c] = inside ? (p * H + rows[r]) * W + cols[c] : detail::kNoSource;
      }
    }
  }
  return gather<T>(x, Shape{x.dim(0), x.dim(1), Hp, Wp}, std::move(map));
}

/// Spatial window [top, top+h) x [left, left+w) of [B, C, H, W].
template <class T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (x.rank() != 4 || top + h > x.dim(2) || left + w > x.dim(3)) {
    throw ShapeError("crop2d window out of range for " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto map = std::make_shared<std::vector<std::size_t>>(planes * h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) (*map)[(p * h + r) * w + c] = (p * H + top + r) * W + left + c;
  return gather<T>(x, Shape{x.dim(0), x.dim(1), h, w}, std::move(map));
}

template <class T>
struct Conv2dParams {
  Tensor<T> weight;  // [out_ch, in_ch / groups, kh, kw]
  Tensor<T> bias;    // [out_ch], or undefined for none
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  PadMode pad_mode = PadMode::zeros;
};

namespace detail {

/// Copies the receptive fields of one group into rows (ic, ky, kx) of a
/// [Cg*KH*KW, OH*OW] matrix. `plane` points at the group's first channel.
template <class T>
void im2col(const T* plane, std::size_t Cg, std::size_t H, std::size_t W, std::size_t KH, std::size_t KW,
            std::size_t stride, std::size_t OH, std::size_t OW, T* col) {
  for (std::size_t ic = 0; ic < Cg; ++ic) {
    for (std::size_t ky = 0; ky < KH; ++ky) {
      for (std::size_t kx = 0; kx < KW; ++kx) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const T* src = plane + (ic * H + oy * stride + ky) * W + kx;
          if (stride == 1) {
            std::copy_n(src, OW, col);
          } else {
            for (std::size_t ox = 0; ox < OW; ++ox) col[ox] = src[ox * stride];
          }
          col += OW;
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds the rows back onto the input planes.
template <class T>
void col2im_add(const T* col, std::size_t Cg, std::size_t H, std::size_t W, std::size_t KH, std::size_t KW,
                std::size_t stride, std::size_t OH, std::size_t OW, T* plane) {
  for (std::size_t ic = 0; ic < Cg; ++ic) {
    for (std::size_t ky = 0; ky < KH; ++ky) {
      for (std::size_t kx = 0; kx < KW; ++kx) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          T* dst = plane + (ic * H + oy * stride + ky) * W + kx;
          for (std::size_t ox = 0; ox < OW; ++ox) dst[ox * stride] += col[ox];
          col += OW;
        }
      }
    }
  }
}

}  // namespace detail

/// Unpadded cross-correlation (no kernel flip). For every output element the
/// bias is added first, then products accumulate in (in_ch, ky, kx) order.
template <class T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                       std::size_t stride, std::size_t groups) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected [B,C,H,W] input and 4-d weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(weight.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = weight.dim(0), Cg = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  if (groups == 0 || stride == 0 || Cin % groups != 0 || Cout % groups != 0 || Cin / groups != Cg) {
    throw ShapeError("conv2d: channel/group arithmetic does not fit input " + shape_str(x.shape()) +
                     " weight " + shape_str(weight.shape()) + " groups " + std::to_string(groups));
  }
  if (H < KH || W < KW) {
    throw ShapeError("conv2d: spatial extent of " + shape_str(x.shape()) + " smaller than kernel " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{Cout}) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(Cout) +
                     " output channels");
  }
  const std::size_t OH = (H - KH) / stride + 1, OW = (W - KW) / stride + 1;
  const std::size_t P = OH * OW;
  const std::size_t Og = Cout / groups;
  const std::size_t R = Cg * KH * KW;
  // A 1x1 stride-1 kernel reads the input planes directly.
  const bool direct = KH == 1 && KW == 1 && stride == 1;

  Tensor<T> out(Shape{B, Cout, OH, OW});
  auto X = x.data(), Wt = weight.data();
  auto O = out.data();
  std::vector<T> col(direct ? 0 : R * P);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* plane = X.data() + (b * Cin + g * Cg) * H * W;
      if (!direct) detail::im2col(plane, Cg, H, W, KH, KW, stride, OH, OW, col.data());
      const T* cols = direct ? plane : col.data();
      for (std::size_t o = 0; o < Og; ++o) {
        const std::size_t oc = g * Og + o;
        T* op = O.data() + (b * Cout + oc) * P;
        if (bias.defined()) std::fill_n(op, P, bias.data()[oc]);
        const T* wrow = Wt.data() + oc * R;
        for (std::size_t r = 0; r < R; ++r) {
          const T wv = wrow[r];
          const T* crow = cols + r * P;
          for (std::size_t i = 0; i < P; ++i) op[i] += wv * crow[i];
        }
      }
    }
  }

  detail::record<T>(out, "conv2d", {x, weight, bias}, [=](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    detail::Node<T>* nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    T* gx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
    T* gw = nw.requires_grad ? nw.grad_buffer().data() : nullptr;
    T* gb = (nb && nb->requires_grad) ? nb->grad_buffer().data() : nullptr;
    const T* Xd = nx.data.data();
    const T* Wd = nw.data.data();
    std::vector<T> col(direct ? 0 : R * P);
    std::vector<T> gcol(gx && !direct ? R * P : 0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t plane_off = (b * Cin + g * Cg) * H * W;
        const T* cols = Xd + plane_off;
        if (gw && !direct) {
          detail::im2col(Xd + plane_off, Cg, H, W, KH, KW, stride, OH, OW, col.data());
          cols = col.data();
        }
        T* gcols = gx ? (direct ? gx + plane_off : gcol.data()) : nullptr;
        if (gx && !direct) std::fill(gcol.begin(), gcol.end(), T(0));
        for (std::size_t o = 0; o < Og; ++o) {
          const std::size_t oc = g * Og + o;
          const T* gop = self.grad.data() + (b * Cout + oc) * P;
          if (gb) gb[oc] += detail::sum_n(gop, P);
          for (std::size_t r = 0; r < R; ++r) {
            if (gw) gw[oc * R + r] += detail::dot(gop, cols + r * P, P);
            if (gcols) {
              const T wv = Wd[oc * R + r];
              T* grow = gcols + r * P;
              for (std::size_t i = 0; i < P; ++i) grow[i] += wv * gop[i];
            }
          }
        }
        if (gx && !direct) detail::col2im_add(gcol.data(), Cg, H, W, KH, KW, stride, OH, OW, gx + plane_off);
      }
    }
  });
  return out;
}

/// 2-d cross-correlation with symmetric padding. H' = (H + 2p - kh) / s + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  if (p.padding == 0) return conv2d_valid(x, p.weight, p.bias, p.stride, p.groups);
  return conv2d_valid(pad2d(x, p.padding, p.padding, p.padding, p.padding, p.pad_mode), p.weight,
                      p.bias, p.stride, p.groups);
}

template <class T>
struct LayerNormParams {
  Tensor<T> gamma;  // [C]
  Tensor<T> beta;   // [C]
  T epsilon = T(1e-5);
};

/// Normalises over the channel axis at every position: axis 1 of [B,C,H,W]
/// or axis 2 of [B,HW,C]. Uses the biased variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  std::size_t axis;
  if (x.rank() == 4) {
    axis = 1;
  } else if (x.rank() == 3) {
    axis = 2;
  } else {
    throw ShapeError("layer_norm expects [B,C,H,W] or [B,HW,C], got " + shape_str(x.shape()));
  }
  const auto sp = detail::split_axis(x.shape(), axis);
  if (sp.extent == 0) throw ContractError("layer_norm over zero channels");
  if (p.gamma.shape() != Shape{sp.extent} || p.beta.shape() != Shape{sp.extent}) {
    throw ShapeError("layer_norm: parameters " + shape_str(p.gamma.shape()) + " for " +
                     std::to_string(sp.extent) + " channels");
  }
  if (!(p.epsilon > T(0))) throw ContractError("layer_norm epsilon must be positive");
  const std::size_t C = sp.extent;
  const std::size_t positions = sp.outer * sp.inner;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(positions);
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  auto gamma = p.gamma.data(), beta = p.beta.data();
  const T invC = T(1) / static_cast<T>(C);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * C * sp.inner + i;
      T mu = T(0);
      for (std::size_t c = 0; c < C; ++c) mu += src[base + c * sp.inner];
      mu *= invC;
      T var = T(0);
      for (std::size_t c = 0; c < C; ++c) {
        const T d = src[base + c * sp.inner] - mu;
        var += d * d;
      }
      var *= invC;
      const T is = T(1) / std::sqrt(var + p.epsilon);
      (*inv_std)[o * sp.inner + i] = is;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = base + c * sp.inner;
        const T h = (src[k] - mu) * is;
        (*xhat)[k] = h;
        dst[k] = h * gamma[c] + beta[c];
      }
    }
  }
  detail::record<T>(out, "layer_norm", {x, p.gamma, p.beta}, [=](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& ng = *self.inputs[1];
    auto& nb = *self.inputs[2];
    const auto& gy = self.grad;
    const auto& gam = ng.data;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * C * sp.inner + i;
        if (ng.requires_grad || nb.requires_grad) {
          auto* gg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
          auto* gbt = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = base + c * sp.inner;
            if (gg) gg[c] += gy[k] * (*xhat)[k];
            if (gbt) gbt[c] += gy[k];
          }
        }
        if (nx.requires_grad) {
          auto& gx = nx.grad_buffer();
          T m1 = T(0), m2 = T(0);
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = base + c * sp.inner;
            const T d = gy[k] * gam[c];
            m1 += d;
            m2 += d * (*xhat)[k];
          }
          m1 *= invC;
          m2 *= invC;
          const T is = (*inv_std)[o * sp.inner + i];
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = base + c * sp.inner;
            gx[k] += is * (gy[k] * gam[c] - m1 - (*xhat)[k] * m2);
          }
        }
      }
    }
  });
  return out;
}

/// [B, C, H, W] -> [B, C*r*r, H/r, W/r]; out channel c*r*r + i*r + j holds
/// input pixels (h*r + i, w*r + j).
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4 || r == 0 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw ShapeError("pixel_unshuffle: " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t h = H / r, w = W / r;
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
              (*map)[k++] = ((b * C + c) * H + y * r + i) * W + xx * r + j;
  return gather<T>(x, Shape{B, C * r * r, h, w}, std::move(map));
}

/// Inverse of pixel_unshuffle: [B, C*r*r, H, W] -> [B, C, H*r, W*r].
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4 || r == 0 || x.dim(1) % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2");
  }
  const std::size_t B = x.dim(0), Cr = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t C = Cr / (r * r), H = h * r, W = w * r;
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          (*map)[k++] = ((b * Cr + c * r * r + (y % r) * r + xx % r) * h + y / r) * w + xx / r;
  return gather<T>(x, Shape{B, C, H, W}, std::move(map));
}

/// Side of an enlarged window: (1 + overlap) * window, required integral and
/// with an even margin so the enlargement is symmetric.
inline std::size_t overlap_window_size(std::size_t window, double overlap) {
  const double exact = (1.0 + overlap) * static_cast<double>(window);
  const double rounded = std::round(exact);
  if (overlap < 0.0 || std::abs(exact - rounded) > 1e-9) {
    throw ConfigError("overlapping window size (1+" + std::to_string(overlap) + ")*" +
                      std::to_string(window) + " is not integral");
  }
  const auto size = static_cast<std::size_t>(rounded);
  if ((size - window) % 2 != 0) {
    throw ConfigError("overlapping window margin " + std::to_string(size - window) + " is not even");
  }
  return size;
}

namespace detail {

/// Tokens of size-`win` windows placed at stride `step`, shifted by -`margin`,
/// zero outside the map. Output [B*nH*nW, win*win, C]; windows in row-major
/// order per image, tokens row-major within a window.
template <class T>
Tensor<T> extract_windows(const Tensor<T>& x, std::size_t step, std::size_t win, std::size_t margin) {
  if (x.rank() != 4) throw ShapeError("window partition expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (step == 0 || H % step != 0 || W % step != 0) {
    throw ShapeError("window partition: " + shape_str(x.shape()) + " not divisible by window " +
                     std::to_string(step));
  }
  const std::size_t nH = H / step, nW = W / step;
  auto map = std::make_shared<std::vector<std::size_t>>(B * nH * nW * win * win * C);
  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t wy = 0; wy < nH; ++wy)
      for (std::size_t wx = 0; wx < nW; ++wx)
        for (std::size_t i = 0; i < win; ++i)
          for (std::size_t j = 0; j < win; ++j) {
            const long long y = static_cast<long long>(wy * step + i) - static_cast<long long>(margin);
            const long long xx = static_cast<long long>(wx * step + j) - static_cast<long long>(margin);
            const bool inside = y >= 0 && xx >= 0 && y < static_cast<long long>(H) &&
                                xx < static_cast<long long>(W);
            for (std::size_t c = 0; c < C; ++c) {
              (*map)[k++] = inside ? ((b * C + c) * H + static_cast<std::size_t>(y)) * W +
                                         static_cast<std::size_t>(xx)
                                   : kNoSource;
            }
          }
  return gather<T>(x, Shape{B * nH * nW, win * win, C}, std::move(map));
}

}  // namespace detail

/// [B, C, H, W] -> [B*(H/M)*(W/M), M*M, C], non-overlapping M x M tiles.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  return detail::extract_windows(x, window, window, 0);
}

/// Enlarged windows of side Mo = (1+overlap)*M at stride M with symmetric zero
/// padding (Mo-M)/2: [B, C, H, W] -> [B*(H/M)*(W/M), Mo*Mo, C].
template <class T>
Tensor<T> overlapping_window_partition(const Tensor<T>& x, std::size_t window, double overlap) {
  const std::size_t big = overlap_window_size(window, overlap);
  return detail::extract_windows(x, window, big, (big - window) / 2);
}

/// Inverse of window_partition: [B*(H/M)*(W/M), M*M, C] -> [B, C, H, W].
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t window, std::size_t batch,
                         std::size_t height, std::size_t width) {
  if (windows.rank() != 3 || window == 0 || height % window || width % window ||
      windows.dim(0) != batch * (height / window) * (width / window) || windows.dim(1) != window * window) {
    throw ShapeError("window_reverse: " + shape_str(windows.shape()) + " does not tile " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t C = windows.dim(2), nH = height / window, nW = width / window;
  auto map = std::make_shared<std::vector<std::size_t>>(windows.numel());
  std::size_t k = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t xx = 0; xx < width; ++xx) {
          const std::size_t win = (b * nH + y / window) * nW + xx / window;
          const std::size_t tok = (y % window) * window + xx % window;
          (*map)[k++] = (win * window * window + tok) * C + c;
        }
  return gather<T>(windows, Shape{batch, C, height, width}, std::move(map));
}

namespace detail {

struct LinearTap {
  std::size_t lo, hi;
  double frac;
};

/// Half-pixel-centre (align_corners = false) sample positions; negative
/// positions clamp to the first sample.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of [B, C, H, W] to [B, C, out_h, out_w] using the
/// align_corners = false convention (pixel centres at i + 0.5).
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ShapeError("bilinear_resize expects [B,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ContractError("bilinear_resize to zero extent");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == 0 || W == 0) throw ContractError("bilinear_resize of empty image");
  auto ty = std::make_shared<std::vector<detail::LinearTap>>(detail::bilinear_taps(H, out_h));
  auto tx = std::make_shared<std::vector<detail::LinearTap>>(detail::bilinear_taps(W, out_w));
  Tensor<T> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* ip = src.data() + p * H * W;
    T* op = dst.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = (*ty)[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = (*tx)[ox];
        const T fx = static_cast<T>(b.frac);
        const T top = ip[a.lo * W + b.lo] * (T(1) - fx) + ip[a.lo * W + b.hi] * fx;
        const T bot = ip[a.hi * W + b.lo] * (T(1) - fx) + ip[a.hi * W + b.hi] * fx;
        op[oy * out_w + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  detail::record<T>(out, "bilinear_resize", {x}, [=](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      T* gp = g.data() + p * H * W;
      const T* go = self.grad.data() + p * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& a = (*ty)[oy];
        const T fy = static_cast<T>(a.frac);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& b = (*tx)[ox];
          const T fx = static_cast<T>(b.frac);
          const T v = go[oy * out_w + ox];
          gp[a.lo * W + b.lo] += v * (T(1) - fy) * (T(1) - fx);
          gp[a.lo * W + b.hi] += v * (T(1) - fy) * fx;
          gp[a.hi * W + b.lo] += v * fy * (T(1) - fx);
          gp[a.hi * W + b.hi] += v * fy * fx;
        }
      }
    }
  });
  return out;
}

/// Bilinear resampling by a positive factor; target extents floor(H*scale).
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, double factor) {
  if (!(factor > 0)) throw ContractError("bilinear_resize scale must be positive");
  if (x.rank() != 4) throw ShapeError("bilinear_resize expects [B,C,H,W], got " + shape_str(x.shape()));
  const auto oh = static_cast<std::size_t>(std::floor(static_cast<double>(x.dim(2)) * factor + 1e-9));
  const auto ow = static_cast<std::size_t>(std::floor(static_cast<double>(x.dim(3)) * factor + 1e-9));
  return bilinear_resize(x, oh, ow);
}

}  // namespace xrestormer
