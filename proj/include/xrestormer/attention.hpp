#pragma once

// The two attention operators, the gated feed-forward network and the
// pre-norm residual blocks that wrap them:
//
//   TSAB:  F_t = F_in + MDTA(LN(F_in));   F_t_out = F_t + GDFN(LN(F_t))
//   SSAB:  F_s = F_t_out + OCA(LN(F_t_out));   F_out = F_s + GDFN(LN(F_s))

#include <cmath>
#include <string>
#include <vector>

#include "xrestormer/nn.hpp"
#include "xrestormer/params.hpp"

namespace xrestormer {

/// Multi-Dconv head transposed attention: tokens are channels, so every head
/// builds a (C/h) x (C/h) attention matrix over the whole spatial extent.
template <class T>
struct MdtaParams {
  std::size_t heads = 1;
  Tensor<T> temperature;  // [heads, 1, 1]
  Tensor<T> qkv;          // [3C, C, 1, 1]
  Tensor<T> qkv_dwconv;   // [3C, 1, 3, 3]
  Tensor<T> project_out;  // [C, C, 1, 1]
};

/// Overlapping cross-attention: queries from M x M windows, keys and values
/// from Mo x Mo windows centred on them, Mo = (1 + overlap) * M.
template <class T>
struct OcaParams {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::size_t window = 8;
  double overlap = 0.5;
  Tensor<T> qkv;              // [3 * heads * head_dim, C, 1, 1]
  Tensor<T> project_out;      // [C, heads * head_dim, 1, 1]
  Tensor<T> position_bias;    // [(M + Mo - 1)^2, heads]
};

/// Gated-Dconv feed-forward network. The first `hidden` channels after the
/// depthwise conv form the GELU-gated branch, the second `hidden` the value.
template <class T>
struct GdfnParams {
  std::size_t hidden = 1;
  Tensor<T> project_in;   // [2 * hidden, C, 1, 1]
  Tensor<T> dwconv;       // [2 * hidden, 1, 3, 3]
  Tensor<T> project_out;  // [C, hidden, 1, 1]
};

template <class T>
struct TsabParams {
  LayerNormParams<T> norm1;
  MdtaParams<T> attn;
  LayerNormParams<T> norm2;
  GdfnParams<T> ffn;
};

template <class T>
struct SsabParams {
  LayerNormParams<T> norm1;
  OcaParams<T> attn;
  LayerNormParams<T> norm2;
  GdfnParams<T> ffn;
};

inline std::size_t gdfn_hidden(std::size_t channels, double expansion) {
  const auto hidden = static_cast<std::size_t>(std::floor(static_cast<double>(channels) * expansion));
  if (hidden == 0) throw ConfigError("GDFN hidden width rounds to zero");
  return hidden;
}

// ---------------------------------------------------------------------------
// Construction

template <class T>
LayerNormParams<T> make_layer_norm(ParameterSet<T>& ps, const std::string& name, std::size_t channels) {
  LayerNormParams<T> p;
  p.gamma = ps.add(name + ".weight", Initializer<T>::constant({channels}, T(1)));
  p.beta = ps.add(name + ".bias", Initializer<T>::constant({channels}, T(0)));
  return p;
}

template <class T>
MdtaParams<T> make_mdta(ParameterSet<T>& ps, Initializer<T>& init, const std::string& name,
                        std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError(name + ": " + std::to_string(channels) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MdtaParams<T> p;
  p.heads = heads;
  p.temperature = ps.add(name + ".temperature", Initializer<T>::constant({heads, 1, 1}, T(1)));
  p.qkv = ps.add(name + ".qkv.weight", init.trunc_normal({3 * channels, channels, 1, 1}));
  p.qkv_dwconv = ps.add(name + ".qkv_dwconv.weight", init.trunc_normal({3 * channels, 1, 3, 3}));
  p.project_out = ps.add(name + ".project_out.weight", init.trunc_normal({channels, channels, 1, 1}));
  return p;
}

template <class T>
OcaParams<T> make_oca(ParameterSet<T>& ps, Initializer<T>& init, const std::string& name,
                      std::size_t channels, std::size_t heads, std::size_t head_dim,
                      std::size_t window, double overlap) {
  if (heads == 0 || head_dim == 0) throw ConfigError(name + ": heads and head_dim must be positive");
  const std::size_t big = overlap_window_size(window, overlap);
  const std::size_t inner = heads * head_dim;
  const std::size_t span = window + big - 1;
  OcaParams<T> p;
  p.heads = heads;
  p.head_dim = head_dim;
  p.window = window;
  p.overlap = overlap;
  p.qkv = ps.add(name + ".qkv.weight", init.trunc_normal({3 * inner, channels, 1, 1}));
  p.project_out = ps.add(name + ".project_out.weight", init.trunc_normal({channels, inner, 1, 1}));
  p.position_bias = ps.add(name + ".position_bias", init.trunc_normal({span * span, heads}));
  return p;
}

template <class T>
GdfnParams<T> make_gdfn(ParameterSet<T>& ps, Initializer<T>& init, const std::string& name,
                        std::size_t channels, double expansion) {
  GdfnParams<T> p;
  p.hidden = gdfn_hidden(channels, expansion);
  p.project_in = ps.add(name + ".project_in.weight", init.trunc_normal({2 * p.hidden, channels, 1, 1}));
  p.dwconv = ps.add(name + ".dwconv.weight", init.trunc_normal({2 * p.hidden, 1, 3, 3}));
  p.project_out = ps.add(name + ".project_out.weight", init.trunc_normal({channels, p.hidden, 1, 1}));
  return p;
}

template <class T>
TsabParams<T> make_tsab(ParameterSet<T>& ps, Initializer<T>& init, const std::string& name,
                        std::size_t channels, std::size_t heads, double expansion) {
  TsabParams<T> p;
  p.norm1 = make_layer_norm(ps, name + ".norm1", channels);
  p.attn = make_mdta(ps, init, name + ".attn", channels, heads);
  p.norm2 = make_layer_norm(ps, name + ".norm2", channels);
  p.ffn = make_gdfn(ps, init, name + ".ffn", channels, expansion);
  return p;
}

template <class T>
SsabParams<T> make_ssab(ParameterSet<T>& ps, Initializer<T>& init, const std::string& name,
                        std::size_t channels, std::size_t heads, std::size_t head_dim,
                        std::size_t window, double overlap, double expansion) {
  SsabParams<T> p;
  p.norm1 = make_layer_norm(ps, name + ".norm1", channels);
  p.attn = make_oca(ps, init, name + ".attn", channels, heads, head_dim, window, overlap);
  p.norm2 = make_layer_norm(ps, name + ".norm2", channels);
  p.ffn = make_gdfn(ps, init, name + ".ffn", channels, expansion);
  return p;
}

/// Closed-form element counts, mirroring the make_* functions above.
struct BlockCounts {
  static std::size_t layer_norm(std::size_t c) { return 2 * c; }
  static std::size_t mdta(std::size_t c, std::size_t h) { return h + 3 * c * c + 3 * c * 9 + c * c; }
  static std::size_t oca(std::size_t c, std::size_t h, std::size_t d, std::size_t m, double overlap) {
    const std::size_t inner = h * d;
    const std::size_t span = m + overlap_window_size(m, overlap) - 1;
    return 3 * inner * c + c * inner + span * span * h;
  }
  static std::size_t gdfn(std::size_t c, double e) {
    const std::size_t h = gdfn_hidden(c, e);
    return 2 * h * c + 2 * h * 9 + c * h;
  }
  static std::size_t tsab(std::size_t c, std::size_t h, double e) {
    return 2 * layer_norm(c) + mdta(c, h) + gdfn(c, e);
  }
  static std::size_t ssab(std::size_t c, std::size_t h, std::size_t d, std::size_t m, double overlap,
                          double e) {
    return 2 * layer_norm(c) + oca(c, h, d, m, overlap) + gdfn(c, e);
  }
};

// ---------------------------------------------------------------------------
// Forward passes

template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& weight) {
  return conv2d_valid(x, weight, Tensor<T>{}, 1, 1);
}

/// 3x3 depthwise convolution with reflect padding.
template <class T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& weight) {
  Conv2dParams<T> p{weight, Tensor<T>{}, 1, 1, x.dim(1), PadMode::reflect};
  return conv2d(x, p);
}

/// `attention`, when non-null, receives the softmax probabilities
/// [B, heads, C/h, C/h].
template <class T>
Tensor<T> mdta_forward(const Tensor<T>& x, const MdtaParams<T>& p, Tensor<T>* attention = nullptr) {
  if (x.rank() != 4) throw ShapeError("mdta expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p.heads == 0 || C % p.heads != 0) {
    throw ConfigError("mdta: " + std::to_string(C) + " channels not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  const std::size_t c = C / p.heads;
  auto qkv = depthwise_conv3x3(pointwise_conv(x, p.qkv), p.qkv_dwconv);
  auto parts = chunk(qkv, 3, 1);
  const Shape head_shape{B, p.heads, c, H * W};
  auto q = normalize_last(reshape(parts[0], head_shape));
  auto k = normalize_last(reshape(parts[1], head_shape));
  auto v = reshape(parts[2], head_shape);
  auto logits = mul_broadcast(matmul_nt(q, k), p.temperature);
  auto attn = softmax(logits, 3);
  if (attention) *attention = attn;
  auto out = reshape(matmul(attn, v), Shape{B, C, H, W});
  return pointwise_conv(out, p.project_out);
}

/// Relative offset table index for query token (qy, qx) of an M-window and
/// key token (ky, kx) of the enlarged window: offsets ky - qy range over
/// [-(M-1), Mo-1], i.e. M + Mo - 1 values per axis.
inline std::vector<std::size_t> oca_relative_index(std::size_t window, std::size_t big) {
  const std::size_t span = window + big - 1;
  std::vector<std::size_t> index(window * window * big * big);
  std::size_t k = 0;
  for (std::size_t qy = 0; qy < window; ++qy)
    for (std::size_t qx = 0; qx < window; ++qx)
      for (std::size_t ky = 0; ky < big; ++ky)
        for (std::size_t kx = 0; kx < big; ++kx)
          index[k++] = (ky + window - 1 - qy) * span + (kx + window - 1 - qx);
  return index;
}

/// Requires H and W divisible by the window. `attention`, when non-null,
/// receives [windows, heads, M*M, Mo*Mo] probabilities.
template <class T>
Tensor<T> oca_forward(const Tensor<T>& x, const OcaParams<T>& p, Tensor<T>* attention = nullptr) {
  if (x.rank() != 4) throw ShapeError("oca expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t M = p.window;
  if (M == 0 || H % M != 0 || W % M != 0) {
    throw ContractError("oca: spatial extent " + shape_str(x.shape()) + " not divisible by window " +
                        std::to_string(M) + " (pad before calling)");
  }
  const std::size_t Mo = overlap_window_size(M, p.overlap);
  const std::size_t h = p.heads, d = p.head_dim, inner = h * d;
  const std::size_t nwin = B * (H / M) * (W / M);

  auto qkv = pointwise_conv(x, p.qkv);
  auto parts = chunk(qkv, 3, 1);
  // [nwin, tokens, inner] -> [nwin, heads, tokens, head_dim]
  auto split_heads = [&](const Tensor<T>& t, std::size_t tokens) {
    return permute(reshape(t, Shape{nwin, tokens, h, d}), {0, 2, 1, 3});
  };
  auto q = split_heads(window_partition(parts[0], M), M * M);
  auto k = split_heads(overlapping_window_partition(parts[1], M, p.overlap), Mo * Mo);
  auto v = split_heads(overlapping_window_partition(parts[2], M, p.overlap), Mo * Mo);

  auto logits = matmul_nt(scale(q, T(1) / std::sqrt(static_cast<T>(d))), k);

  const auto rel = oca_relative_index(M, Mo);
  auto map = std::make_shared<std::vector<std::size_t>>(h * rel.size());
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < rel.size(); ++i) (*map)[head * rel.size() + i] = rel[i] * h + head;
  auto bias = gather(p.position_bias, Shape{h, M * M, Mo * Mo}, std::move(map));

  auto attn = softmax(add_broadcast(logits, bias), 3);
  if (attention) *attention = attn;
  auto out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), Shape{nwin, M * M, inner});
  return pointwise_conv(window_reverse(out, M, B, H, W), p.project_out);
}

template <class T>
Tensor<T> gdfn_forward(const Tensor<T>& x, const GdfnParams<T>& p) {
  auto y = depthwise_conv3x3(pointwise_conv(x, p.project_in), p.dwconv);
  auto halves = chunk(y, 2, 1);
  return pointwise_conv(mul(gelu(halves[0]), halves[1]), p.project_out);
}

template <class T>
Tensor<T> tsab_forward(const Tensor<T>& x, const TsabParams<T>& p) {
  auto t = add(x, mdta_forward(layer_norm(x, p.norm1), p.attn));
  return add(t, gdfn_forward(layer_norm(t, p.norm2), p.ffn));
}

/// Zero-pads the normalised map to a multiple of the window for OCA and crops
/// the result back, so any spatial extent is accepted.
template <class T>
Tensor<T> ssab_forward(const Tensor<T>& x, const SsabParams<T>& p) {
  const std::size_t H = x.dim(2), W = x.dim(3), M = p.attn.window;
  const std::size_t ph = (M - H % M) % M, pw = (M - W % M) % M;
  auto normed = layer_norm(x, p.norm1);
  Tensor<T> attn;
  if (ph == 0 && pw == 0) {
    attn = oca_forward(normed, p.attn);
  } else {
    attn = crop2d(oca_forward(pad2d(normed, 0, ph, 0, pw, PadMode::zeros), p.attn), 0, 0, H, W);
  }
  auto s = add(x, attn);
  return add(s, gdfn_forward(layer_norm(s, p.norm2), p.ffn));
}

}  // namespace xrestormer
