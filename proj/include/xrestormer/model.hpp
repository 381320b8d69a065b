#pragma once

// Four-level U-shaped encoder-decoder built from TSAB+SSAB pairs.
//
//   3x3 conv -> [pairs, down] x3 -> latent pairs -> [up, concat skip,
//   (1x1 reduce), pairs] x3 -> refinement pairs -> 3x3 conv -> + input
//
// Downsampling is a 3x3 conv halving channels followed by pixel_unshuffle(2);
// upsampling is a 3x3 conv doubling channels followed by pixel_shuffle(2).
// The level-1 decoder and the refinement stage run at 2 * channels[0].

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "xrestormer/attention.hpp"

namespace xrestormer {

enum class Task { sr, denoise, deblur, derain, dehaze, all_in_one };

struct TaskMode {
  Task task = Task::denoise;
  std::size_t sr_scale = 4;  // meaningful only for Task::sr

  bool operator==(const TaskMode&) const = default;
};

inline std::string to_string(const TaskMode& m) {
  switch (m.task) {
    case Task::sr: return "sr" + std::to_string(m.sr_scale);
    case Task::denoise: return "denoise";
    case Task::deblur: return "deblur";
    case Task::derain: return "derain";
    case Task::dehaze: return "dehaze";
    case Task::all_in_one: return "all-in-one";
  }
  return "?";
}

inline TaskMode parse_task_mode(const std::string& s) {
  if (s == "sr2") return {Task::sr, 2};
  if (s == "sr4") return {Task::sr, 4};
  if (s == "denoise") return {Task::denoise};
  if (s == "deblur") return {Task::deblur};
  if (s == "derain") return {Task::derain};
  if (s == "dehaze") return {Task::dehaze};
  if (s == "all-in-one") return {Task::all_in_one};
  throw ConfigError("unknown task mode '" + s + "' (sr2, sr4, denoise, deblur, derain, dehaze, all-in-one)");
}

struct ModelConfig {
  std::vector<std::size_t> blocks_per_level{2, 4, 4, 4};  // TSAB+SSAB pairs
  std::size_t refinement_pairs = 4;
  std::vector<std::size_t> heads{1, 2, 4, 8};
  std::vector<std::size_t> channels{48, 96, 192, 384};
  std::size_t window = 8;
  double overlap = 0.5;
  double ffn_expansion = 2.66;
  /// Channels per OCA head; 0 uses channels / heads at each level.
  std::size_t oca_head_dim = 16;
  /// When false every pair is two TSABs.
  bool ssab_enabled = true;
  TaskMode task_mode{};

  static constexpr std::size_t levels = 4;

  static ModelConfig full() { return {}; }

  static ModelConfig tiny() {
    ModelConfig c;
    c.blocks_per_level = {1, 1, 1, 1};
    c.refinement_pairs = 1;
    c.channels = {8, 16, 32, 64};
    c.oca_head_dim = 0;
    return c;
  }

  std::size_t head_dim(std::size_t level_channels, std::size_t level_heads) const {
    return oca_head_dim ? oca_head_dim : level_channels / level_heads;
  }

  void validate() const {
    if (blocks_per_level.size() != levels || heads.size() != levels || channels.size() != levels) {
      throw ConfigError("blocks_per_level, heads and channels must each list " + std::to_string(levels) +
                        " levels");
    }
    if (channels[0] == 0 || channels[0] % 2 != 0) throw ConfigError("channels[0] must be positive and even");
    for (std::size_t i = 0; i + 1 < levels; ++i) {
      if (channels[i + 1] != 2 * channels[i]) {
        throw ConfigError("channels must double per level (pixel-unshuffle), got " +
                          std::to_string(channels[i]) + " -> " + std::to_string(channels[i + 1]));
      }
    }
    for (std::size_t i = 0; i < levels; ++i) {
      if (heads[i] == 0 || channels[i] % heads[i] != 0) {
        throw ConfigError("level " + std::to_string(i + 1) + ": channels not divisible by heads");
      }
    }
    if ((2 * channels[0]) % heads[0] != 0) throw ConfigError("refinement width not divisible by heads[0]");
    if (window == 0) throw ConfigError("window must be positive");
    overlap_window_size(window, overlap);
    gdfn_hidden(channels[0], ffn_expansion);
    if (task_mode.task == Task::sr && task_mode.sr_scale != 2 && task_mode.sr_scale != 4) {
      throw ConfigError("SR scale must be 2 or 4");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// A TSAB followed by either an SSAB or (ablation) a second TSAB.
template <class T>
struct PairParams {
  TsabParams<T> transposed;
  std::variant<SsabParams<T>, TsabParams<T>> second;
};

template <class T>
struct ModelState {
  ModelConfig config;
  std::uint64_t step = 0;
  ParameterSet<T> params;

  Tensor<T> patch_embed;  // [C0, 3, 3, 3]
  std::vector<PairParams<T>> encoder1, encoder2, encoder3, latent;
  std::vector<PairParams<T>> decoder3, decoder2, decoder1, refinement;
  Tensor<T> down1, down2, down3;  // [C/2, C, 3, 3]
  Tensor<T> up3, up2, up1;        // [2C, C, 3, 3]
  Tensor<T> reduce3, reduce2;     // [C, 2C, 1, 1]
  Tensor<T> output;               // [3, 2*C0, 3, 3]
};

namespace detail {

template <class T>
std::vector<PairParams<T>> make_pairs(const ModelConfig& cfg, ParameterSet<T>& ps, Initializer<T>& init,
                                      const std::string& stage, std::size_t count, std::size_t channels,
                                      std::size_t heads) {
  std::vector<PairParams<T>> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = stage + "." + std::to_string(i);
    PairParams<T> p{make_tsab(ps, init, name + ".tsab", channels, heads, cfg.ffn_expansion), {}};
    if (cfg.ssab_enabled) {
      p.second = make_ssab(ps, init, name + ".ssab", channels, heads, cfg.head_dim(channels, heads), cfg.window,
                           cfg.overlap, cfg.ffn_expansion);
    } else {
      p.second = make_tsab(ps, init, name + ".tsab2", channels, heads, cfg.ffn_expansion);
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

template <class T>
Tensor<T> run_pairs(const std::vector<PairParams<T>>& pairs, Tensor<T> x) {
  for (const auto& p : pairs) {
    x = tsab_forward(x, p.transposed);
    x = std::visit(
        [&](const auto& second) {
          if constexpr (std::is_same_v<std::decay_t<decltype(second)>, SsabParams<T>>) {
            return ssab_forward(x, second);
          } else {
            return tsab_forward(x, second);
          }
        },
        p.second);
  }
  return x;
}

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w) {
  return conv2d(x, Conv2dParams<T>{w, Tensor<T>{}, 1, 1, 1, PadMode::zeros});
}

}  // namespace detail

template <class T>
ModelState<T> build_model(const ModelConfig& cfg, Initializer<T> init) {
  cfg.validate();
  ModelState<T> m;
  m.config = cfg;
  auto& ps = m.params;
  const auto& C = cfg.channels;
  const auto& h = cfg.heads;
  const auto& nb = cfg.blocks_per_level;
  using detail::make_pairs;

  m.patch_embed = ps.add("patch_embed.weight", init.trunc_normal({C[0], 3, 3, 3}));
  m.encoder1 = make_pairs(cfg, ps, init, "encoder1", nb[0], C[0], h[0]);
  m.down1 = ps.add("down1.weight", init.trunc_normal({C[0] / 2, C[0], 3, 3}));
  m.encoder2 = make_pairs(cfg, ps, init, "encoder2", nb[1], C[1], h[1]);
  m.down2 = ps.add("down2.weight", init.trunc_normal({C[1] / 2, C[1], 3, 3}));
  m.encoder3 = make_pairs(cfg, ps, init, "encoder3", nb[2], C[2], h[2]);
  m.down3 = ps.add("down3.weight", init.trunc_normal({C[2] / 2, C[2], 3, 3}));
  m.latent = make_pairs(cfg, ps, init, "latent", nb[3], C[3], h[3]);
  m.up3 = ps.add("up3.weight", init.trunc_normal({2 * C[3], C[3], 3, 3}));
  m.reduce3 = ps.add("reduce3.weight", init.trunc_normal({C[2], 2 * C[2], 1, 1}));
  m.decoder3 = make_pairs(cfg, ps, init, "decoder3", nb[2], C[2], h[2]);
  m.up2 = ps.add("up2.weight", init.trunc_normal({2 * C[2], C[2], 3, 3}));
  m.reduce2 = ps.add("reduce2.weight", init.trunc_normal({C[1], 2 * C[1], 1, 1}));
  m.decoder2 = make_pairs(cfg, ps, init, "decoder2", nb[1], C[1], h[1]);
  m.up1 = ps.add("up1.weight", init.trunc_normal({2 * C[1], C[1], 3, 3}));
  m.decoder1 = make_pairs(cfg, ps, init, "decoder1", nb[0], 2 * C[0], h[0]);
  m.refinement = make_pairs(cfg, ps, init, "refinement", cfg.refinement_pairs, 2 * C[0], h[0]);
  m.output = ps.add("output.weight", init.trunc_normal({3, 2 * C[0], 3, 3}));
  return m;
}

/// Deterministic in `seed`; the parameter names and shapes depend on cfg only.
template <class T>
ModelState<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return build_model<T>(cfg, Initializer<T>(seed));
}

/// Name and shape of every parameter in registration order, from the same
/// builder as build_model but without drawing values.
inline std::vector<std::pair<std::string, Shape>> enumerate_parameters(const ModelConfig& cfg) {
  const auto m = build_model<float>(cfg, Initializer<float>::shapes_only());
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& [name, t] : m.params.entries()) out.emplace_back(name, t.shape());
  return out;
}

/// Closed-form parameter count; must equal the element count of build_model.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const auto& C = cfg.channels;
  const auto& h = cfg.heads;
  const auto& nb = cfg.blocks_per_level;
  auto pair = [&](std::size_t c, std::size_t heads) {
    const std::size_t second =
        cfg.ssab_enabled
            ? BlockCounts::ssab(c, heads, cfg.head_dim(c, heads), cfg.window, cfg.overlap, cfg.ffn_expansion)
            : BlockCounts::tsab(c, heads, cfg.ffn_expansion);
    return BlockCounts::tsab(c, heads, cfg.ffn_expansion) + second;
  };
  std::size_t n = 3 * C[0] * 9;
  for (std::size_t i = 0; i < 3; ++i) {
    n += nb[i] * pair(C[i], h[i]);       // encoder
    n += (C[i] / 2) * C[i] * 9;          // down
    n += 2 * C[i + 1] * C[i + 1] * 9;    // up from level i+1
  }
  n += nb[3] * pair(C[3], h[3]);
  n += 2 * C[2] * C[2] + 2 * C[1] * C[1];  // reduce3, reduce2
  n += nb[2] * pair(C[2], h[2]) + nb[1] * pair(C[1], h[1]);
  n += (nb[0] + cfg.refinement_pairs) * pair(2 * C[0], h[0]);
  n += 3 * 2 * C[0] * 9;
  return n;
}

/// Spatial extents are reflect-padded up to this multiple before the U-net.
inline constexpr std::size_t kSpatialMultiple = 8;

template <class T>
Tensor<T> forward(const ModelState<T>& m, const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("forward expects [B,3,H,W], got " + shape_str(x.shape()));
  const std::size_t H = x.dim(2), W = x.dim(3);
  if (H < 8 || W < 8) throw ContractError("forward needs H, W >= 8, got " + shape_str(x.shape()));
  if (!all_finite(x)) throw NumericError("forward: non-finite input");
  using detail::conv3x3;
  using detail::run_pairs;

  const std::size_t ph = (kSpatialMultiple - H % kSpatialMultiple) % kSpatialMultiple;
  const std::size_t pw = (kSpatialMultiple - W % kSpatialMultiple) % kSpatialMultiple;
  const Tensor<T> padded = (ph || pw) ? pad2d(x, 0, ph, 0, pw, PadMode::reflect) : x;

  auto down = [](const Tensor<T>& f, const Tensor<T>& w) { return pixel_unshuffle(conv3x3(f, w), 2); };
  auto up = [](const Tensor<T>& f, const Tensor<T>& w) { return pixel_shuffle(conv3x3(f, w), 2); };

  auto e1 = run_pairs(m.encoder1, conv3x3(padded, m.patch_embed));
  auto e2 = run_pairs(m.encoder2, down(e1, m.down1));
  auto e3 = run_pairs(m.encoder3, down(e2, m.down2));
  auto lat = run_pairs(m.latent, down(e3, m.down3));

  auto d3 = run_pairs(m.decoder3, pointwise_conv(concat<T>({up(lat, m.up3), e3}, 1), m.reduce3));
  auto d2 = run_pairs(m.decoder2, pointwise_conv(concat<T>({up(d3, m.up2), e2}, 1), m.reduce2));
  auto d1 = run_pairs(m.decoder1, concat<T>({up(d2, m.up1), e1}, 1));
  auto out = conv3x3(run_pairs(m.refinement, d1), m.output);
  if (ph || pw) out = crop2d(out, 0, 0, H, W);
  return add(out, x);
}

/// Bilinear pre-upsampling by the configured scale, then forward.
template <class T>
Tensor<T> restore_sr(const ModelState<T>& m, const Tensor<T>& lr, std::size_t scale) {
  if (m.config.task_mode.task != Task::sr || m.config.task_mode.sr_scale != scale) {
    throw ContractError("restore_sr x" + std::to_string(scale) + " on a model configured for " +
                        to_string(m.config.task_mode));
  }
  if (lr.rank() != 4) throw ShapeError("restore_sr expects [B,3,h,w], got " + shape_str(lr.shape()));
  return forward(m, bilinear_resize(lr, lr.dim(2) * scale, lr.dim(3) * scale));
}

/// Zeroes every block output projection (attention and feed-forward) and the
/// final conv, turning the network into the identity map.
template <class T>
void zero_output_projections(ModelState<T>& m) {
  for (auto& [name, t] : m.params.entries()) {
    const bool projection = name.find("project_out") != std::string::npos;
    if (projection || name == "output.weight") {
      auto handle = t;
      for (auto& v : handle.data()) v = T(0);
    }
  }
}

/// Independent copy of every parameter tensor.
template <class T>
ModelState<T> clone_model(const ModelState<T>& m) {
  ModelState<T> copy = build_model<T>(m.config, Initializer<T>::shapes_only());
  copy.step = m.step;
  const auto& src = m.params.entries();
  const auto& dst = copy.params.entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto handle = dst[i].second;
    auto from = src[i].second.data();
    std::copy(from.begin(), from.end(), handle.data().begin());
  }
  return copy;
}

}  // namespace xrestormer
