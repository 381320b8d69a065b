#pragma once

// Synthetic degradations that turn a clean image into a training or
// evaluation input:
//
//   sr     y = (x * k) downsampled by s, k the antialiased bicubic kernel
//   noise  y = x + n,  n ~ N(0, (sigma/255)^2), unclipped
//   blur   y = mean_t x(p + f_t), bilinear sub-pixel shifts along a trajectory
//   rain   y = clip(x + R, 0, 1), R sparse seeds smeared along an angle
//   haze   y = x t + A (1 - t),  t = exp(-beta d)
//
// Every stochastic spec carries its seed, so the same spec always produces
// the same output. Specs print to and parse from a one-line canonical text.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "xrestormer/image.hpp"

namespace xrestormer {

struct SrSpec {
  std::size_t scale = 4;
  bool operator==(const SrSpec&) const = default;
};

struct NoiseSpec {
  double sigma = 50.0;  // on the 0-255 scale
  std::uint64_t seed = 0;
  bool operator==(const NoiseSpec&) const = default;
};

struct BlurSpec {
  /// Sub-pixel (dx, dy) offsets, one per exposure instant.
  std::vector<std::array<double, 2>> trajectory;
  bool operator==(const BlurSpec&) const = default;
};

struct RainSpec {
  double density = 0.02;    // probability of a streak seed per pixel
  double length = 15.0;     // streak length in pixels
  double angle = 80.0;      // degrees from the +x axis towards +y (image rows)
  double intensity = 0.6;   // streak brightness
  std::uint64_t seed = 0;
  bool operator==(const RainSpec&) const = default;
};

enum class DepthKind { constant, ramp, smooth };

struct HazeSpec {
  double beta = 1.0;         // scattering coefficient
  double atmosphere = 0.9;   // A
  DepthKind depth = DepthKind::smooth;
  double depth_scale = 1.0;  // depth values lie in [0, depth_scale]
  std::uint64_t seed = 0;    // used by DepthKind::smooth
  bool operator==(const HazeSpec&) const = default;
};

using DegradationSpec = std::variant<SrSpec, NoiseSpec, BlurSpec, RainSpec, HazeSpec>;

// ---------------------------------------------------------------------------
// Canonical text

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("degradation spec: bad number '" + s + "' for " + key);
  }
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("degradation spec: bad integer '" + s + "' for " + key);
  }
  return v;
}

inline const char* depth_name(DepthKind k) {
  switch (k) {
    case DepthKind::constant: return "constant";
    case DepthKind::ramp: return "ramp";
    case DepthKind::smooth: return "smooth";
  }
  return "?";
}

}  // namespace detail

inline std::string to_text(const DegradationSpec& spec) {
  using detail::format_double;
  std::ostringstream os;
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, SrSpec>) {
          os << "sr scale=" << s.scale;
        } else if constexpr (std::is_same_v<S, NoiseSpec>) {
          os << "noise sigma=" << format_double(s.sigma) << " seed=" << s.seed;
        } else if constexpr (std::is_same_v<S, BlurSpec>) {
          os << "blur offsets=";
          for (std::size_t i = 0; i < s.trajectory.size(); ++i) {
            if (i) os << ',';
            os << format_double(s.trajectory[i][0]) << ':' << format_double(s.trajectory[i][1]);
          }
        } else if constexpr (std::is_same_v<S, RainSpec>) {
          os << "rain density=" << format_double(s.density) << " length=" << format_double(s.length)
             << " angle=" << format_double(s.angle) << " intensity=" << format_double(s.intensity)
             << " seed=" << s.seed;
        } else {
          os << "haze beta=" << format_double(s.beta) << " A=" << format_double(s.atmosphere)
             << " depth=" << detail::depth_name(s.depth) << " scale=" << format_double(s.depth_scale)
             << " seed=" << s.seed;
        }
      },
      spec);
  return os.str();
}

inline void validate(const DegradationSpec& spec);

/// Inverse of to_text. Every key of the kind must be present exactly once.
inline DegradationSpec parse_spec(const std::string& text) {
  std::istringstream is(text);
  std::string kind, token;
  is >> kind;
  std::map<std::string, std::string> kv;
  while (is >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("degradation spec: expected key=value, got '" + token + "'");
    if (!kv.emplace(token.substr(0, eq), token.substr(eq + 1)).second) {
      throw ConfigError("degradation spec: duplicate key '" + token.substr(0, eq) + "'");
    }
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("degradation spec '" + kind + "': missing " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  using detail::parse_double;
  using detail::parse_u64;
  DegradationSpec spec;
  if (kind == "sr") {
    spec = SrSpec{parse_u64(take("scale"), "scale")};
  } else if (kind == "noise") {
    NoiseSpec s;
    s.sigma = parse_double(take("sigma"), "sigma");
    s.seed = parse_u64(take("seed"), "seed");
    spec = s;
  } else if (kind == "blur") {
    BlurSpec s;
    std::istringstream offsets(take("offsets"));
    std::string pair;
    while (std::getline(offsets, pair, ',')) {
      const auto colon = pair.find(':');
      if (colon == std::string::npos) throw ConfigError("degradation spec: offset '" + pair + "' is not dx:dy");
      s.trajectory.push_back(
          {parse_double(pair.substr(0, colon), "offsets"), parse_double(pair.substr(colon + 1), "offsets")});
    }
    spec = s;
  } else if (kind == "rain") {
    RainSpec s;
    s.density = parse_double(take("density"), "density");
    s.length = parse_double(take("length"), "length");
    s.angle = parse_double(take("angle"), "angle");
    s.intensity = parse_double(take("intensity"), "intensity");
    s.seed = parse_u64(take("seed"), "seed");
    spec = s;
  } else if (kind == "haze") {
    HazeSpec s;
    s.beta = parse_double(take("beta"), "beta");
    s.atmosphere = parse_double(take("A"), "A");
    const std::string depth = take("depth");
    if (depth == "constant") s.depth = DepthKind::constant;
    else if (depth == "ramp") s.depth = DepthKind::ramp;
    else if (depth == "smooth") s.depth = DepthKind::smooth;
    else throw ConfigError("degradation spec: unknown depth kind '" + depth + "'");
    s.depth_scale = parse_double(take("scale"), "scale");
    s.seed = parse_u64(take("seed"), "seed");
    spec = s;
  } else {
    throw ConfigError("degradation spec: unknown kind '" + kind + "' (sr, noise, blur, rain, haze)");
  }
  if (!kv.empty()) throw ConfigError("degradation spec '" + kind + "': unexpected key " + kv.begin()->first);
  validate(spec);
  return spec;
}

inline std::string task_of(const DegradationSpec& spec) {
  static constexpr const char* names[] = {"sr", "denoise", "deblur", "derain", "dehaze"};
  return names[spec.index()];
}

inline void validate(const DegradationSpec& spec) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, SrSpec>) {
          if (s.scale != 2 && s.scale != 4) throw ConfigError("sr: scale must be 2 or 4");
        } else if constexpr (std::is_same_v<S, NoiseSpec>) {
          if (!(s.sigma > 0 && s.sigma <= 50)) throw ConfigError("noise: sigma must lie in (0, 50]");
        } else if constexpr (std::is_same_v<S, BlurSpec>) {
          if (s.trajectory.empty()) throw ContractError("blur: empty trajectory");
          for (const auto& o : s.trajectory) {
            if (!std::isfinite(o[0]) || !std::isfinite(o[1])) throw ConfigError("blur: non-finite offset");
          }
        } else if constexpr (std::is_same_v<S, RainSpec>) {
          if (!(s.intensity >= 0)) throw ConfigError("rain: intensity must be >= 0");
          if (!(s.density >= 0 && s.density <= 1)) throw ConfigError("rain: density must lie in [0, 1]");
          if (!(s.length >= 1)) throw ConfigError("rain: length must be >= 1");
          if (!std::isfinite(s.angle)) throw ConfigError("rain: non-finite angle");
        } else {
          if (!(s.beta > 0)) throw ConfigError("haze: beta must be > 0");
          if (!(s.atmosphere >= 0.7 && s.atmosphere <= 1.0)) throw ConfigError("haze: A must lie in [0.7, 1]");
          if (!(s.depth_scale >= 0)) throw ConfigError("haze: depth scale must be >= 0");
        }
      },
      spec);
}

// ---------------------------------------------------------------------------
// Bicubic

/// Cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double t) {
  const double a = std::abs(t), a2 = a * a, a3 = a2 * a;
  if (a <= 1.0) return 1.5 * a3 - 2.5 * a2 + 1.0;
  if (a < 2.0) return -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0;
  return 0.0;
}

namespace detail {

/// Taps (source index, weight) for each output sample when shrinking an axis
/// of length n by an integer factor s. The kernel is stretched by s
/// (antialiasing), weights are normalised to sum 1 and out-of-range taps are
/// mirrored symmetrically (-1 -> 0, n -> n-1).
inline std::vector<std::vector<std::pair<std::size_t, double>>> bicubic_taps(std::size_t n, std::size_t s) {
  const std::size_t m = n / s;
  const double sd = static_cast<double>(s);
  std::vector<std::vector<std::pair<std::size_t, double>>> taps(m);
  const auto N = static_cast<long long>(n);
  for (std::size_t i = 0; i < m; ++i) {
    const double centre = (static_cast<double>(i) + 0.5) * sd - 0.5;
    const auto lo = static_cast<long long>(std::floor(centre - 2.0 * sd));
    const auto hi = static_cast<long long>(std::ceil(centre + 2.0 * sd));
    std::map<std::size_t, double> acc;
    double total = 0.0;
    for (long long j = lo; j <= hi; ++j) {
      const double w = cubic_kernel((centre - static_cast<double>(j)) / sd) / sd;
      if (w == 0.0) continue;
      long long k = j;
      while (k < 0 || k >= N) k = k < 0 ? -k - 1 : 2 * N - 1 - k;
      acc[static_cast<std::size_t>(k)] += w;
      total += w;
    }
    for (const auto& [k, w] : acc) taps[i].emplace_back(k, w / total);
  }
  return taps;
}

}  // namespace detail

/// Antialiased bicubic downsampling by s along both axes.
inline Image degrade_sr(const Image& gt, std::size_t s) {
  validate(SrSpec{s});
  if (gt.height % s != 0 || gt.width % s != 0) {
    throw ContractError("sr: " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                        " not divisible by scale " + std::to_string(s));
  }
  const std::size_t C = gt.channels, h = gt.height / s, w = gt.width / s;
  const auto tx = detail::bicubic_taps(gt.width, s);
  const auto ty = detail::bicubic_taps(gt.height, s);
  Image rows(gt.height, w, C);
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (const auto& [k, wt] : tx[x]) acc += wt * gt.at(y, k, c);
        rows.at(y, x, c) = acc;
      }
  Image out(h, w, C);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (const auto& [k, wt] : ty[y]) acc += wt * rows.at(k, x, c);
        out.at(y, x, c) = acc;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Noise, blur, rain, haze

inline Image degrade_noise(const Image& gt, const NoiseSpec& spec) {
  if (!(spec.sigma > 0)) throw ConfigError("noise: sigma must be > 0");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> dist(0.0, spec.sigma / 255.0);
  Image out = gt;
  for (double& v : out.data) v += dist(rng);
  return out;
}

namespace detail {

/// Bilinear sample at fractional (y, x) with replicated borders.
inline double sample_bilinear(const Image& im, double y, double x, std::size_t c) {
  const double cy = std::clamp(y, 0.0, static_cast<double>(im.height - 1));
  const double cx = std::clamp(x, 0.0, static_cast<double>(im.width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(cy));
  const auto x0 = static_cast<std::size_t>(std::floor(cx));
  const std::size_t y1 = std::min(y0 + 1, im.height - 1), x1 = std::min(x0 + 1, im.width - 1);
  const double fy = cy - static_cast<double>(y0), fx = cx - static_cast<double>(x0);
  const double top = im.at(y0, x0, c) + fx * (im.at(y0, x1, c) - im.at(y0, x0, c));
  const double bottom = im.at(y1, x0, c) + fx * (im.at(y1, x1, c) - im.at(y1, x0, c));
  return top + fy * (bottom - top);
}

}  // namespace detail

inline Image degrade_blur(const Image& gt, const BlurSpec& spec) {
  validate(spec);
  Image out(gt.height, gt.width, gt.channels);
  const double inv = 1.0 / static_cast<double>(spec.trajectory.size());
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < gt.width; ++x)
      for (std::size_t c = 0; c < gt.channels; ++c) {
        double acc = 0.0;
        for (const auto& [dx, dy] : spec.trajectory) {
          acc += detail::sample_bilinear(gt, static_cast<double>(y) + dy, static_cast<double>(x) + dx, c);
        }
        out.at(y, x, c) = acc * inv;
      }
  return out;
}

/// A uniformly spaced trajectory of n offsets along a straight line of the
/// given length (pixels) and angle (degrees), centred on the origin.
inline BlurSpec linear_trajectory(std::size_t n, double length, double angle_deg) {
  if (n == 0) throw ContractError("blur: empty trajectory");
  BlurSpec spec;
  const double a = angle_deg * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : (static_cast<double>(i) / static_cast<double>(n - 1) - 0.5) * length;
    spec.trajectory.push_back({t * std::cos(a), t * std::sin(a)});
  }
  return spec;
}

/// Single-channel streak layer R in [0, intensity]: Bernoulli(density)
/// seeds, each smeared into a line segment of the configured length and
/// angle, saturating at 1 before scaling.
inline Image rain_layer(std::size_t height, std::size_t width, const RainSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution seed(spec.density);
  Image seeds(height, width, 1);
  for (double& v : seeds.data) v = seed(rng) ? 1.0 : 0.0;

  // Line kernel sampled every half pixel and splatted bilinearly.
  const double a = spec.angle * std::numbers::pi / 180.0;
  const double ux = std::cos(a), uy = std::sin(a);
  const auto reach = static_cast<long long>(std::ceil(spec.length / 2.0)) + 1;
  const auto side = static_cast<std::size_t>(2 * reach + 1);
  std::vector<double> kernel(side * side, 0.0);
  const auto steps = static_cast<long long>(std::ceil(spec.length * 2.0));
  for (long long i = 0; i <= steps; ++i) {
    const double t = (static_cast<double>(i) / static_cast<double>(steps) - 0.5) * spec.length;
    const double px = t * ux + static_cast<double>(reach), py = t * uy + static_cast<double>(reach);
    const auto x0 = static_cast<std::size_t>(std::floor(px)), y0 = static_cast<std::size_t>(std::floor(py));
    const double fx = px - std::floor(px), fy = py - std::floor(py);
    kernel[y0 * side + x0] += (1 - fx) * (1 - fy);
    kernel[y0 * side + x0 + 1] += fx * (1 - fy);
    kernel[(y0 + 1) * side + x0] += (1 - fx) * fy;
    kernel[(y0 + 1) * side + x0 + 1] += fx * fy;
  }
  const double peak = *std::max_element(kernel.begin(), kernel.end());
  for (double& k : kernel) k = std::min(1.0, k / peak);

  Image layer(height, width, 1);
  const auto H = static_cast<long long>(height), W = static_cast<long long>(width);
  for (long long y = 0; y < H; ++y) {
    for (long long x = 0; x < W; ++x) {
      if (seeds.data[static_cast<std::size_t>(y * W + x)] == 0.0) continue;
      for (long long ky = 0; ky < static_cast<long long>(side); ++ky) {
        const long long ty = y + ky - reach;
        if (ty < 0 || ty >= H) continue;
        for (long long kx = 0; kx < static_cast<long long>(side); ++kx) {
          const long long tx = x + kx - reach;
          if (tx < 0 || tx >= W) continue;
          layer.data[static_cast<std::size_t>(ty * W + tx)] += kernel[static_cast<std::size_t>(ky) * side +
                                                                      static_cast<std::size_t>(kx)];
        }
      }
    }
  }
  for (double& v : layer.data) v = spec.intensity * std::min(1.0, v);
  return layer;
}

inline Image degrade_rain(const Image& gt, const RainSpec& spec) {
  validate(spec);
  if (spec.intensity == 0.0) return gt;
  const Image r = rain_layer(gt.height, gt.width, spec);
  Image out = gt;
  for (std::size_t p = 0; p < gt.pixels(); ++p)
    for (std::size_t c = 0; c < gt.channels; ++c) {
      double& v = out.data[p * gt.channels + c];
      v = std::clamp(v + r.data[p], 0.0, 1.0);
    }
  return out;
}

/// Depth field d >= 0 for haze synthesis.
inline Image depth_field(std::size_t height, std::size_t width, const HazeSpec& spec) {
  Image d(height, width, 1);
  switch (spec.depth) {
    case DepthKind::constant:
      std::fill(d.data.begin(), d.data.end(), spec.depth_scale);
      break;
    case DepthKind::ramp:
      // Far at the top row, near at the bottom row.
      for (std::size_t y = 0; y < height; ++y) {
        const double v = height == 1 ? 0.0
                                     : spec.depth_scale * static_cast<double>(height - 1 - y) /
                                           static_cast<double>(height - 1);
        std::fill_n(d.data.begin() + y * width, width, v);
      }
      break;
    case DepthKind::smooth: {
      // Bilinear interpolation of a seeded 4x4 grid of uniform values.
      constexpr std::size_t G = 4;
      std::mt19937_64 rng(spec.seed);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Image grid(G, G, 1);
      for (double& v : grid.data) v = u(rng);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double gy = height == 1 ? 0.0 : static_cast<double>(y) * (G - 1) / static_cast<double>(height - 1);
          const double gx = width == 1 ? 0.0 : static_cast<double>(x) * (G - 1) / static_cast<double>(width - 1);
          d.at(y, x, 0) = spec.depth_scale * detail::sample_bilinear(grid, gy, gx, 0);
        }
      break;
    }
  }
  return d;
}

inline Image degrade_haze(const Image& gt, const HazeSpec& spec) {
  validate(spec);
  const Image d = depth_field(gt.height, gt.width, spec);
  Image out = gt;
  for (std::size_t p = 0; p < gt.pixels(); ++p) {
    const double t = std::exp(-spec.beta * d.data[p]);
    for (std::size_t c = 0; c < gt.channels; ++c) {
      double& v = out.data[p * gt.channels + c];
      v = v * t + spec.atmosphere * (1.0 - t);
    }
  }
  return out;
}

inline Image degrade(const Image& gt, const DegradationSpec& spec) {
  return std::visit(
      [&](const auto& s) -> Image {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, SrSpec>) return degrade_sr(gt, s.scale);
        else if constexpr (std::is_same_v<S, NoiseSpec>) return degrade_noise(gt, s);
        else if constexpr (std::is_same_v<S, BlurSpec>) return degrade_blur(gt, s);
        else if constexpr (std::is_same_v<S, RainSpec>) return degrade_rain(gt, s);
        else return degrade_haze(gt, s);
      },
      spec);
}

}  // namespace xrestormer
