#pragma once

// L1 training with AdamW and a cosine schedule with warm restarts.
//
// Batches are cut from clean images and degraded on the fly (or taken from
// stored degraded counterparts). All randomness of iteration i comes from an
// RNG seeded with (seed, i), so a run resumed from a checkpoint at step k
// continues exactly as the uninterrupted run would have.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xrestormer/degradation.hpp"
#include "xrestormer/model.hpp"

namespace xrestormer {

struct TrainConfig {
  double lr0 = 3e-4;
  double beta1 = 0.9, beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::vector<std::size_t> cosine_periods{92000, 208000};
  double lr_min = 1e-6;
  std::size_t total_iters = 300000;
  std::size_t patch = 256;
  std::size_t batch = 32;
  bool flips = true;
  /// Noise level for denoising; 0 draws sigma uniformly from (0, 50].
  double noise_sigma = 50.0;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  /// Same schedule shape squeezed into `iters` iterations: each period is
  /// scaled proportionally, the last absorbing rounding.
  TrainConfig compressed(std::size_t iters) const {
    TrainConfig c = *this;
    if (iters == 0) {
      c.cosine_periods.clear();
      c.total_iters = 0;
      return c;
    }
    const std::size_t total = total_iters;
    std::size_t used = 0;
    for (std::size_t i = 0; i < c.cosine_periods.size(); ++i) {
      if (i + 1 == c.cosine_periods.size()) {
        c.cosine_periods[i] = iters - used;
      } else {
        c.cosine_periods[i] = static_cast<std::size_t>(
            std::llround(static_cast<double>(cosine_periods[i]) * static_cast<double>(iters) / static_cast<double>(total)));
        used += c.cosine_periods[i];
      }
    }
    c.total_iters = iters;
    return c;
  }

  void validate() const {
    std::size_t sum = 0;
    for (std::size_t p : cosine_periods) {
      if (p == 0) throw ConfigError("cosine periods must be positive");
      sum += p;
    }
    if ((cosine_periods.empty() && total_iters != 0) || sum != total_iters) {
      throw ConfigError("cosine periods sum to " + std::to_string(sum) + ", expected total_iters " +
                        std::to_string(total_iters));
    }
    if (!(lr_min > 0 && lr_min < lr0)) throw ConfigError("need 0 < lr_min < lr0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (patch == 0 || batch == 0) throw ConfigError("patch and batch must be positive");
    if (!(noise_sigma >= 0 && noise_sigma <= 50)) throw ConfigError("noise_sigma must lie in [0, 50]");
    if (log_every == 0) throw ConfigError("log_every must be positive");
  }
};

// ---------------------------------------------------------------------------
// Loss, schedule, optimizer

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ContractError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

/// Cosine annealing from lr0 to lr_min within each period, restarting at
/// every period boundary.
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.total_iters) {
    throw ContractError("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                        std::to_string(cfg.total_iters) + ")");
  }
  std::size_t start = 0;
  for (std::size_t period : cfg.cosine_periods) {
    if (iter < start + period) {
      const double phase = static_cast<double>(iter - start) / static_cast<double>(period);
      return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
    }
    start += period;
  }
  throw ContractError("lr_at: periods do not cover iteration " + std::to_string(iter));
}

template <class T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;  // parallel to ParameterSet::entries()

  static OptimizerState zeros_like(const ParameterSet<T>& params) {
    OptimizerState s;
    for (const auto& [_, p] : params.entries()) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One AdamW update of every parameter from its accumulated gradient
/// (missing gradients count as zero). Weight decay is decoupled and applied
/// first: theta <- theta (1 - lr wd), then the bias-corrected Adam step.
template <class T>
void adamw_step(ParameterSet<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ContractError("adamw_step: optimizer state does not match the parameter set");
  }
  for (const auto& [name, p] : entries) {
    for (T g : p.grad_data()) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in " + name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T step = static_cast<T>(lr / bc1);
  const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T> p = entries[i].second;
    auto theta = p.data();
    auto g = p.grad_data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    if (m.size() != theta.size()) throw ContractError("adamw_step: moment shape mismatch for " + entries[i].first);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const T gk = g.empty() ? T(0) : g[k];
      theta[k] *= decay;
      m[k] = b1 * m[k] + (T(1) - b1) * gk;
      v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
      theta[k] -= step * m[k] / (std::sqrt(v[k]) / sqrt_bc2 + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  TaskMode task{};
  std::vector<Image> clean;
  /// Optional stored inputs parallel to `clean` (low-resolution for SR).
  /// When empty, inputs are synthesised on the fly.
  std::vector<Image> degraded;
};

template <class T>
struct Batch {
  Tensor<T> input;   // network input, already bilinearly upsampled for SR
  Tensor<T> target;
  std::vector<Task> tasks;
};

inline constexpr Task kAllInOneTasks[] = {Task::sr, Task::denoise, Task::deblur, Task::derain, Task::dehaze};

/// Uniform over the five restoration tasks.
inline Task draw_task(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  return kAllInOneTasks[pick(rng)];
}

/// A random degradation for `task`; the level is drawn from the training
/// ranges unless fixed by the mode or config.
inline DegradationSpec draw_degradation(Task task, const TaskMode& mode, const TrainConfig& cfg,
                                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (task) {
    case Task::sr: {
      if (mode.task == Task::sr) return SrSpec{mode.sr_scale};
      return SrSpec{u(rng) < 0.5 ? std::size_t{2} : std::size_t{4}};
    }
    case Task::denoise: {
      double sigma = cfg.noise_sigma;
      if (mode.task == Task::all_in_one || sigma == 0.0) {
        sigma = 50.0 * (1.0 - u(rng));  // (0, 50]
      }
      return NoiseSpec{sigma, rng()};
    }
    case Task::deblur: {
      const double length = 3.0 + 12.0 * u(rng);
      const double angle = 180.0 * u(rng);
      return linear_trajectory(static_cast<std::size_t>(std::ceil(length)) + 1, length, angle);
    }
    case Task::derain: {
      RainSpec r;
      r.density = 0.005 + 0.025 * u(rng);
      r.length = 8.0 + 16.0 * u(rng);
      r.angle = 60.0 + 60.0 * u(rng);
      r.intensity = 0.3 + 0.5 * u(rng);
      r.seed = rng();
      return r;
    }
    case Task::dehaze: {
      HazeSpec h;
      h.beta = 0.5 + 1.5 * u(rng);
      h.atmosphere = 0.7 + 0.3 * u(rng);
      h.depth = DepthKind::smooth;
      h.seed = rng();
      return h;
    }
    case Task::all_in_one: break;
  }
  throw ContractError("draw_degradation: no single task");
}

/// Random aligned crops with optional flips, degraded per sample.
template <class T>
Batch<T> sample_batch(const Dataset& data, const TrainConfig& cfg, std::mt19937_64& rng) {
  if (data.clean.empty()) throw ContractError("sample_batch: empty dataset");
  if (!data.degraded.empty() && data.degraded.size() != data.clean.size()) {
    throw ContractError("sample_batch: degraded and clean lists differ in length");
  }
  const std::size_t P = cfg.patch;
  std::vector<Image> inputs, targets;
  Batch<T> batch;
  std::uniform_int_distribution<std::size_t> pick_image(0, data.clean.size() - 1);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const Image& gt = data.clean[pick_image(rng)];
    const std::size_t index = static_cast<std::size_t>(&gt - data.clean.data());
    if (P > gt.height || P > gt.width) {
      throw ContractError("sample_batch: patch " + std::to_string(P) + " larger than image " +
                          std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    const Task task = data.task.task == Task::all_in_one ? draw_task(rng) : data.task.task;
    const bool stored = !data.degraded.empty();
    const std::size_t scale = (task == Task::sr && stored) ? data.task.sr_scale : 1;
    // Crop origin on the coarse grid so a stored LR counterpart stays aligned.
    std::uniform_int_distribution<std::size_t> top(0, (gt.height - P) / scale);
    std::uniform_int_distribution<std::size_t> left(0, (gt.width - P) / scale);
    const std::size_t y0 = top(rng) * scale, x0 = left(rng) * scale;
    Image target = crop(gt, y0, x0, P, P);
    Image input;
    if (stored) {
      input = crop(data.degraded[index], y0 / scale, x0 / scale, P / scale, P / scale);
    }
    const bool fh = cfg.flips && coin(rng), fv = cfg.flips && coin(rng);
    if (fh) target = flip_horizontal(target);
    if (fv) target = flip_vertical(target);
    if (stored) {
      if (fh) input = flip_horizontal(input);
      if (fv) input = flip_vertical(input);
    } else {
      input = degrade(target, draw_degradation(task, data.task, cfg, rng));
    }
    inputs.push_back(std::move(input));
    targets.push_back(std::move(target));
    batch.tasks.push_back(task);
  }
  // SR inputs are smaller: bring every input to the patch size bilinearly.
  std::vector<Image> resized;
  for (auto& in : inputs) {
    if (in.height != P || in.width != P) {
      NoGradGuard guard;
      resized.push_back(to_image(bilinear_resize(to_tensor<double>(in), P, P)));
    } else {
      resized.push_back(std::move(in));
    }
  }
  batch.input = to_tensor<T>(resized);
  batch.target = to_tensor<T>(targets);
  return batch;
}

/// Generator for everything random in iteration `iter`.
inline std::mt19937_64 iteration_rng(std::uint64_t seed, std::size_t iter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(std::uint64_t(iter) >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Loop

struct LossRecord {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  bool operator==(const LossRecord&) const = default;
};

template <class T>
struct TrainCallbacks {
  /// Called with the loss of every log_every-th iteration and of the last.
  std::function<void(const LossRecord&)> on_log;
  /// Called every checkpoint_every iterations and after the last one.
  std::function<void(const ModelState<T>&, const OptimizerState<T>&)> on_checkpoint;
  /// Called after every iteration with (iterations done, loss); returning
  /// false stops training early.
  std::function<bool(std::size_t, double)> keep_going;
};

/// Runs iterations model.step .. cfg.total_iters - 1, returning the logged
/// records. model.step and the optimizer step advance together.
template <class T>
std::vector<LossRecord> train(ModelState<T>& model, OptimizerState<T>& opt, const Dataset& data,
                              const TrainConfig& cfg, const TrainCallbacks<T>& cb = {}) {
  cfg.validate();
  if (model.config.task_mode != data.task) {
    throw ContractError("train: model task " + to_string(model.config.task_mode) + " but dataset task " +
                        to_string(data.task));
  }
  std::vector<LossRecord> trace;
  while (model.step < cfg.total_iters) {
    const std::size_t iter = model.step;
    auto rng = iteration_rng(cfg.seed, iter);
    const Batch<T> batch = sample_batch<T>(data, cfg, rng);
    const double lr = lr_at(iter, cfg);
    model.params.zero_grad();
    auto loss = l1_loss(forward(model, batch.input), batch.target);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("train: non-finite loss " + std::to_string(value) + " at iteration " + std::to_string(iter) +
                         " (lr " + std::to_string(lr) + ")");
    }
    backward(loss);
    adamw_step(model.params, opt, lr, cfg);
    model.params.zero_grad();
    ++model.step;
    const bool last = model.step == cfg.total_iters;
    if (iter % cfg.log_every == 0 || last) {
      LossRecord rec{iter, lr, value};
      trace.push_back(rec);
      if (cb.on_log) cb.on_log(rec);
    }
    const bool stop = cb.keep_going && !cb.keep_going(model.step, value);
    if (cb.on_checkpoint && ((cfg.checkpoint_every && model.step % cfg.checkpoint_every == 0) || last || stop)) {
      cb.on_checkpoint(model, opt);
    }
    if (stop) break;
  }
  return trace;
}

}  // namespace xrestormer
