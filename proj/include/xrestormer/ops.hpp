#pragma once

// Differentiable primitives over Tensor<T>.
//
// Summation order is fixed for every reduction: either sequential in
// increasing index, or (long contiguous dot products) eight interleaved lanes
// combined pairwise at the end. Results are bitwise reproducible for a fixed
// input and build.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "xrestormer/tensor.hpp"

namespace xrestormer {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <class T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

/// sum_i a[i] * b[i] over eight interleaved partial sums; the fixed lane
/// structure lets the compiler vectorise without reassociating.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) lane[l] += a[i] * b[i];
  return ((lane[0] + lane[4]) + (lane[2] + lane[6])) + ((lane[1] + lane[5]) + (lane[3] + lane[7]));
}

template <class T>
T sum_n(const T* a, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lane[l] += a[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) lane[l] += a[i];
  return ((lane[0] + lane[4]) + (lane[2] + lane[6])) + ((lane[1] + lane[5]) + (lane[3] + lane[7]));
}

inline constexpr std::size_t kNoSource = std::numeric_limits<std::size_t>::max();

/// Row-major strides of a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// (outer, extent, inner) split of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// out[i] = x[map[i]], or 0 where map[i] == kNoSource. Backward scatter-adds.
/// Every rearrangement (permute, shuffles, window partitions) is expressed
/// through this primitive.
template <class T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape,
                 std::shared_ptr<const std::vector<std::size_t>> map) {
  if (map->size() != numel(out_shape)) {
    throw ShapeError("gather: index map length does not match " + shape_str(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  auto src = x.data();
  auto dst = out.data();
  const auto& m = *map;
  for (std::size_t i = 0; i < m.size(); ++i) {
    dst[i] = m[i] == detail::kNoSource ? T(0) : src[m[i]];
  }
  detail::record<T>(out, "gather", {x}, [map](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const auto& m = *map;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] != detail::kNoSource) g[m[i]] += self.grad[i];
    }
  });
  return out;
}

/// Same buffer contents under a new shape (copying; element count must match).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.to_vector());
  detail::record<T>(out, "reshape", {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) detail::accumulate<T>(in.grad_buffer(), self.grad);
  });
  return out;
}

/// Axis permutation: out axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in_shape = x.shape();
  if (perm.size() != in_shape.size()) {
    throw ShapeError("permute: permutation rank does not match " + shape_str(in_shape));
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape.at(perm[i]);
  const auto in_strides = detail::strides_of(in_shape);
  std::vector<std::size_t> src_stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_strides[perm[i]];

  auto map = std::make_shared<std::vector<std::size_t>>(numel(out_shape));
  std::vector<std::size_t> idx(perm.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < map->size(); ++i) {
    (*map)[i] = src;
    for (std::size_t ax = perm.size(); ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return gather<T>(x, std::move(out_shape), std::move(map));
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 on rank < 2 tensor " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  record<T>(out, op, {x}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in.data[i], self.data[i]);
  });
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::record<T>(out, "add", {a, b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) detail::accumulate<T>(in->grad_buffer(), self.grad);
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::record<T>(out, "sub", {a, b}, [](detail::Node<T>& self) {
    if (self.inputs[0]->requires_grad) detail::accumulate<T>(self.inputs[0]->grad_buffer(), self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::record<T>(out, "mul", {a, b}, [](detail::Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.data[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

/// Elementwise a + b where b broadcasts against the trailing axes of a; each
/// axis of b either matches a or has extent 1.
template <class T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul_broadcast(const Tensor<T>& a, const Tensor<T>& b);

namespace detail {

/// For each element of `big`, the flat index of the broadcast element of `small`.
inline std::shared_ptr<std::vector<std::size_t>> broadcast_map(const char* op, const Shape& big,
                                                               const Shape& small) {
  if (small.size() > big.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small) + " to " +
                     shape_str(big));
  }
  const std::size_t lead = big.size() - small.size();
  std::vector<std::size_t> stride(big.size(), 0);
  const auto small_strides = strides_of(small);
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] == big[lead + i]) {
      stride[lead + i] = small_strides[i];
    } else if (small[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small) + " to " +
                       shape_str(big));
    }
  }
  auto map = std::make_shared<std::vector<std::size_t>>(numel(big));
  std::vector<std::size_t> idx(big.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < map->size(); ++i) {
    (*map)[i] = src;
    for (std::size_t ax = big.size(); ax-- > 0;) {
      if (++idx[ax] < big[ax]) {
        src += stride[ax];
        break;
      }
      src -= stride[ax] * (big[ax] - 1);
      idx[ax] = 0;
    }
  }
  return map;
}

}  // namespace detail

template <class T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  auto map = detail::broadcast_map("add_broadcast", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[(*map)[i]];
  detail::record<T>(out, "add_broadcast", {a, b}, [map](detail::Node<T>& self) {
    if (self.inputs[0]->requires_grad) detail::accumulate<T>(self.inputs[0]->grad_buffer(), self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> mul_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  auto map = detail::broadcast_map("mul_broadcast", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[(*map)[i]];
  detail::record<T>(out, "mul_broadcast", {a, b}, [map](detail::Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.data[(*map)[i]];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i] * na.data[i];
    }
  });
  return out;
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::record<T>(out, "sum", {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

namespace detail {

/// Broadcast plan for the leading (batch) axes of two matrix operands:
/// the broadcast batch shape and, per batch entry, the matrix index into
/// each operand.
struct BatchPlan {
  Shape batch;
  std::vector<std::pair<std::size_t, std::size_t>> index;
};

inline BatchPlan plan_batches(const Shape& sa, const Shape& sb, const std::function<void()>& fail) {
  const std::size_t batch_rank = std::max(sa.size(), sb.size()) - 2;
  Shape ba(batch_rank, 1), bb(batch_rank, 1);
  BatchPlan plan{Shape(batch_rank, 1), {}};
  for (std::size_t i = 0; i < sa.size() - 2; ++i) ba[batch_rank - (sa.size() - 2) + i] = sa[i];
  for (std::size_t i = 0; i < sb.size() - 2; ++i) bb[batch_rank - (sb.size() - 2) + i] = sb[i];
  for (std::size_t i = 0; i < batch_rank; ++i) {
    if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1) fail();
    plan.batch[i] = std::max(ba[i], bb[i]);
  }
  const std::size_t nbatch = numel(plan.batch);
  plan.index.resize(nbatch);
  const auto stride_a = strides_of(ba);
  const auto stride_b = strides_of(bb);
  std::vector<std::size_t> idx(batch_rank, 0);
  for (std::size_t bi = 0; bi < nbatch; ++bi) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t ax = 0; ax < batch_rank; ++ax) {
      if (ba[ax] != 1) oa += idx[ax] * stride_a[ax];
      if (bb[ax] != 1) ob += idx[ax] * stride_b[ax];
    }
    plan.index[bi] = {oa, ob};
    for (std::size_t ax = batch_rank; ax-- > 0;) {
      if (++idx[ax] < plan.batch[ax]) break;
      idx[ax] = 0;
    }
  }
  return plan;
}

}  // namespace detail

/// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]. Leading
/// batch axes broadcast (right-aligned, equal or 1).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k) fail();
  auto plan = std::make_shared<detail::BatchPlan>(detail::plan_batches(sa, sb, fail));

  Shape out_shape = plan->batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  auto A = a.data(), B = b.data();
  auto C = out.data();
  for (std::size_t bi = 0; bi < plan->index.size(); ++bi) {
    const T* pa = A.data() + plan->index[bi].first * m * k;
    const T* pb = B.data() + plan->index[bi].second * k * n;
    T* pc = C.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = pc + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T aik = pa[i * k + kk];
        const T* brow = pb + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }

  detail::record<T>(out, "matmul", {a, b}, [plan, m, k, n](detail::Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t bi = 0; bi < plan->index.size(); ++bi) {
      const std::size_t oa = plan->index[bi].first * m * k, ob = plan->index[bi].second * k * n;
      const T* gc = self.grad.data() + bi * m * n;
      if (na.requires_grad) {
        // dA = dC * B^T
        T* ga = na.grad_buffer().data() + oa;
        const T* pb = nb.data.data() + ob;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += detail::dot(gc + i * n, pb + kk * n, n);
        }
      }
      if (nb.requires_grad) {
        // dB = A^T * dC
        T* gb = nb.grad_buffer().data() + ob;
        const T* pa = na.data.data() + oa;
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = gc + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            T* gbrow = gb + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    }
  });
  return out;
}

/// a * b^T for [..., m, k] x [..., n, k] -> [..., m, n]; equal to
/// matmul(a, transpose_last2(b)) without materialising the transpose.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb[sb.size() - 2];
  if (sb.back() != k) fail();
  auto plan = std::make_shared<detail::BatchPlan>(detail::plan_batches(sa, sb, fail));

  Shape out_shape = plan->batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  auto A = a.data(), B = b.data();
  auto C = out.data();
  for (std::size_t bi = 0; bi < plan->index.size(); ++bi) {
    const T* pa = A.data() + plan->index[bi].first * m * k;
    const T* pb = B.data() + plan->index[bi].second * n * k;
    T* pc = C.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) pc[i * n + j] = detail::dot(pa + i * k, pb + j * k, k);
    }
  }

  detail::record<T>(out, "matmul_nt", {a, b}, [plan, m, k, n](detail::Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t bi = 0; bi < plan->index.size(); ++bi) {
      const std::size_t oa = plan->index[bi].first * m * k, ob = plan->index[bi].second * n * k;
      const T* gc = self.grad.data() + bi * m * n;
      if (na.requires_grad) {
        // dA = dC * B
        T* ga = na.grad_buffer().data() + oa;
        const T* pb = nb.data.data() + ob;
        for (std::size_t i = 0; i < m; ++i) {
          T* garow = ga + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const T g = gc[i * n + j];
            const T* brow = pb + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) garow[kk] += g * brow[kk];
          }
        }
      }
      if (nb.requires_grad) {
        // dB = dC^T * A
        T* gb = nb.grad_buffer().data() + ob;
        const T* pa = na.data.data() + oa;
        for (std::size_t i = 0; i < m; ++i) {
          const T* arow = pa + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const T g = gc[i * n + j];
            T* gbrow = gb + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) gbrow[kk] += g * arow[kk];
          }
        }
      }
    }
  });
  return out;
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  auto src = x.data();
  for (T v : src) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  Tensor<T> out(x.shape());
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, src[base + e * sp.inner]);
      double total = 0.0;  // f32 accumulation drifts past 1e-6 on 144-wide rows
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const T v = std::exp(src[base + e * sp.inner] - mx);
        dst[base + e * sp.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) {
        T& v = dst[base + e * sp.inner];
        v = static_cast<T>(v / total);
      }
    }
  }
  detail::record<T>(out, "softmax", {x}, [sp](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        T dot = T(0);
        for (std::size_t e = 0; e < sp.extent; ++e) {
          dot += gy[base + e * sp.inner] * y[base + e * sp.inner];
        }
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t p = base + e * sp.inner;
          g[p] += y[p] * (gy[p] - dot);
        }
      }
    }
  });
  return out;
}

/// L2-normalises every slice along the last axis: x / max(||x||, eps).
template <class T>
Tensor<T> normalize_last(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x.rank() == 0) throw ShapeError("normalize_last on a scalar");
  const std::size_t len = x.shape().back();
  const std::size_t rows = len == 0 ? 0 : x.numel() / len;
  auto norms = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < len; ++j) ss += src[r * len + j] * src[r * len + j];
    const T nrm = std::max(std::sqrt(ss), eps);
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < len; ++j) dst[r * len + j] = src[r * len + j] / nrm;
  }
  detail::record<T>(out, "normalize_last", {x}, [norms, len, eps](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t r = 0; r < norms->size(); ++r) {
      const T nrm = (*norms)[r];
      const T* y = self.data.data() + r * len;
      const T* gy = self.grad.data() + r * len;
      T* gx = g.data() + r * len;
      if (nrm <= eps) {
        for (std::size_t j = 0; j < len; ++j) gx[j] += gy[j] / nrm;
        continue;
      }
      T dot = T(0);
      for (std::size_t j = 0; j < len; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < len; ++j) gx[j] += (gy[j] - y[j] * dot) / nrm;
    }
  });
  return out;
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    total += s[axis];
    s[axis] = shape[axis];
    if (s != shape) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    }
  }
  shape[axis] = total;
  const auto sp = detail::split_axis(shape, axis);
  Tensor<T> out(shape);
  auto dst = out.data();
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const auto& p : parts) {
    starts.push_back(start);
    const std::size_t ext = p.shape()[axis];
    auto src = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.data() + o * ext * sp.inner, ext * sp.inner,
                  dst.data() + (o * total + start) * sp.inner);
    }
    start += ext;
  }
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return out;
  auto* node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  node->op = "concat";
  for (const auto& p : parts) node->inputs.push_back(p.node_ptr());
  node->backward = [starts, sp, total](detail::Node<T>& self) {
    for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
      auto& in = *self.inputs[pi];
      if (!in.requires_grad) continue;
      const std::size_t ext = in.data.size() / (sp.outer * sp.inner);
      auto& g = in.grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + (o * total + starts[pi]) * sp.inner;
        T* gd = g.data() + o * ext * sp.inner;
        for (std::size_t j = 0; j < ext * sp.inner; ++j) gd[j] += src[j];
      }
    }
  };
  return out;
}

/// Sub-range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (begin > end || end > sp.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  auto src = x.data();
  auto dst = out.data();
  const std::size_t len = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(src.data() + (o * sp.extent + begin) * sp.inner, len, dst.data() + o * len);
  }
  detail::record<T>(out, "slice", {x}, [sp, begin, len](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* gd = g.data() + (o * sp.extent + begin) * sp.inner;
      const T* src = self.grad.data() + o * len;
      for (std::size_t j = 0; j < len; ++j) gd[j] += src[j];
    }
  });
  return out;
}

/// Splits `axis` into `chunks` equal parts.
template <class T>
std::vector<Tensor<T>> chunk(const Tensor<T>& x, std::size_t chunks, std::size_t axis) {
  const std::size_t ext = x.shape().at(axis);
  if (chunks == 0 || ext % chunks != 0) {
    throw ShapeError("chunk: extent " + std::to_string(ext) + " not divisible by " +
                     std::to_string(chunks));
  }
  std::vector<Tensor<T>> parts;
  const std::size_t step = ext / chunks;
  for (std::size_t c = 0; c < chunks; ++c) parts.push_back(slice(x, axis, c * step, (c + 1) * step));
  return parts;
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// Elementwise cast between precisions (no gradient).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.numel());
  auto src = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Tensor<To>(x.shape(), std::move(v));
}

}  // namespace xrestormer
