#include "kd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace kd::ops {
namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw DimensionError("axis out of range");
  return axis;
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    const auto e = static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    if (i < axis) s.outer *= e;
    else if (i == axis) s.extent = e;
    else s.inner *= e;
  }
  return s;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(Graph<T>& g, std::string_view name, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  if (g.wants_grad({&a})) {
    g.record(name, {&a}, out, [a = a, out, deriv]() mutable {
      auto x = a.data();
      auto y = out.data();
      auto gy = out.grad();
      if (!a.requires_grad()) return;
      auto gx = a.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * deriv(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != 2 || a.dim(-1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto k = b.dim(0);
  const auto n = b.dim(1);
  const auto m = static_cast<std::int64_t>(a.numel()) / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  MatMap<T>(out.ptr(), m, n).noalias() = ConstMatMap<T>(a.ptr(), m, k) * ConstMatMap<T>(b.ptr(), k, n);
  if (g.wants_grad({&a, &b})) {
    g.record("matmul", {&a, &b}, out, [a = a, b = b, out, m, k = k, n]() mutable {
      ConstMatMap<T> gy(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap<T>(a.grad().data(), m, k).noalias() += gy * ConstMatMap<T>(b.ptr(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap<T>(b.grad().data(), k, n).noalias() += ConstMatMap<T>(a.ptr(), m, k).transpose() * gy;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  auto y = out.data();
  auto x = a.data();
  auto z = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
  if (g.wants_grad({&a, &b})) {
    g.record("add", {&a, &b}, out, [a = a, b = b, out]() mutable {
      std::span<const T> gy = out.grad();
      if (a.requires_grad()) accumulate(a.grad(), gy);
      if (b.requires_grad()) accumulate(b.grad(), gy);
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  auto y = out.data();
  auto x = a.data();
  auto z = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  if (g.wants_grad({&a, &b})) {
    g.record("sub", {&a, &b}, out, [a = a, b = b, out]() mutable {
      std::span<const T> gy = out.grad();
      if (a.requires_grad()) accumulate(a.grad(), gy);
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto y = out.data();
  auto x = a.data();
  auto z = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  if (g.wants_grad({&a, &b})) {
    g.record("mul", {&a, &b}, out, [a = a, b = b, out]() mutable {
      std::span<const T> gy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto z = b.data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * z[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * x[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor) {
  return unary(
      g, "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(Graph<T>& g, const Tensor<T>& a, T value) {
  return unary(
      g, "add_scalar", a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(Graph<T>& g, const Tensor<T>& a) {
  return unary(
      g, "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(Graph<T>& g, const Tensor<T>& a, T floor) {
  return unary(
      g, "log", a, [floor](T x) { return std::log(std::max(x, floor)); },
      [floor](T x, T) { return x > floor ? T(1) / x : T(0); });
}

template <class T>
Tensor<T> silu(Graph<T>& g, const Tensor<T>& a) {
  const auto n = static_cast<Eigen::Index>(a.numel());
  Tensor<T> out(a.shape());
  ConstArrMap<T> x(a.ptr(), n);
  ArrMap<T>(out.ptr(), n) = x / (T(1) + (-x).exp());
  if (g.wants_grad({&a})) {
    g.record("silu", {&a}, out, [a = a, out, n]() mutable {
      ConstArrMap<T> x(a.ptr(), n);
      ConstArrMap<T> gy(out.grad().data(), n);
      const auto sig = (T(1) + (-x).exp()).inverse();
      ArrMap<T>(a.grad().data(), n) += gy * sig * (T(1) + x * (T(1) - sig));
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (g.wants_grad({&a})) {
    g.record("reshape", {&a}, out, [a = a, out]() mutable { accumulate(a.grad(), std::span<const T>(out.grad())); });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Graph<T>& g, const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
  const auto r = a.dim(0);
  const auto c = a.dim(1);
  Tensor<T> out({c, r});
  MatMap<T>(out.ptr(), c, r) = ConstMatMap<T>(a.ptr(), r, c).transpose();
  if (g.wants_grad({&a})) {
    g.record("transpose", {&a}, out, [a = a, out, r, c]() mutable {
      MatMap<T>(a.grad().data(), r, c) += ConstMatMap<T>(out.grad().data(), c, r).transpose();
    });
  }
  return out;
}

template <class T>
Tensor<T> slice(Graph<T>& g, const Tensor<T>& a, int axis, std::int64_t begin, std::int64_t end) {
  axis = normalize_axis(axis, a.ndim());
  if (begin < 0 || end > a.dim(axis) || begin >= end) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
  }
  const auto s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = end - begin;
  Tensor<T> out(out_shape);
  const auto len = static_cast<std::size_t>(end - begin);
  const auto off = static_cast<std::size_t>(begin);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.ptr() + (o * s.extent + off) * s.inner, len * s.inner, out.ptr() + o * len * s.inner);
  }
  if (g.wants_grad({&a})) {
    g.record("slice", {&a}, out, [a = a, out, s, len, off]() mutable {
      auto ga = a.grad();
      auto gy = out.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < len * s.inner; ++i) {
          ga[(o * s.extent + off) * s.inner + i] += gy[o * len * s.inner + i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  axis = normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    probe[static_cast<std::size_t>(axis)] = out_shape[static_cast<std::size_t>(axis)];
    if (probe != out_shape) {
      throw DimensionError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out(out_shape);
  const auto s = split_at(out_shape, axis);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto len = static_cast<std::size_t>(p.dim(axis));
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.ptr() + o * len * s.inner, len * s.inner, out.ptr() + (o * s.extent + offset) * s.inner);
    }
    offset += len;
  }
  std::vector<const Tensor<T>*> inputs;
  bool any = false;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    any = any || p.requires_grad();
  }
  if (g.recording() && any) {
    g.record("concat", inputs, out, [parts = parts, out, s, offsets, axis]() mutable {
      auto gy = out.grad();
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto& p = parts[pi];
        if (!p.requires_grad()) continue;
        auto gp = p.grad();
        const auto len = static_cast<std::size_t>(p.dim(axis));
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < len * s.inner; ++i) {
            gp[o * len * s.inner + i] += gy[(o * s.extent + offsets[pi]) * s.inner + i];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a) {
  double acc = 0.0;
  for (T x : a.data()) acc += static_cast<double>(x);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (g.wants_grad({&a})) {
    g.record("sum", {&a}, out, [a = a, out]() mutable {
      const T gy = out.grad()[0];
      for (auto& v : a.grad()) v += gy;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a) {
  return scale(g, sum(g, a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  const auto s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  auto y = out.data();
  auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
  if (g.wants_grad({&a})) {
    g.record("sum_axis", {&a}, out, [a = a, out, s]() mutable {
      auto gx = a.grad();
      auto gy = out.grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.extent + e) * s.inner + i] += gy[o * s.inner + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a, int axis) {
  const auto extent = a.dim(axis);
  return scale(g, sum(g, a, axis), T(1) / static_cast<T>(extent));
}

template <class T>
Tensor<T> dot(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("dot", a, b);
  // Accumulate in double; losses rely on this exact summation order.
  double acc = 0.0;
  auto x = a.data();
  auto z = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * static_cast<double>(z[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (g.wants_grad({&a, &b})) {
    g.record("dot", {&a, &b}, out, [a = a, b = b, out]() mutable {
      const T gy = out.grad()[0];
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto z = b.data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy * z[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy * x[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> embedding(Graph<T>& g, const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const auto vocab = table.dim(0);
  const auto d = static_cast<std::size_t>(table.dim(1));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                            " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Tensor<T> out({static_cast<std::int64_t>(ids.size()), static_cast<std::int64_t>(d)});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  }
  if (g.wants_grad({&table})) {
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    g.record("embedding", {&table}, out, [table = table, out, kept, d]() mutable {
      auto gt = table.grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        T* row = gt.data() + static_cast<std::size_t>(kept[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += gy[i * d + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> rms_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  const auto d = static_cast<std::size_t>(x.dim(-1));
  if (gain.numel() != d) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> inv_rms(rows);
  const T* xp = x.ptr();
  const T* wp = gain.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T ms = T(0);
    for (std::size_t j = 0; j < d; ++j) ms += xp[r * d + j] * xp[r * d + j];
    ms /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(ms + static_cast<T>(eps));
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) yp[r * d + j] = xp[r * d + j] * inv * wp[j];
  }
  if (g.wants_grad({&x, &gain})) {
    g.record("rms_norm", {&x, &gain}, out, [x = x, gain = gain, out, inv_rms, rows, d]() mutable {
      const T* xp = x.ptr();
      const T* wp = gain.ptr();
      const T* gy = out.grad().data();
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      T* gw = gain.requires_grad() ? gain.grad().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const T inv = inv_rms[r];
        const T* xr = xp + r * d;
        const T* gr = gy + r * d;
        if (gw) {
          for (std::size_t j = 0; j < d; ++j) gw[j] += gr[j] * xr[j] * inv;
        }
        if (gx) {
          T proj = T(0);
          for (std::size_t j = 0; j < d; ++j) proj += gr[j] * wp[j] * xr[j];
          const T coef = proj * inv * inv * inv / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * wp[j] * gr[j] - xr[j] * coef;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> rope(Graph<T>& g, const Tensor<T>& x, int n_heads, std::span<const std::int32_t> positions,
               double base) {
  if (x.ndim() != 2) throw DimensionError("rope: expected [N, d], got " + shape_str(x.shape()));
  const auto n = static_cast<std::size_t>(x.dim(0));
  const auto d = static_cast<std::size_t>(x.dim(1));
  if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0 || (d / static_cast<std::size_t>(n_heads)) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(d) + " not splittable into " + std::to_string(n_heads) +
                         " even-sized heads");
  }
  if (positions.size() != n) throw DimensionError("rope: one position per row required");
  const std::size_t hd = d / static_cast<std::size_t>(n_heads);
  const std::size_t half = hd / 2;
  std::int32_t max_pos = 0;
  for (auto p : positions) {
    if (p < 0) throw DimensionError("rope: negative position");
    max_pos = std::max(max_pos, p);
  }
  // Angle table indexed by (position, pair).
  std::vector<T> cos_t((static_cast<std::size_t>(max_pos) + 1) * half);
  std::vector<T> sin_t(cos_t.size());
  for (std::size_t p = 0; p <= static_cast<std::size_t>(max_pos); ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(p) * freq;
      cos_t[p * half + i] = static_cast<T>(std::cos(angle));
      sin_t[p * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  std::vector<std::int32_t> pos(positions.begin(), positions.end());
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < n; ++r) {
    const T* c = cos_t.data() + static_cast<std::size_t>(pos[r]) * half;
    const T* s = sin_t.data() + static_cast<std::size_t>(pos[r]) * half;
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
      const std::size_t o = r * d + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const T x0 = xp[o + 2 * i];
        const T x1 = xp[o + 2 * i + 1];
        yp[o + 2 * i] = x0 * c[i] - x1 * s[i];
        yp[o + 2 * i + 1] = x0 * s[i] + x1 * c[i];
      }
    }
  }
  if (g.wants_grad({&x})) {
    g.record("rope", {&x}, out,
             [x = x, out, pos = std::move(pos), cos_t = std::move(cos_t), sin_t = std::move(sin_t), n, d, hd, half,
              n_heads]() mutable {
               T* gx = x.grad().data();
               const T* gy = out.grad().data();
               for (std::size_t r = 0; r < n; ++r) {
                 const T* c = cos_t.data() + static_cast<std::size_t>(pos[r]) * half;
                 const T* s = sin_t.data() + static_cast<std::size_t>(pos[r]) * half;
                 for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
                   const std::size_t o = r * d + h * hd;
                   for (std::size_t i = 0; i < half; ++i) {
                     const T g0 = gy[o + 2 * i];
                     const T g1 = gy[o + 2 * i + 1];
                     gx[o + 2 * i] += g0 * c[i] + g1 * s[i];
                     gx[o + 2 * i + 1] += -g0 * s[i] + g1 * c[i];
                   }
                 }
               }
             });
  }
  return out;
}

namespace {

template <class T>
void softmax_backward_rows(const T* p, const T* gy, T* gx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* pr = p + r * cols;
    const T* gr = gy + r * cols;
    T dotp = T(0);
    for (std::size_t j = 0; j < cols; ++j) dotp += pr[j] * gr[j];
    for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += pr[j] * (gr[j] - dotp);
  }
}

}  // namespace

template <class T>
Tensor<T> masked_softmax(Graph<T>& g, const Tensor<T>& scores, const Tensor<T>& mask) {
  const int mdim = mask.ndim();
  if (mdim > scores.ndim() ||
      !std::equal(mask.shape().begin(), mask.shape().end(), scores.shape().end() - mdim)) {
    throw DimensionError("masked_softmax: mask " + shape_str(mask.shape()) + " does not cover trailing axes of " +
                         shape_str(scores.shape()));
  }
  const auto cols = static_cast<std::size_t>(scores.dim(-1));
  const std::size_t rows = scores.numel() / cols;
  const std::size_t mask_rows = mask.numel() / cols;
  const T blocked = static_cast<T>(kMaskValue / 2);
  Tensor<T> out(scores.shape());
  const T* sp = scores.ptr();
  const T* mp = mask.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = sp + r * cols;
    const T* m = mp + (r % mask_rows) * cols;
    T* y = yp + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (m[j] > blocked) {
        mx = std::max(mx, s[j] + m[j]);
        any = true;
      }
    }
    if (!any) throw DegenerateRowError("masked_softmax: row " + std::to_string(r) + " has no allowed position");
    const auto n = static_cast<Eigen::Index>(cols);
    ConstArrMap<T> sv(s, n);
    ConstArrMap<T> mv(m, n);
    ArrMap<T> yv(y, n);
    yv = (mv > blocked).select((sv + mv - mx).exp(), T(0));
    yv *= T(1) / yv.sum();
  }
  if (g.wants_grad({&scores})) {
    g.record("masked_softmax", {&scores}, out, [scores = scores, out, rows, cols]() mutable {
      softmax_backward_rows(out.ptr(), out.grad().data(), scores.grad().data(), rows, cols);
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x) {
  const auto cols = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = xp + r * cols;
    T* y = yp + r * cols;
    const T mx = *std::max_element(s, s + cols);
    ArrMap<T> yv(y, static_cast<Eigen::Index>(cols));
    yv = (ConstArrMap<T>(s, static_cast<Eigen::Index>(cols)) - mx).exp();
    yv *= T(1) / yv.sum();
  }
  if (g.wants_grad({&x})) {
    g.record("softmax", {&x}, out, [x = x, out, rows, cols]() mutable {
      softmax_backward_rows(out.ptr(), out.grad().data(), x.grad().data(), rows, cols);
    });
  }
  return out;
}

template <class T>
Tensor<T> log_softmax(Graph<T>& g, const Tensor<T>& x) {
  const auto cols = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = xp + r * cols;
    T* y = yp + r * cols;
    const T mx = *std::max_element(s, s + cols);
    const T total = (ConstArrMap<T>(s, static_cast<Eigen::Index>(cols)) - mx).exp().sum();
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) y[j] = s[j] - lse;
  }
  if (g.wants_grad({&x})) {
    g.record("log_softmax", {&x}, out, [x = x, out, rows, cols]() mutable {
      const T* y = out.ptr();
      const T* gy = out.grad().data();
      T* gx = x.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        T total = T(0);
        for (std::size_t j = 0; j < cols; ++j) total += gy[r * cols + j];
        const auto n = static_cast<Eigen::Index>(cols);
        ArrMap<T>(gx + r * cols, n) +=
            ConstArrMap<T>(gy + r * cols, n) - ConstArrMap<T>(y + r * cols, n).exp() * total;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> causal_mask(std::int64_t t) {
  Tensor<T> mask({t, t});
  T* m = mask.ptr();
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = i + 1; j < t; ++j) m[i * t + j] = static_cast<T>(kMaskValue);
  return mask;
}

template <class T>
Tensor<T> attention_scores(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, std::int64_t batch, int n_heads,
                           T factor) {
  require_same_shape("attention_scores", q, k);
  if (q.ndim() != 2 || q.dim(0) % batch != 0 || q.dim(1) % n_heads != 0) {
    throw DimensionError("attention_scores: cannot split " + shape_str(q.shape()) + " into batch " +
                         std::to_string(batch) + " and " + std::to_string(n_heads) + " heads");
  }
  const std::int64_t t = q.dim(0) / batch;
  const std::int64_t d = q.dim(1);
  const std::int64_t hd = d / n_heads;
  Tensor<T> out({batch, n_heads, t, t});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < n_heads; ++h) {
      ConstStridedMap<T> qb(q.ptr() + b * t * d + h * hd, t, hd, Eigen::OuterStride<>(d));
      ConstStridedMap<T> kb(k.ptr() + b * t * d + h * hd, t, hd, Eigen::OuterStride<>(d));
      MatMap<T>(out.ptr() + (b * n_heads + h) * t * t, t, t).noalias() = factor * (qb * kb.transpose());
    }
  }
  if (g.wants_grad({&q, &k})) {
    g.record("attention_scores", {&q, &k}, out, [q = q, k = k, out, batch, n_heads, t, d, hd, factor]() mutable {
      T* gq = q.requires_grad() ? q.grad().data() : nullptr;
      T* gk = k.requires_grad() ? k.grad().data() : nullptr;
      const T* gs = out.grad().data();
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < n_heads; ++h) {
          ConstMatMap<T> gsb(gs + (b * n_heads + h) * t * t, t, t);
          const auto off = b * t * d + h * hd;
          if (gq) {
            ConstStridedMap<T> kb(k.ptr() + off, t, hd, Eigen::OuterStride<>(d));
            StridedMap<T>(gq + off, t, hd, Eigen::OuterStride<>(d)).noalias() += factor * (gsb * kb);
          }
          if (gk) {
            ConstStridedMap<T> qb(q.ptr() + off, t, hd, Eigen::OuterStride<>(d));
            StridedMap<T>(gk + off, t, hd, Eigen::OuterStride<>(d)).noalias() += factor * (gsb.transpose() * qb);
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> attention_apply(Graph<T>& g, const Tensor<T>& p, const Tensor<T>& v, std::int64_t batch, int n_heads) {
  if (v.ndim() != 2 || v.dim(0) % batch != 0 || v.dim(1) % n_heads != 0) {
    throw DimensionError("attention_apply: cannot split " + shape_str(v.shape()));
  }
  const std::int64_t t = v.dim(0) / batch;
  const std::int64_t d = v.dim(1);
  const std::int64_t hd = d / n_heads;
  if (p.shape() != Shape{batch, n_heads, t, t}) {
    throw DimensionError("attention_apply: probabilities " + shape_str(p.shape()) + " do not match values " +
                         shape_str(v.shape()));
  }
  Tensor<T> out(v.shape());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < n_heads; ++h) {
      const auto off = b * t * d + h * hd;
      ConstMatMap<T> pb(p.ptr() + (b * n_heads + h) * t * t, t, t);
      ConstStridedMap<T> vb(v.ptr() + off, t, hd, Eigen::OuterStride<>(d));
      StridedMap<T>(out.ptr() + off, t, hd, Eigen::OuterStride<>(d)).noalias() = pb * vb;
    }
  }
  if (g.wants_grad({&p, &v})) {
    g.record("attention_apply", {&p, &v}, out, [p = p, v = v, out, batch, n_heads, t, d, hd]() mutable {
      T* gp = p.requires_grad() ? p.grad().data() : nullptr;
      T* gv = v.requires_grad() ? v.grad().data() : nullptr;
      const T* go = out.grad().data();
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < n_heads; ++h) {
          const auto off = b * t * d + h * hd;
          ConstStridedMap<T> gob(go + off, t, hd, Eigen::OuterStride<>(d));
          if (gp) {
            ConstStridedMap<T> vb(v.ptr() + off, t, hd, Eigen::OuterStride<>(d));
            MatMap<T>(gp + (b * n_heads + h) * t * t, t, t).noalias() += gob * vb.transpose();
          }
          if (gv) {
            ConstMatMap<T> pb(p.ptr() + (b * n_heads + h) * t * t, t, t);
            StridedMap<T>(gv + off, t, hd, Eigen::OuterStride<>(d)).noalias() += pb.transpose() * gob;
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> topk_renormalize(Graph<T>& g, const Tensor<T>& probs, int k) {
  if (probs.ndim() != 2) throw DimensionError("topk_renormalize: expected [N, E], got " + shape_str(probs.shape()));
  const auto rows = static_cast<std::size_t>(probs.dim(0));
  const auto experts = static_cast<std::size_t>(probs.dim(1));
  if (k < 1 || static_cast<std::size_t>(k) > experts) {
    throw DimensionError("topk_renormalize: k=" + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
  }
  Tensor<T> out(probs.shape());
  std::vector<unsigned char> selected(probs.numel(), 0);
  std::vector<T> totals(rows);
  std::vector<std::size_t> order(experts);
  const T* pp = probs.ptr();
  T* yp = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = pp + r * experts;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    T total = T(0);
    for (int i = 0; i < k; ++i) {
      selected[r * experts + order[static_cast<std::size_t>(i)]] = 1;
      total += row[order[static_cast<std::size_t>(i)]];
    }
    totals[r] = total;
    for (std::size_t e = 0; e < experts; ++e) yp[r * experts + e] = selected[r * experts + e] ? row[e] / total : T(0);
  }
  if (g.wants_grad({&probs})) {
    g.record("topk_renormalize", {&probs}, out, [probs = probs, out, selected, totals, rows, experts]() mutable {
      const T* pp = probs.ptr();
      const T* gy = out.grad().data();
      T* gx = probs.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T total = totals[r];
        T weighted = T(0);
        for (std::size_t e = 0; e < experts; ++e) {
          if (selected[r * experts + e]) weighted += gy[r * experts + e] * pp[r * experts + e];
        }
        for (std::size_t e = 0; e < experts; ++e) {
          if (selected[r * experts + e]) gx[r * experts + e] += gy[r * experts + e] / total - weighted / (total * total);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mix_experts(Graph<T>& g, const Tensor<T>& weights, const std::vector<Tensor<T>>& outs) {
  if (weights.ndim() != 2 || static_cast<std::size_t>(weights.dim(1)) != outs.size()) {
    throw DimensionError("mix_experts: weights " + shape_str(weights.shape()) + " do not match " +
                         std::to_string(outs.size()) + " experts");
  }
  const auto rows = static_cast<std::size_t>(weights.dim(0));
  const std::size_t experts = outs.size();
  for (const auto& o : outs) {
    if (o.shape() != outs[0].shape() || static_cast<std::size_t>(o.dim(0)) != rows) {
      throw DimensionError("mix_experts: expert output " + shape_str(o.shape()) + " mismatched");
    }
  }
  const std::size_t d = outs[0].numel() / rows;
  Tensor<T> out(outs[0].shape());
  T* yp = out.ptr();
  const T* wp = weights.ptr();
  for (std::size_t e = 0; e < experts; ++e) {
    const T* xp = outs[e].ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const T w = wp[r * experts + e];
      for (std::size_t j = 0; j < d; ++j) yp[r * d + j] += w * xp[r * d + j];
    }
  }
  std::vector<const Tensor<T>*> inputs{&weights};
  bool any = weights.requires_grad();
  for (const auto& o : outs) {
    inputs.push_back(&o);
    any = any || o.requires_grad();
  }
  if (g.recording() && any) {
    g.record("mix_experts", inputs, out, [weights = weights, outs = outs, out, rows, experts, d]() mutable {
      const T* gy = out.grad().data();
      const T* wp = weights.ptr();
      T* gw = weights.requires_grad() ? weights.grad().data() : nullptr;
      for (std::size_t e = 0; e < experts; ++e) {
        auto& o = outs[e];
        const T* xp = o.ptr();
        T* go = o.requires_grad() ? o.grad().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const T w = wp[r * experts + e];
          T acc = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            acc += gy[r * d + j] * xp[r * d + j];
            if (go) go[r * d + j] += w * gy[r * d + j];
          }
          if (gw) gw[r * experts + e] += acc;
        }
      }
    });
  }
  return out;
}

#define KD_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> matmul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(Graph<T>&, const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(Graph<T>&, const Tensor<T>&, T);                                           \
  template Tensor<T> exp(Graph<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> log(Graph<T>&, const Tensor<T>&, T);                                                  \
  template Tensor<T> silu(Graph<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> reshape(Graph<T>&, const Tensor<T>&, Shape);                                          \
  template Tensor<T> transpose(Graph<T>&, const Tensor<T>&);                                               \
  template Tensor<T> slice(Graph<T>&, const Tensor<T>&, int, std::int64_t, std::int64_t);                  \
  template Tensor<T> concat(Graph<T>&, const std::vector<Tensor<T>>&, int);                                \
  template Tensor<T> sum(Graph<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mean(Graph<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> sum(Graph<T>&, const Tensor<T>&, int);                                                \
  template Tensor<T> mean(Graph<T>&, const Tensor<T>&, int);                                               \
  template Tensor<T> dot(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> embedding(Graph<T>&, const Tensor<T>&, std::span<const std::int32_t>);                \
  template Tensor<T> rms_norm(Graph<T>&, const Tensor<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> rope(Graph<T>&, const Tensor<T>&, int, std::span<const std::int32_t>, double);        \
  template Tensor<T> masked_softmax(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> softmax(Graph<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> log_softmax(Graph<T>&, const Tensor<T>&);                                             \
  template Tensor<T> causal_mask<T>(std::int64_t);                                                         \
  template Tensor<T> attention_scores(Graph<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t, int, T); \
  template Tensor<T> attention_apply(Graph<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t, int);    \
  template Tensor<T> topk_renormalize(Graph<T>&, const Tensor<T>&, int);                                   \
  template Tensor<T> mix_experts(Graph<T>&, const Tensor<T>&, const std::vector<Tensor<T>>&);

KD_INSTANTIATE_OPS(float)
KD_INSTANTIATE_OPS(double)

#undef KD_INSTANTIATE_OPS

}  // namespace kd::ops
