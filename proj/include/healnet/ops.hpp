#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "healnet/rng.hpp"
#include "healnet/tensor.hpp"

// Differentiable tensor operations. Every op records a tape node when any
// operand is tracked; reductions accumulate in double.

namespace healnet {

inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;

namespace detail {

inline Tensor finish(Tape* tape, Tensor out, Tape::BackwardFn fn) {
  return tape ? tape->record(std::move(out), std::move(fn)) : out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(a.shape()));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

/// Elementwise map y = f(x) with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<float> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  Tensor y(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return y;
  return tape->record(y, [x, y, df](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node())) {
      const auto xs = x.data();
      const auto ys = y.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs[i], ys[i]);
    }
  });
}

}  // namespace detail

/// [m x k] * [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<float> out(m * n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = as[i * k + p];
      const float* brow = &bs[p * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
  }
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, Tensor({m, n}, std::move(out)), [a, b, m, k, n](std::span<const float> g, Tape& t) {
    const auto as = a.data();
    const auto bs = b.data();
    if (float* ga = t.grad_ptr(a.node())) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(g[i * n + j]) * bs[p * n + j];
          ga[i * k + p] += static_cast<float>(s);
        }
    }
    if (float* gb = t.grad_ptr(b.node())) {
      std::vector<double> acc(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = as[i * k + p];
          for (std::size_t j = 0; j < n; ++j) acc[p * n + j] += av * g[i * n + j];
        }
      for (std::size_t q = 0; q < k * n; ++q) gb[q] += static_cast<float>(acc[q]);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.shape(), std::move(out)), [a, b](std::span<const float> g, Tape& t) {
    if (float* ga = t.grad_ptr(a.node()))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (float* gb = t.grad_ptr(b.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.shape(), std::move(out)), [a, b](std::span<const float> g, Tape& t) {
    if (float* ga = t.grad_ptr(a.node()))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (float* gb = t.grad_ptr(b.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.shape(), std::move(out)), [a, b](std::span<const float> g, Tape& t) {
    if (float* ga = t.grad_ptr(a.node()))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    if (float* gb = t.grad_ptr(b.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
  });
}

/// scale * x + shift, elementwise.
inline Tensor affine(const Tensor& x, float scale, float shift = 0.0f) {
  return detail::unary(
      x, [scale, shift](float v) { return scale * v + shift; }, [scale](float, float) { return scale; });
}

inline Tensor scale(const Tensor& x, float s) { return affine(x, s, 0.0f); }

/// x[..., n] + bias[n], broadcast over leading axes.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.rank() ? x.shape().back() : 0;
  if (bias.rank() != 1 || bias.dim(0) != n)
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  Tape* tape = common_tape({&x, &bias});
  return detail::finish(tape, Tensor(x.shape(), std::move(out)), [x, bias, n](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (float* gbias = t.grad_ptr(bias.node())) {
      std::vector<double> acc(n, 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i % n] += g[i];
      for (std::size_t j = 0; j < n; ++j) gbias[j] += static_cast<float>(acc[j]);
    }
  });
}

/// x[..., n] * gain[n], broadcast over leading axes.
inline Tensor mul_bias(const Tensor& x, const Tensor& gain) {
  const std::size_t n = x.rank() ? x.shape().back() : 0;
  if (gain.rank() != 1 || gain.dim(0) != n)
    throw DimensionError("mul_bias: gain " + to_string(gain.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * gain[i % n];
  Tape* tape = common_tape({&x, &gain});
  return detail::finish(tape, Tensor(x.shape(), std::move(out)), [x, gain, n](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gain[i % n];
    if (float* gg = t.grad_ptr(gain.node())) {
      std::vector<double> acc(n, 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i % n] += static_cast<double>(g[i]) * x[i];
      for (std::size_t j = 0; j < n; ++j) gg[j] += static_cast<float>(acc[j]);
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  Tape* tape = common_tape({&x});
  return detail::finish(tape, Tensor::scalar(static_cast<float>(s)), [x](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

/// Sum along one axis; the axis is removed from the shape.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis("sum_axis", x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<float> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += x[(o * s.len + l) * s.inner + in];
      out[o * s.inner + in] = static_cast<float>(acc);
    }
  Tape* tape = common_tape({&x});
  return detail::finish(tape, Tensor(std::move(shape), std::move(out)), [x, s](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
          for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.len + l) * s.inner + in] += g[o * s.inner + in];
  });
}

/// Natural log with inputs clamped below at `floor`; the gradient is zero
/// where the clamp is active.
inline Tensor log(const Tensor& x, float floor = 0.0f) {
  return detail::unary(
      x, [floor](float v) { return std::log(std::max(v, floor)); },
      [floor](float v, float) { return v < floor ? 0.0f : 1.0f / v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::fabs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor selu(const Tensor& x) {
  return detail::unary(
      x,
      [](float v) {
        return v > 0.0f ? static_cast<float>(kSeluLambda * v)
                        : static_cast<float>(kSeluLambda * kSeluAlpha * std::expm1(static_cast<double>(v)));
      },
      [](float v, float y) {
        return v > 0.0f ? static_cast<float>(kSeluLambda) : static_cast<float>(y + kSeluLambda * kSeluAlpha);
      });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](float v) {
        const double d = v;
        return static_cast<float>(d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d)));
      },
      [](float, float y) { return y * (1.0f - y); });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis("softmax", x.shape(), axis);
  std::vector<float> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + in; };
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, x[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(static_cast<double>(x[at(l)]) - mx);
      for (std::size_t l = 0; l < s.len; ++l)
        out[at(l)] = static_cast<float>(std::exp(static_cast<double>(x[at(l)]) - mx) / z);
    }
  Tensor y(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return y;
  return tape->record(y, [x, y, s](std::span<const float> g, Tape& t) {
    float* gx = t.grad_ptr(x.node());
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + in; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += static_cast<double>(g[at(l)]) * y[at(l)];
        for (std::size_t l = 0; l < s.len; ++l)
          gx[at(l)] += static_cast<float>(y[at(l)] * (g[at(l)] - dot));
      }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor y(std::move(shape), x.values());
  Tape* tape = common_tape({&x});
  return detail::finish(tape, y, [x](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  Tape* tape = common_tape({&x});
  return detail::finish(tape, Tensor({c, r}, std::move(out)), [x, r, c](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

/// Concatenate along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& first = parts.front().shape();
  Shape shape = first;
  detail::split_axis("concat", first, axis);
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + to_string(a) + " vs " + to_string(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shape mismatch " + to_string(p.shape()) + " vs " + to_string(first));
    shape[axis] += p.dim(axis);
  }
  const auto s = detail::split_axis("concat", shape, axis);
  std::vector<float> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < s.inner; ++in)
          out[(o * s.len + off + l) * s.inner + in] = p[(o * len + l) * s.inner + in];
    off += len;
  }
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    Tape* pt = common_tape({&p});
    if (pt && tape && pt != tape) throw ContractError("concat: operands recorded on different tapes");
    if (pt) tape = pt;
  }
  return detail::finish(tape, Tensor(std::move(shape), std::move(out)),
                        [parts, offsets, s, axis](std::span<const float> g, Tape& t) {
                          for (std::size_t k = 0; k < parts.size(); ++k) {
                            float* gp = t.grad_ptr(parts[k].node());
                            if (!gp) continue;
                            const std::size_t len = parts[k].dim(axis);
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t l = 0; l < len; ++l)
                                for (std::size_t in = 0; in < s.inner; ++in)
                                  gp[(o * len + l) * s.inner + in] += g[(o * s.len + offsets[k] + l) * s.inner + in];
                          }
                        });
}

inline Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last_axis: no operands");
  return concat(parts, parts.front().rank() - 1);
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_axis("slice", x.shape(), axis);
  if (begin >= end || end > s.len)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<float> out(numel(shape));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[(o * len + l) * s.inner + in] = x[(o * s.len + begin + l) * s.inner + in];
  Tape* tape = common_tape({&x});
  return detail::finish(tape, Tensor(std::move(shape), std::move(out)),
                        [x, s, begin, len](std::span<const float> g, Tape& t) {
                          if (float* gx = t.grad_ptr(x.node()))
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t l = 0; l < len; ++l)
                                for (std::size_t in = 0; in < s.inner; ++in)
                                  gx[(o * s.len + begin + l) * s.inner + in] += g[(o * len + l) * s.inner + in];
                        });
}

/// Running sum along the last axis.
inline Tensor cumsum_last_axis(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("cumsum_last_axis: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = static_cast<float>(acc += x[r * n + j]);
  }
  Tape* tape = common_tape({&x});
  return detail::finish(tape, Tensor(x.shape(), std::move(out)), [x, n, rows](std::span<const float> g, Tape& t) {
    if (float* gx = t.grad_ptr(x.node()))
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = n; j-- > 0;) gx[r * n + j] += static_cast<float>(acc += g[r * n + j]);
      }
  });
}

/// Normalise each row of the last axis to zero mean and unit variance.
/// A zero-variance row maps to zeros.
inline Tensor layer_norm(const Tensor& x, float eps = 1e-5f) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  std::vector<float> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[r * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[r * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (std::size_t j = 0; j < n; ++j)
      out[r * n + j] = var == 0.0 ? 0.0f : static_cast<float>((x[r * n + j] - mu) * is);
  }
  Tensor y(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return y;
  return tape->record(y, [x, y, inv_std, n, rows](std::span<const float> g, Tape& t) {
    float* gx = t.grad_ptr(x.node());
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gm += g[r * n + j];
        gy += static_cast<double>(g[r * n + j]) * y[r * n + j];
      }
      gm /= static_cast<double>(n);
      gy /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] += static_cast<float>(inv_std[r] * (g[r * n + j] - gm - y[r * n + j] * gy));
    }
  });
}

/// Layer norm followed by a per-feature affine transform.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f) {
  return add_bias(mul_bias(layer_norm(x, eps), gain), bias);
}

/// Inverted dropout with a counter-based mask: element i is dropped iff
/// counter_uniform(key, i) < p. Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, float p, bool training, std::uint64_t key) {
  if (p < 0.0f || p >= 1.0f) throw ContractError("dropout: p must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = counter_uniform(key, i) < p ? 0.0f : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace healnet
