#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "mfrt/autograd.hpp"
#include "mfrt/tensor.hpp"

// Free-function forward primitives with reverse-mode derivatives. Shapes are
// checked eagerly; broadcasting is restricted to scalars, per-channel vectors
// (leading axis) and row vectors (trailing axis) -- the only forms the
// architecture needs.

namespace mfrt {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  check(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// elementwise binary (same shape)
// ---------------------------------------------------------------------------

template <class S, class Fwd, class Bwd>
Tensor<S> binary_pointwise(const Tensor<S>& a, const Tensor<S>& b, const char* name, Fwd fwd,
                           Bwd bwd) {
  check_same_shape(a, b, name);
  Tensor<S> y(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) y[i] = fwd(a[i], b[i]);
  if (auto* tape = tape_for<S>({&a, &b})) {
    y.mark_tracked();
    tape->record([a, b, y, bwd]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad();
      const i64 n = y.numel();
      for (i64 i = 0; i < n; ++i) {
        auto [da, db] = bwd(a[i], b[i], y[i]);
        if (a.tracked()) a.ensure_grad()[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * da;
        if (b.tracked()) b.ensure_grad()[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * db;
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_pointwise(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S) { return std::pair<S, S>(S(1), S(1)); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_pointwise(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S) { return std::pair<S, S>(S(1), S(-1)); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_pointwise(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S x, S y, S) { return std::pair<S, S>(y, x); });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_pointwise(
      a, b, "div", [](S x, S y) { return x / y; },
      [](S, S y, S out) { return std::pair<S, S>(S(1) / y, -out / y); });
}

// ---------------------------------------------------------------------------
// scalar broadcast
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> y(a.shape());
  for (i64 i = 0; i < a.numel(); ++i) y[i] = a[i] + c;
  if (auto* tape = tape_for<S>({&a})) {
    y.mark_tracked();
    tape->record([a, y]() mutable {
      if (!y.has_grad() || !a.tracked()) return;
      const auto& gy = y.grad();
      auto& ga = a.ensure_grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> y(a.shape());
  for (i64 i = 0; i < a.numel(); ++i) y[i] = a[i] * c;
  if (auto* tape = tape_for<S>({&a})) {
    y.mark_tracked();
    tape->record([a, y, c]() mutable {
      if (!y.has_grad() || !a.tracked()) return;
      const auto& gy = y.grad();
      auto& ga = a.ensure_grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// channel broadcast: x has shape [C, ...], v has C elements
// ---------------------------------------------------------------------------

template <class S, class Fwd, class Bwd>
Tensor<S> channel_pointwise(const Tensor<S>& x, const Tensor<S>& v, const char* name, Fwd fwd,
                            Bwd bwd) {
  check(x.rank() >= 1 && v.numel() == x.dim(0), name, ": channel vector of ", v.numel(),
        " values does not match leading axis of ", shape_str(x.shape()));
  const i64 C = x.dim(0);
  const i64 inner = x.numel() / C;
  Tensor<S> y(x.shape());
  for (i64 c = 0; c < C; ++c)
    for (i64 i = 0; i < inner; ++i) y[c * inner + i] = fwd(x[c * inner + i], v[c]);
  if (auto* tape = tape_for<S>({&x, &v})) {
    y.mark_tracked();
    tape->record([x, v, y, bwd, C, inner]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad();
      for (i64 c = 0; c < C; ++c) {
        S acc = S(0);
        for (i64 i = 0; i < inner; ++i) {
          const i64 k = c * inner + i;
          auto [dx, dv] = bwd(x[k], v[c]);
          if (x.tracked()) x.ensure_grad()[static_cast<size_t>(k)] += gy[static_cast<size_t>(k)] * dx;
          acc += gy[static_cast<size_t>(k)] * dv;
        }
        if (v.tracked()) v.ensure_grad()[static_cast<size_t>(c)] += acc;
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> add_channel(const Tensor<S>& x, const Tensor<S>& v) {
  return channel_pointwise(
      x, v, "add_channel", [](S a, S b) { return a + b; },
      [](S, S) { return std::pair<S, S>(S(1), S(1)); });
}

template <class S>
Tensor<S> sub_channel(const Tensor<S>& x, const Tensor<S>& v) {
  return channel_pointwise(
      x, v, "sub_channel", [](S a, S b) { return a - b; },
      [](S, S) { return std::pair<S, S>(S(1), S(-1)); });
}

template <class S>
Tensor<S> mul_channel(const Tensor<S>& x, const Tensor<S>& v) {
  return channel_pointwise(
      x, v, "mul_channel", [](S a, S b) { return a * b; },
      [](S a, S b) { return std::pair<S, S>(b, a); });
}

/// x[..., D] + v[D], broadcast over all leading axes (linear-layer bias).
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  const i64 D = v.numel();
  check(x.rank() >= 1 && x.dim(x.rank() - 1) == D, "add_rowvec: trailing axis of ",
        shape_str(x.shape()), " does not match vector length ", D);
  const i64 rows = x.numel() / D;
  Tensor<S> y(x.shape());
  for (i64 r = 0; r < rows; ++r)
    for (i64 j = 0; j < D; ++j) y[r * D + j] = x[r * D + j] + v[j];
  if (auto* tape = tape_for<S>({&x, &v})) {
    y.mark_tracked();
    tape->record([x, v, y, rows, D]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad();
      if (x.tracked()) {
        auto& gx = x.ensure_grad();
        for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
      if (v.tracked()) {
        auto& gv = v.ensure_grad();
        for (i64 r = 0; r < rows; ++r)
          for (i64 j = 0; j < D; ++j) gv[static_cast<size_t>(j)] += gy[static_cast<size_t>(r * D + j)];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// unary
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 i = 0; i < x.numel(); ++i)
        if (x[i] > S(0)) gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
    });
  }
  return y;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) {
    const S v = x[i];
    y[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  }
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 i = 0; i < y.numel(); ++i)
        gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * y[i] * (S(1) - y[i]);
    });
  }
  return y;
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) y[i] = std::log(x[i]);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 i = 0; i < x.numel(); ++i) gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] / x[i];
    });
  }
  return y;
}

template <class S>
Tensor<S> rsqrt(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) y[i] = S(1) / std::sqrt(x[i]);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 i = 0; i < x.numel(); ++i)
        gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * S(-0.5) * y[i] * y[i] * y[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  for (i64 i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<S> y = Tensor<S>::scalar(acc);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const S g = y.grad()[0];
      auto& gx = x.ensure_grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  check(x.numel() > 0, "mean of empty tensor");
  S acc = S(0);
  for (i64 i = 0; i < x.numel(); ++i) acc += x[i];
  const S inv = S(1) / static_cast<S>(x.numel());
  Tensor<S> y = Tensor<S>::scalar(acc * inv);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y, inv]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const S g = y.grad()[0] * inv;
      auto& gx = x.ensure_grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

/// Sums over every trailing axis: [R, ...] -> [R].
template <class S>
Tensor<S> sum_per_row(const Tensor<S>& x) {
  check(x.rank() >= 1, "sum_per_row needs rank >= 1");
  const i64 R = x.dim(0);
  const i64 inner = x.numel() / std::max<i64>(R, 1);
  Tensor<S> y({static_cast<int>(R)});
  for (i64 r = 0; r < R; ++r) {
    S acc = S(0);
    for (i64 i = 0; i < inner; ++i) acc += x[r * inner + i];
    y[r] = acc;
  }
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y, R, inner]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 r = 0; r < R; ++r)
        for (i64 i = 0; i < inner; ++i) gx[static_cast<size_t>(r * inner + i)] += gy[static_cast<size_t>(r)];
    });
  }
  return y;
}

/// Per-channel mean over all trailing axes: [C, ...] -> [C].
template <class S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  const i64 C = x.dim(0);
  const i64 inner = x.numel() / C;
  check(inner > 0, "channel_mean over empty spatial extent");
  Tensor<S> y = sum_per_row(x);
  return mul_scalar(y, S(1) / static_cast<S>(inner));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

/// Generic axis permutation (copies; rank <= 6).
template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  std::vector<int> seen(static_cast<size_t>(r), 0), out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    check(perm[static_cast<size_t>(i)] >= 0 && perm[static_cast<size_t>(i)] < r && !seen[static_cast<size_t>(perm[static_cast<size_t>(i)])],
          "permute: invalid permutation");
    seen[static_cast<size_t>(perm[static_cast<size_t>(i)])] = 1;
    out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  }
  // strides of x, and for each output axis the matching input stride
  std::vector<i64> xstride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    xstride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(i + 1)] * x.dim(i + 1);
  std::vector<i64> ostride(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) ostride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  Tensor<S> y(out_shape);
  const i64 n = x.numel();
  std::vector<i64> idx(static_cast<size_t>(r), 0);
  i64 src = 0;
  for (i64 flat = 0; flat < n; ++flat) {
    y[flat] = x[src];
    for (int a = r - 1; a >= 0; --a) {
      idx[static_cast<size_t>(a)]++;
      src += ostride[static_cast<size_t>(a)];
      if (idx[static_cast<size_t>(a)] < out_shape[static_cast<size_t>(a)]) break;
      src -= ostride[static_cast<size_t>(a)] * out_shape[static_cast<size_t>(a)];
      idx[static_cast<size_t>(a)] = 0;
    }
  }
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y, out_shape, ostride, r]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      std::vector<i64> idx(static_cast<size_t>(r), 0);
      i64 src = 0;
      const i64 n = y.numel();
      for (i64 flat = 0; flat < n; ++flat) {
        gx[static_cast<size_t>(src)] += gy[static_cast<size_t>(flat)];
        for (int a = r - 1; a >= 0; --a) {
          idx[static_cast<size_t>(a)]++;
          src += ostride[static_cast<size_t>(a)];
          if (idx[static_cast<size_t>(a)] < out_shape[static_cast<size_t>(a)]) break;
          src -= ostride[static_cast<size_t>(a)] * out_shape[static_cast<size_t>(a)];
          idx[static_cast<size_t>(a)] = 0;
        }
      }
    });
  }
  return y;
}

/// Concatenates two tensors along `axis`; all other axes must agree.
template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  check(a.rank() == b.rank(), "concat: rank mismatch");
  const int r = a.rank();
  check(axis >= 0 && axis < r, "concat: bad axis ", axis);
  for (int i = 0; i < r; ++i)
    if (i != axis)
      check(a.dim(i) == b.dim(i), "concat: shapes ", shape_str(a.shape()), " and ",
            shape_str(b.shape()), " differ off-axis");
  std::vector<int> out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = a.dim(axis) + b.dim(axis);

  i64 outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  i64 inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
  const i64 ablk = a.dim(axis) * inner, bblk = b.dim(axis) * inner;

  Tensor<S> y(out_shape);
  for (i64 o = 0; o < outer; ++o) {
    std::copy(a.data() + o * ablk, a.data() + (o + 1) * ablk, y.data() + o * (ablk + bblk));
    std::copy(b.data() + o * bblk, b.data() + (o + 1) * bblk,
              y.data() + o * (ablk + bblk) + ablk);
  }
  if (auto* tape = tape_for<S>({&a, &b})) {
    y.mark_tracked();
    tape->record([a, b, y, outer, ablk, bblk]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad();
      for (i64 o = 0; o < outer; ++o) {
        if (a.tracked()) {
          auto& ga = a.ensure_grad();
          for (i64 i = 0; i < ablk; ++i)
            ga[static_cast<size_t>(o * ablk + i)] += gy[static_cast<size_t>(o * (ablk + bblk) + i)];
        }
        if (b.tracked()) {
          auto& gb = b.ensure_grad();
          for (i64 i = 0; i < bblk; ++i)
            gb[static_cast<size_t>(o * bblk + i)] += gy[static_cast<size_t>(o * (ablk + bblk) + ablk + i)];
        }
      }
    });
  }
  return y;
}

/// Value-level slice along one axis (no gradient; test/postprocess utility).
template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, int start, int len) {
  const int r = x.rank();
  check(axis >= 0 && axis < r && start >= 0 && len >= 0 && start + len <= x.dim(axis),
        "slice: bad range");
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  i64 outer = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  i64 inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  Tensor<S> y(out_shape);
  for (i64 o = 0; o < outer; ++o)
    std::copy(x.data() + (o * x.dim(axis) + start) * inner,
              x.data() + (o * x.dim(axis) + start + len) * inner, y.data() + o * len * inner);
  return y;
}

/// Selects rows of x (leading axis) by index; duplicates allowed.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& rows) {
  check(x.rank() >= 1, "gather_rows needs rank >= 1");
  const i64 N = x.dim(0);
  const i64 inner = x.numel() / std::max<i64>(N, 1);
  for (int rindex : rows) check(rindex >= 0 && rindex < N, "gather_rows: index out of range");
  std::vector<int> out_shape = x.shape();
  out_shape[0] = static_cast<int>(rows.size());
  Tensor<S> y(out_shape);
  for (size_t m = 0; m < rows.size(); ++m)
    std::copy(x.data() + rows[m] * inner, x.data() + (rows[m] + 1) * inner,
              y.data() + static_cast<i64>(m) * inner);
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y, rows, inner]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (size_t m = 0; m < rows.size(); ++m)
        for (i64 i = 0; i < inner; ++i)
          gx[static_cast<size_t>(rows[m] * inner + i)] += gy[static_cast<size_t>(static_cast<i64>(m) * inner + i)];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis` (max subtraction).
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int r = x.rank();
  check(axis >= 0 && axis < r, "softmax: bad axis ", axis);
  i64 outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const i64 len = x.dim(axis);

  Tensor<S> y(x.shape());
  for (i64 o = 0; o < outer; ++o)
    for (i64 i = 0; i < inner; ++i) {
      const i64 base = o * len * inner + i;
      S mx = x[base];
      for (i64 j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      S sum = S(0);
      for (i64 j = 0; j < len; ++j) {
        const S e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        sum += e;
      }
      for (i64 j = 0; j < len; ++j) y[base + j * inner] /= sum;
    }
  if (auto* tape = tape_for<S>({&x})) {
    y.mark_tracked();
    tape->record([x, y, outer, inner, len]() mutable {
      if (!y.has_grad() || !x.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = x.ensure_grad();
      for (i64 o = 0; o < outer; ++o)
        for (i64 i = 0; i < inner; ++i) {
          const i64 base = o * len * inner + i;
          S dot = S(0);
          for (i64 j = 0; j < len; ++j) dot += gy[static_cast<size_t>(base + j * inner)] * y[base + j * inner];
          for (i64 j = 0; j < len; ++j)
            gx[static_cast<size_t>(base + j * inner)] +=
                (gy[static_cast<size_t>(base + j * inner)] - dot) * y[base + j * inner];
        }
    });
  }
  return y;
}

/// Layer normalization over the trailing axis with learnable affine.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  const int r = x.rank();
  check(r >= 1, "layer_norm needs rank >= 1");
  const i64 D = x.dim(r - 1);
  check(gamma.numel() == D && beta.numel() == D, "layer_norm: affine size mismatch");
  const i64 rows = x.numel() / D;

  Tensor<S> y(x.shape());
  std::vector<S> inv_std(static_cast<size_t>(rows)), mean(static_cast<size_t>(rows));
  for (i64 rr = 0; rr < rows; ++rr) {
    S mu = S(0);
    for (i64 j = 0; j < D; ++j) mu += x[rr * D + j];
    mu /= static_cast<S>(D);
    S var = S(0);
    for (i64 j = 0; j < D; ++j) {
      const S d = x[rr * D + j] - mu;
      var += d * d;
    }
    var /= static_cast<S>(D);
    const S is = S(1) / std::sqrt(var + eps);
    mean[static_cast<size_t>(rr)] = mu;
    inv_std[static_cast<size_t>(rr)] = is;
    for (i64 j = 0; j < D; ++j)
      y[rr * D + j] = (x[rr * D + j] - mu) * is * gamma[j] + beta[j];
  }
  if (auto* tape = tape_for<S>({&x, &gamma, &beta})) {
    y.mark_tracked();
    tape->record([x, gamma, beta, y, mean, inv_std, rows, D]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad();
      for (i64 rr = 0; rr < rows; ++rr) {
        const S mu = mean[static_cast<size_t>(rr)], is = inv_std[static_cast<size_t>(rr)];
        S sum_g = S(0), sum_gx = S(0);
        for (i64 j = 0; j < D; ++j) {
          const S xhat = (x[rr * D + j] - mu) * is;
          const S gh = gy[static_cast<size_t>(rr * D + j)] * gamma[j];
          sum_g += gh;
          sum_gx += gh * xhat;
          if (gamma.tracked())
            gamma.ensure_grad()[static_cast<size_t>(j)] += gy[static_cast<size_t>(rr * D + j)] * xhat;
          if (beta.tracked()) beta.ensure_grad()[static_cast<size_t>(j)] += gy[static_cast<size_t>(rr * D + j)];
        }
        if (x.tracked()) {
          auto& gx = x.ensure_grad();
          const S inv_d = S(1) / static_cast<S>(D);
          for (i64 j = 0; j < D; ++j) {
            const S xhat = (x[rr * D + j] - mu) * is;
            const S gh = gy[static_cast<size_t>(rr * D + j)] * gamma[j];
            gx[static_cast<size_t>(rr * D + j)] += (gh - sum_g * inv_d - xhat * sum_gx * inv_d) * is;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul (Eigen-backed)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  check(b.dim(0) == k, "matmul: inner dimensions ", k, " vs ", b.dim(0), " differ");
  Tensor<S> y({static_cast<int>(m), static_cast<int>(n)});
  ConstMatMap<S> A(a.data(), m, k), B(b.data(), k, n);
  MatMap<S> Y(y.data(), m, n);
  Y.noalias() = A * B;
  if (auto* tape = tape_for<S>({&a, &b})) {
    y.mark_tracked();
    tape->record([a, b, y, m, k, n]() mutable {
      if (!y.has_grad()) return;
      ConstMatMap<S> G(y.grad().data(), m, n);
      if (a.tracked()) {
        ConstMatMap<S> B(b.data(), k, n);
        MatMap<S> GA(a.ensure_grad().data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (b.tracked()) {
        ConstMatMap<S> A(a.data(), m, k);
        MatMap<S> GB(b.ensure_grad().data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return y;
}

/// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm expects matching rank-3 batches");
  const i64 B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  check(b.dim(1) == k, "bmm: inner dimensions differ");
  Tensor<S> y({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)});
  for (i64 i = 0; i < B; ++i) {
    ConstMatMap<S> A(a.data() + i * m * k, m, k), Bm(b.data() + i * k * n, k, n);
    MatMap<S> Y(y.data() + i * m * n, m, n);
    Y.noalias() = A * Bm;
  }
  if (auto* tape = tape_for<S>({&a, &b})) {
    y.mark_tracked();
    tape->record([a, b, y, B, m, k, n]() mutable {
      if (!y.has_grad()) return;
      for (i64 i = 0; i < B; ++i) {
        ConstMatMap<S> G(y.grad().data() + i * m * n, m, n);
        if (a.tracked()) {
          ConstMatMap<S> Bm(b.data() + i * k * n, k, n);
          MatMap<S> GA(a.ensure_grad().data() + i * m * k, m, k);
          GA.noalias() += G * Bm.transpose();
        }
        if (b.tracked()) {
          ConstMatMap<S> A(a.data() + i * m * k, m, k);
          MatMap<S> GB(b.ensure_grad().data() + i * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// loss primitives
// ---------------------------------------------------------------------------

/// Elementwise binary cross entropy evaluated on logits:
///   max(z,0) - z*t + log(1 + exp(-|z|))
/// Targets are treated as constants (they are ground truth).
template <class S>
Tensor<S> bce_with_logits(const Tensor<S>& z, const Tensor<S>& target) {
  check_same_shape(z, target, "bce_with_logits");
  Tensor<S> y(z.shape());
  for (i64 i = 0; i < z.numel(); ++i) {
    const S v = z[i];
    y[i] = std::max(v, S(0)) - v * target[i] + std::log1p(std::exp(-std::abs(v)));
  }
  if (auto* tape = tape_for<S>({&z})) {
    y.mark_tracked();
    tape->record([z, target, y]() mutable {
      if (!y.has_grad() || !z.tracked()) return;
      const auto& gy = y.grad();
      auto& gz = z.ensure_grad();
      for (i64 i = 0; i < z.numel(); ++i) {
        const S v = z[i];
        const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        gz[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * (sig - target[i]);
      }
    });
  }
  return y;
}

/// Weighted categorical cross entropy over logit rows; returns the weighted
/// mean  sum_i w_i * (logsumexp(z_i) - z_i[t_i]) / sum_i w_i.
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& targets,
                             const std::vector<S>& weights) {
  check(logits.rank() == 2, "cross_entropy_rows expects [N, M] logits");
  const i64 N = logits.dim(0), M = logits.dim(1);
  check(static_cast<i64>(targets.size()) == N && static_cast<i64>(weights.size()) == N,
        "cross_entropy_rows: targets/weights must have one entry per row");
  S wsum = S(0), acc = S(0);
  for (i64 i = 0; i < N; ++i) {
    check(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < M,
          "cross_entropy_rows: target out of range");
    S mx = logits[i * M];
    for (i64 j = 1; j < M; ++j) mx = std::max(mx, logits[i * M + j]);
    S se = S(0);
    for (i64 j = 0; j < M; ++j) se += std::exp(logits[i * M + j] - mx);
    const S lse = mx + std::log(se);
    acc += weights[static_cast<size_t>(i)] * (lse - logits[i * M + targets[static_cast<size_t>(i)]]);
    wsum += weights[static_cast<size_t>(i)];
  }
  check(wsum > S(0), "cross_entropy_rows: weights sum to zero");
  Tensor<S> y = Tensor<S>::scalar(acc / wsum);
  if (auto* tape = tape_for<S>({&logits})) {
    y.mark_tracked();
    tape->record([logits, y, targets, weights, wsum, N, M]() mutable {
      if (!y.has_grad() || !logits.tracked()) return;
      const S g = y.grad()[0] / wsum;
      auto& gz = logits.ensure_grad();
      for (i64 i = 0; i < N; ++i) {
        S mx = logits[i * M];
        for (i64 j = 1; j < M; ++j) mx = std::max(mx, logits[i * M + j]);
        S se = S(0);
        for (i64 j = 0; j < M; ++j) se += std::exp(logits[i * M + j] - mx);
        const S w = weights[static_cast<size_t>(i)] * g;
        for (i64 j = 0; j < M; ++j) {
          const S p = std::exp(logits[i * M + j] - mx) / se;
          gz[static_cast<size_t>(i * M + j)] += w * (p - (j == targets[static_cast<size_t>(i)] ? S(1) : S(0)));
        }
      }
    });
  }
  return y;
}

}  // namespace mfrt
