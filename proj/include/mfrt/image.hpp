#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mfrt/ops.hpp"

// Image-shaped primitives on [C, H, W] tensors.

namespace mfrt {

struct ConvDims {
  i64 cin, h, w, cout, kh, kw, oh, ow;
};

template <class S>
ConvDims conv2d_dims(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int padding) {
  check<config_error>(stride >= 1, "conv2d: stride must be positive");
  check<config_error>(padding >= 0, "conv2d: padding must be nonnegative");
  check(input.rank() == 3, "conv2d: input must be [Cin, H, W], got ", shape_str(input.shape()));
  check(kernel.rank() == 4, "conv2d: kernel must be [Cout, Cin, kh, kw], got ",
        shape_str(kernel.shape()));
  ConvDims d;
  d.cin = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  check<config_error>(kernel.dim(1) == d.cin, "conv2d: kernel expects ", kernel.dim(1),
                      " input channels but input has ", d.cin);
  check(d.kh <= d.h + 2 * padding && d.kw <= d.w + 2 * padding,
        "conv2d: kernel larger than padded input");
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

namespace detail {

// Unrolls padded input patches into a [Cin*kh*kw, oh*ow] matrix.
template <class S>
std::vector<S> im2col(const S* x, const ConvDims& d, int stride, int padding) {
  const i64 K = d.cin * d.kh * d.kw, P = d.oh * d.ow;
  std::vector<S> cols(static_cast<size_t>(K * P), S(0));
  for (i64 c = 0; c < d.cin; ++c)
    for (i64 ky = 0; ky < d.kh; ++ky)
      for (i64 kx = 0; kx < d.kw; ++kx) {
        const i64 row = (c * d.kh + ky) * d.kw + kx;
        for (i64 oy = 0; oy < d.oh; ++oy) {
          const i64 iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= d.h) continue;
          for (i64 ox = 0; ox < d.ow; ++ox) {
            const i64 ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= d.w) continue;
            cols[static_cast<size_t>(row * P + oy * d.ow + ox)] = x[(c * d.h + iy) * d.w + ix];
          }
        }
      }
  return cols;
}

template <class S>
void col2im_add(const std::vector<S>& cols, S* gx, const ConvDims& d, int stride, int padding) {
  const i64 P = d.oh * d.ow;
  for (i64 c = 0; c < d.cin; ++c)
    for (i64 ky = 0; ky < d.kh; ++ky)
      for (i64 kx = 0; kx < d.kw; ++kx) {
        const i64 row = (c * d.kh + ky) * d.kw + kx;
        for (i64 oy = 0; oy < d.oh; ++oy) {
          const i64 iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= d.h) continue;
          for (i64 ox = 0; ox < d.ow; ++ox) {
            const i64 ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= d.w) continue;
            gx[(c * d.h + iy) * d.w + ix] += cols[static_cast<size_t>(row * P + oy * d.ow + ox)];
          }
        }
      }
}

}  // namespace detail

/// 2D cross-correlation with optional bias. Input [Cin,H,W], kernel
/// [Cout,Cin,kh,kw], output [Cout,H',W'] with H' = (H+2p-kh)/stride + 1.
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>* bias,
                 int stride, int padding) {
  const ConvDims d = conv2d_dims(input, kernel, stride, padding);
  if (bias) check(bias->numel() == d.cout, "conv2d: bias size must equal Cout");
  const i64 K = d.cin * d.kh * d.kw, P = d.oh * d.ow;

  std::vector<S> cols = detail::im2col(input.data(), d, stride, padding);
  Tensor<S> y({static_cast<int>(d.cout), static_cast<int>(d.oh), static_cast<int>(d.ow)});
  {
    ConstMatMap<S> W(kernel.data(), d.cout, K), C(cols.data(), K, P);
    MatMap<S> Y(y.data(), d.cout, P);
    Y.noalias() = W * C;
  }
  if (bias)
    for (i64 c = 0; c < d.cout; ++c)
      for (i64 p = 0; p < P; ++p) y[c * P + p] += (*bias)[c];

  const Tensor<S>* ins[3] = {&input, &kernel, bias};
  if (auto* tape = tape_for<S>({ins[0], ins[1], ins[2]})) {
    y.mark_tracked();
    Tensor<S> b = bias ? *bias : Tensor<S>();
    tape->record([input, kernel, b, y, d, stride, padding, K, P,
                  cols = std::move(cols)]() mutable {
      if (!y.has_grad()) return;
      ConstMatMap<S> G(y.grad().data(), d.cout, P);
      if (kernel.tracked()) {
        ConstMatMap<S> C(cols.data(), K, P);
        MatMap<S> GW(kernel.ensure_grad().data(), d.cout, K);
        GW.noalias() += G * C.transpose();
      }
      if (b.defined() && b.tracked()) {
        auto& gb = b.ensure_grad();
        for (i64 c = 0; c < d.cout; ++c) {
          S acc = S(0);
          for (i64 p = 0; p < P; ++p) acc += y.grad()[static_cast<size_t>(c * P + p)];
          gb[static_cast<size_t>(c)] += acc;
        }
      }
      if (input.tracked()) {
        std::vector<S> gcols(static_cast<size_t>(K * P));
        ConstMatMap<S> W(kernel.data(), d.cout, K);
        MatMap<S> GC(gcols.data(), K, P);
        GC.noalias() = W.transpose() * G;
        detail::col2im_add(gcols, input.ensure_grad().data(), d, stride, padding);
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 int stride, int padding) {
  return conv2d(input, kernel, &bias, stride, padding);
}

/// Bilinear resize to a larger grid, half-pixel centers (align_corners=false).
template <class S>
Tensor<S> bilinear_upsample(const Tensor<S>& input, int out_h, int out_w) {
  check(input.rank() == 3, "bilinear_upsample: input must be [C, h, w]");
  const i64 C = input.dim(0), h = input.dim(1), w = input.dim(2);
  check(out_h >= h && out_w >= w, "bilinear_upsample: output must not be smaller than input");

  struct Axis {
    i64 i0, i1;
    S w1;
  };
  auto make_axis = [](i64 in, i64 out) {
    std::vector<Axis> ax(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (i64 o = 0; o < out; ++o) {
      const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      const double f = std::floor(src);
      i64 i0 = static_cast<i64>(f);
      S w1 = static_cast<S>(src - f);
      i64 i1 = i0 + 1;
      if (i0 < 0) i0 = 0;
      if (i1 > in - 1) i1 = in - 1;
      if (i0 > in - 1) i0 = in - 1;
      ax[static_cast<size_t>(o)] = {i0, i1, w1};
    }
    return ax;
  };
  const auto ay = make_axis(h, out_h), ax = make_axis(w, out_w);

  Tensor<S> y({static_cast<int>(C), out_h, out_w});
  for (i64 c = 0; c < C; ++c)
    for (i64 oy = 0; oy < out_h; ++oy) {
      const auto& A = ay[static_cast<size_t>(oy)];
      for (i64 ox = 0; ox < out_w; ++ox) {
        const auto& B = ax[static_cast<size_t>(ox)];
        const S v00 = input[(c * h + A.i0) * w + B.i0], v01 = input[(c * h + A.i0) * w + B.i1];
        const S v10 = input[(c * h + A.i1) * w + B.i0], v11 = input[(c * h + A.i1) * w + B.i1];
        const S top = v00 + (v01 - v00) * B.w1;
        const S bot = v10 + (v11 - v10) * B.w1;
        y[(c * out_h + oy) * out_w + ox] = top + (bot - top) * A.w1;
      }
    }
  if (auto* tape = tape_for<S>({&input})) {
    y.mark_tracked();
    tape->record([input, y, ay, ax, C, h, w, out_h, out_w]() mutable {
      if (!y.has_grad() || !input.tracked()) return;
      const auto& gy = y.grad();
      auto& gx = input.ensure_grad();
      for (i64 c = 0; c < C; ++c)
        for (i64 oy = 0; oy < static_cast<i64>(out_h); ++oy) {
          const auto& A = ay[static_cast<size_t>(oy)];
          for (i64 ox = 0; ox < static_cast<i64>(out_w); ++ox) {
            const auto& B = ax[static_cast<size_t>(ox)];
            const S g = gy[static_cast<size_t>((c * out_h + oy) * out_w + ox)];
            gx[static_cast<size_t>((c * h + A.i0) * w + B.i0)] += g * (S(1) - A.w1) * (S(1) - B.w1);
            gx[static_cast<size_t>((c * h + A.i0) * w + B.i1)] += g * (S(1) - A.w1) * B.w1;
            gx[static_cast<size_t>((c * h + A.i1) * w + B.i0)] += g * A.w1 * (S(1) - B.w1);
            gx[static_cast<size_t>((c * h + A.i1) * w + B.i1)] += g * A.w1 * B.w1;
          }
        }
    });
  }
  return y;
}

/// Nearest-neighbor resize in either direction (half-pixel convention).
/// Value-level (no gradient); used for attention-mask plumbing.
template <class S>
Tensor<S> nearest_resize(const Tensor<S>& input, int out_h, int out_w) {
  check(input.rank() == 3, "nearest_resize: input must be [C, h, w]");
  const i64 C = input.dim(0), h = input.dim(1), w = input.dim(2);
  Tensor<S> y({static_cast<int>(C), out_h, out_w});
  for (i64 oy = 0; oy < out_h; ++oy) {
    const i64 iy = std::min<i64>(static_cast<i64>((static_cast<double>(oy) + 0.5) * h / out_h), h - 1);
    for (i64 ox = 0; ox < out_w; ++ox) {
      const i64 ix = std::min<i64>(static_cast<i64>((static_cast<double>(ox) + 0.5) * w / out_w), w - 1);
      for (i64 c = 0; c < C; ++c) y[(c * out_h + oy) * out_w + ox] = input[(c * h + iy) * w + ix];
    }
  }
  return y;
}

/// Value-level bilinear resize in either direction (half-pixel convention).
template <class S>
Tensor<S> bilinear_resize_value(const Tensor<S>& input, int out_h, int out_w) {
  check(input.rank() == 3, "bilinear_resize_value: input must be [C, h, w]");
  const i64 C = input.dim(0), h = input.dim(1), w = input.dim(2);
  Tensor<S> y({static_cast<int>(C), out_h, out_w});
  auto sample = [&](i64 c, double sy, double sx) {
    const double fy = std::floor(sy), fx = std::floor(sx);
    const double wy = sy - fy, wx = sx - fx;
    auto cl = [](i64 v, i64 hi) { return std::clamp<i64>(v, 0, hi - 1); };
    const i64 y0 = cl(static_cast<i64>(fy), h), y1 = cl(static_cast<i64>(fy) + 1, h);
    const i64 x0 = cl(static_cast<i64>(fx), w), x1 = cl(static_cast<i64>(fx) + 1, w);
    const double v00 = input[(c * h + y0) * w + x0], v01 = input[(c * h + y0) * w + x1];
    const double v10 = input[(c * h + y1) * w + x0], v11 = input[(c * h + y1) * w + x1];
    const double top = v00 + (v01 - v00) * wx, bot = v10 + (v11 - v10) * wx;
    return static_cast<S>(top + (bot - top) * wy);
  };
  for (i64 c = 0; c < C; ++c)
    for (i64 oy = 0; oy < out_h; ++oy)
      for (i64 ox = 0; ox < out_w; ++ox)
        y[(c * out_h + oy) * out_w + ox] =
            sample(c, (static_cast<double>(oy) + 0.5) * h / out_h - 0.5,
                   (static_cast<double>(ox) + 0.5) * w / out_w - 0.5);
  return y;
}

/// Per-channel spatial mean: [C,H,W] -> [C,1,1].
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& input) {
  check(input.rank() == 3 && input.dim(1) >= 1 && input.dim(2) >= 1,
        "global_avg_pool: input must be [C, H>=1, W>=1]");
  const int C = input.dim(0);
  Tensor<S> y = channel_mean(input);
  return y.reshaped({C, 1, 1});
}

/// Reflect-pads an image on the bottom/right up to the target size
/// (boundary row/column not repeated). Value-level harness utility.
template <class S>
Tensor<S> pad_reflect_bottom_right(const Tensor<S>& img, int target_h, int target_w) {
  check(img.rank() == 3, "pad: input must be [C, H, W]");
  const i64 C = img.dim(0), H = img.dim(1), W = img.dim(2);
  check(target_h >= H && target_w >= W, "pad: target smaller than input");
  Tensor<S> out({static_cast<int>(C), target_h, target_w});
  auto reflect = [](i64 i, i64 n) {
    if (n == 1) return static_cast<i64>(0);
    const i64 period = 2 * (n - 1);
    i64 m = i % period;
    return m < n ? m : period - m;
  };
  for (i64 c = 0; c < C; ++c)
    for (i64 y = 0; y < target_h; ++y) {
      const i64 sy = reflect(y, H);
      for (i64 x = 0; x < target_w; ++x)
        out[(c * target_h + y) * target_w + x] = img[(c * H + sy) * W + reflect(x, W)];
    }
  return out;
}

/// Crops the top-left [.., h, w] window. Value-level harness utility.
template <class S>
Tensor<S> crop_top_left(const Tensor<S>& t, int h, int w) {
  check(t.rank() == 3 && t.dim(1) >= h && t.dim(2) >= w, "crop: window larger than tensor");
  const i64 C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<S> out({static_cast<int>(C), h, w});
  for (i64 c = 0; c < C; ++c)
    for (i64 y = 0; y < h; ++y)
      std::copy(t.data() + (c * H + y) * W, t.data() + (c * H + y) * W + w,
                out.data() + (c * h + y) * w);
  return out;
}

}  // namespace mfrt
