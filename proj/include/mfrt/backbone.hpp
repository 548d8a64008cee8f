#pragma once

#include <string>
#include <vector>

#include "mfrt/config.hpp"
#include "mfrt/layers.hpp"

namespace mfrt {

/// Backbone outputs: the high-resolution spatial feature plus the three
/// context features at 1/32, 1/16 and 1/8 of the (multiple-of-32) input.
template <class S>
struct BackboneFeatures {
  Tensor<S> f_sp;   // [C,    H/8,  W/8]
  Tensor<S> f_cp1;  // [proj, H/32, W/32]
  Tensor<S> f_cp2;  // [proj, H/16, W/16]
  Tensor<S> f_cp3;  // [proj, H/8,  W/8]
};

template <class S>
struct ConvNormRelu {
  Conv2dLayer<S> conv;
  Norm2d<S> norm;

  ConvNormRelu() = default;
  ConvNormRelu(int cin, int cout, int k, int stride, int padding, const ModelConfig& cfg, Rng& rng)
      : conv(cin, cout, k, stride, padding, rng),
        norm(cout, static_cast<S>(cfg.norm_eps), static_cast<S>(cfg.norm_momentum)) {}

  Tensor<S> forward(const Tensor<S>& x, bool training, bool update_stats) {
    return relu(norm.forward(conv.forward(x), training, update_stats));
  }
  void collect(const std::string& p, ParamBag<S>& bag) {
    conv.collect(p + ".conv", bag);
    norm.collect(p + ".norm", bag);
  }
  i64 param_count() const { return conv.param_count() + norm.param_count(); }
};

/// Attention refinement: rescales channels by a gate computed from the
/// globally pooled feature, out = x * sigmoid(norm(conv1x1(GAP(x)))).
/// Width-preserving; the gate norm holds fixed statistics (see Norm2d).
template <class S>
struct Arm {
  Conv2dLayer<S> gate_conv;
  Norm2d<S> gate_norm;

  Arm() = default;
  Arm(int channels, const ModelConfig& cfg, Rng& rng)
      : gate_conv(channels, channels, 1, 1, 0, rng),
        gate_norm(channels, static_cast<S>(cfg.norm_eps), static_cast<S>(cfg.norm_momentum),
                  /*track=*/false) {}

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    Tensor<S> g = gate_conv.forward(global_avg_pool(x));
    g = sigmoid(gate_norm.forward(g, training));
    return mul_channel(x, g.reshaped({x.dim(0)}));
  }
  void collect(const std::string& p, ParamBag<S>& bag) {
    gate_conv.collect(p + ".conv", bag);
    gate_norm.collect(p + ".norm", bag);
  }
  i64 param_count() const { return gate_conv.param_count() + gate_norm.param_count(); }
};

/// Three stride-2 conv-norm-relu blocks; 1/8 resolution output.
template <class S>
struct SpatialPath {
  ConvNormRelu<S> b1, b2, b3;

  SpatialPath() = default;
  SpatialPath(const ModelConfig& cfg, Rng& rng) {
    const auto w = cfg.widths();
    b1 = ConvNormRelu<S>(3, w[0], 3, 2, 1, cfg, rng);
    b2 = ConvNormRelu<S>(w[0], w[1], 3, 2, 1, cfg, rng);
    b3 = ConvNormRelu<S>(w[1], w[2], 3, 2, 1, cfg, rng);
  }

  Tensor<S> forward(const Tensor<S>& image, bool training, bool update_stats) {
    check(image.rank() == 3 && image.dim(0) == 3, "spatial_path: image must be [3, H, W]");
    check(image.dim(1) % 32 == 0 && image.dim(2) % 32 == 0,
          "spatial_path: H and W must be multiples of 32, got ", image.dim(1), "x", image.dim(2));
    Tensor<S> x = b1.forward(image, training, update_stats);
    x = b2.forward(x, training, update_stats);
    return b3.forward(x, training, update_stats);
  }
  void collect(const std::string& p, ParamBag<S>& bag) {
    b1.collect(p + ".b1", bag);
    b2.collect(p + ".b2", bag);
    b3.collect(p + ".b3", bag);
  }
  i64 param_count() const { return b1.param_count() + b2.param_count() + b3.param_count(); }
};

/// Extends the spatial feature with 1/16 and 1/32 blocks, refines both
/// scales, folds in the globally pooled context, and projects everything to
/// the common context width. The 1/8 feature is a pure upsample of the 1/16
/// one, so recomputing it reproduces the output bit for bit.
template <class S>
struct ContextPath {
  ConvNormRelu<S> down16, down32;
  Arm<S> arm32, arm16;
  Conv2dLayer<S> proj32, proj16;
  bool nearest_up = false;

  ContextPath() = default;
  ContextPath(const ModelConfig& cfg, Rng& rng) : nearest_up(cfg.nearest_context_upsample) {
    const auto w = cfg.widths();
    down16 = ConvNormRelu<S>(w[2], w[3], 3, 2, 1, cfg, rng);
    down32 = ConvNormRelu<S>(w[3], w[4], 3, 2, 1, cfg, rng);
    arm32 = Arm<S>(w[4], cfg, rng);
    arm16 = Arm<S>(w[3], cfg, rng);
    proj32 = Conv2dLayer<S>(w[4], cfg.cp_proj_dim, 1, 1, 0, rng);
    proj16 = Conv2dLayer<S>(w[3], cfg.cp_proj_dim, 1, 1, 0, rng);
  }

  Tensor<S> upsample2x(const Tensor<S>& x, int out_h, int out_w) const {
    return nearest_up ? nearest_resize(x, out_h, out_w) : bilinear_upsample(x, out_h, out_w);
  }

  void forward(const Tensor<S>& f_sp, bool training, bool update_stats,
               BackboneFeatures<S>& out) {
    Tensor<S> f16 = down16.forward(f_sp, training, update_stats);   // [2C, H/16]
    Tensor<S> f32 = down32.forward(f16, training, update_stats);    // [4C, H/32]

    Tensor<S> pooled = global_avg_pool(f32);
    Tensor<S> a32 = add_channel(arm32.forward(f32, training), pooled.reshaped({f32.dim(0)}));
    out.f_cp1 = proj32.forward(a32);

    Tensor<S> up1 = upsample2x(out.f_cp1, f16.dim(1), f16.dim(2));
    out.f_cp2 = add(proj16.forward(arm16.forward(f16, training)), up1);
    out.f_cp3 = upsample2x(out.f_cp2, f_sp.dim(1), f_sp.dim(2));
  }

  void collect(const std::string& p, ParamBag<S>& bag) {
    down16.collect(p + ".down16", bag);
    down32.collect(p + ".down32", bag);
    arm32.collect(p + ".arm32", bag);
    arm16.collect(p + ".arm16", bag);
    proj32.collect(p + ".proj32", bag);
    proj16.collect(p + ".proj16", bag);
  }
  i64 param_count() const {
    return down16.param_count() + down32.param_count() + arm32.param_count() +
           arm16.param_count() + proj32.param_count() + proj16.param_count();
  }
};

template <class S>
struct Backbone {
  SpatialPath<S> spatial;
  ContextPath<S> context;

  Backbone() = default;
  Backbone(const ModelConfig& cfg, Rng& rng) : spatial(cfg, rng), context(cfg, rng) {}

  BackboneFeatures<S> forward(const Tensor<S>& image, bool training, bool update_stats = true) {
    BackboneFeatures<S> out;
    out.f_sp = spatial.forward(image, training, update_stats);
    context.forward(out.f_sp, training, update_stats, out);
    return out;
  }
  void collect(const std::string& p, ParamBag<S>& bag) {
    spatial.collect(p + ".spatial", bag);
    context.collect(p + ".context", bag);
  }
  i64 param_count() const { return spatial.param_count() + context.param_count(); }
};

}  // namespace mfrt
