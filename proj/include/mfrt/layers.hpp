#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mfrt/image.hpp"
#include "mfrt/ops.hpp"

namespace mfrt {

template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S>* tensor;
};

/// Collects (name, tensor) pairs for checkpointing and the optimizer.
/// Parameters are trainable; buffers (running statistics) are persisted but
/// never receive gradients.
template <class S>
struct ParamBag {
  std::vector<NamedTensor<S>> params;
  std::vector<NamedTensor<S>> buffers;

  void param(std::string name, Tensor<S>& t) {
    t.set_requires_grad(true);
    params.push_back({std::move(name), &t});
  }
  void buffer(std::string name, Tensor<S>& t) { buffers.push_back({std::move(name), &t}); }
};

/// out = gamma * (x - mean) / sqrt(var + eps) + beta, per leading channel.
/// Differentiable in every tensor argument; callers pass batch statistics in
/// training mode and stored running statistics at inference.
template <class S>
Tensor<S> normalize_affine(const Tensor<S>& x, const Tensor<S>& mean, const Tensor<S>& var,
                           const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  check<config_error>(eps > S(0), "normalize_affine: eps must be positive");
  Tensor<S> inv = rsqrt(add_scalar(var, eps));
  Tensor<S> y = mul_channel(sub_channel(x, mean), inv);
  return add_channel(mul_channel(y, gamma), beta);
}

template <class S>
struct Conv2dLayer {
  Tensor<S> weight, bias;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int cin, int cout, int k, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    weight = Tensor<S>::randn({cout, cin, k, k}, rng, std);
    bias = Tensor<S>::zeros({cout});
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& p, ParamBag<S>& bag) {
    bag.param(p + ".weight", weight);
    bag.param(p + ".bias", bias);
  }
  i64 param_count() const { return weight.numel() + bias.numel(); }
};

/// Per-channel affine normalization layer. In training mode it normalizes by
/// the per-channel statistics of the current input (gradients flow through
/// them) and maintains running estimates for inference. With
/// `track_batch_stats = false` the stored statistics are used in every mode;
/// the attention-refinement gate runs in that mode because its 1x1 spatial
/// extent makes batch statistics degenerate.
template <class S>
struct Norm2d {
  Tensor<S> gamma, beta, running_mean, running_var;
  S eps = S(1e-5);
  S momentum = S(0.1);
  bool track_batch_stats = true;

  Norm2d() = default;
  explicit Norm2d(int channels, S eps_ = S(1e-5), S momentum_ = S(0.1), bool track = true)
      : eps(eps_), momentum(momentum_), track_batch_stats(track) {
    gamma = Tensor<S>::ones({channels});
    beta = Tensor<S>::zeros({channels});
    running_mean = Tensor<S>::zeros({channels});
    running_var = Tensor<S>::ones({channels});
  }

  Tensor<S> forward(const Tensor<S>& x, bool training, bool update_stats = true) {
    if (!training || !track_batch_stats)
      return normalize_affine(x, running_mean, running_var, gamma, beta, eps);
    Tensor<S> mean = channel_mean(x);
    Tensor<S> centered = sub_channel(x, mean);
    Tensor<S> var = channel_mean(mul(centered, centered));
    if (update_stats) {
      for (i64 c = 0; c < mean.numel(); ++c) {
        running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * mean[c];
        running_var[c] = (S(1) - momentum) * running_var[c] + momentum * var[c];
      }
    }
    Tensor<S> inv = rsqrt(add_scalar(var, eps));
    return add_channel(mul_channel(mul_channel(centered, inv), gamma), beta);
  }

  void collect(const std::string& p, ParamBag<S>& bag) {
    bag.param(p + ".gamma", gamma);
    bag.param(p + ".beta", beta);
    bag.buffer(p + ".running_mean", running_mean);
    bag.buffer(p + ".running_var", running_var);
  }
  i64 param_count() const { return gamma.numel() + beta.numel(); }
};

template <class S>
struct LinearLayer {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]; undefined when bias is disabled
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(int in, int out, Rng& rng, bool with_bias = true) : has_bias(with_bias) {
    const double limit = std::sqrt(6.0 / (in + out));
    weight = Tensor<S>::rand_uniform({in, out}, rng, -limit, limit);
    if (with_bias) bias = Tensor<S>::zeros({out});
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> y = matmul(x, weight);
    return has_bias ? add_rowvec(y, bias) : y;
  }

  void collect(const std::string& p, ParamBag<S>& bag) {
    bag.param(p + ".weight", weight);
    if (has_bias) bag.param(p + ".bias", bias);
  }
  i64 param_count() const { return weight.numel() + (has_bias ? bias.numel() : 0); }
};

template <class S>
struct LayerNormLayer {
  Tensor<S> gamma, beta;
  S eps = S(1e-5);

  LayerNormLayer() = default;
  explicit LayerNormLayer(int dim, S eps_ = S(1e-5)) : eps(eps_) {
    gamma = Tensor<S>::ones({dim});
    beta = Tensor<S>::zeros({dim});
  }

  Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& p, ParamBag<S>& bag) {
    bag.param(p + ".gamma", gamma);
    bag.param(p + ".beta", beta);
  }
  i64 param_count() const { return gamma.numel() + beta.numel(); }
};

/// Multi-head attention core. Query input is [N, D]; key/value inputs are
/// [Skv, kv_dim] and are projected to D. An optional additive bias of shape
/// [heads, N, Skv] is applied to the pre-softmax logits (this is where mask
/// construction injects -inf surrogates). The caller owns residuals and any
/// positional terms.
template <class S>
struct Mha {
  LinearLayer<S> q_proj, k_proj, v_proj, o_proj;
  int heads = 1;
  int model_dim = 0;

  Mha() = default;
  Mha(int dim, int kv_dim, int heads_, Rng& rng)
      : q_proj(dim, dim, rng),
        k_proj(kv_dim, dim, rng),
        v_proj(kv_dim, dim, rng),
        o_proj(dim, dim, rng),
        heads(heads_),
        model_dim(dim) {}

  Tensor<S> forward(const Tensor<S>& query, const Tensor<S>& key_src, const Tensor<S>& value_src,
                    const Tensor<S>* logit_bias = nullptr) const {
    const int N = query.dim(0), D = model_dim, H = heads, dh = D / heads;
    const int Skv = key_src.dim(0);
    Tensor<S> q = permute(q_proj.forward(query).reshaped({N, H, dh}), {1, 0, 2});   // [H,N,dh]
    Tensor<S> k = permute(k_proj.forward(key_src).reshaped({Skv, H, dh}), {1, 2, 0});  // [H,dh,S]
    Tensor<S> v = permute(v_proj.forward(value_src).reshaped({Skv, H, dh}), {1, 0, 2});  // [H,S,dh]
    Tensor<S> logits = mul_scalar(bmm(q, k), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (logit_bias) {
      check(logit_bias->shape() == std::vector<int>({H, N, Skv}),
            "attention bias must be [heads, N, Skv]");
      logits = add(logits, *logit_bias);
    }
    Tensor<S> attn = softmax(logits, 2);
    Tensor<S> out = permute(bmm(attn, v), {1, 0, 2}).reshaped({N, D});
    return o_proj.forward(out);
  }

  void collect(const std::string& p, ParamBag<S>& bag) {
    q_proj.collect(p + ".q", bag);
    k_proj.collect(p + ".k", bag);
    v_proj.collect(p + ".v", bag);
    o_proj.collect(p + ".o", bag);
  }
  i64 param_count() const {
    return q_proj.param_count() + k_proj.param_count() + v_proj.param_count() +
           o_proj.param_count();
  }
};

}  // namespace mfrt
