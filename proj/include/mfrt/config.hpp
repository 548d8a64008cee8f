#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mfrt/common.hpp"

namespace mfrt {

/// Architecture hyperparameters. Defaults follow the reference configuration:
/// 100 queries, hidden dim 256, 8 heads, 3 stages of two blocks, FFN
/// expansion 4, context features projected to 128 channels.
struct ModelConfig {
  int num_queries = 100;
  int hidden_dim = 256;
  int num_heads = 8;
  int num_stages = 3;
  int blocks_per_stage = 2;
  int ffn_expansion = 4;
  int cp_proj_dim = 128;
  int spatial_channels = 128;
  // Output widths of the five stride-2 blocks: three on the spatial path
  // (ending at spatial_channels) and two on the context-path extension.
  // Empty means the default [32, 64, C, 2C, 4C].
  std::vector<int> backbone_width_schedule;
  int num_classes = 19;
  bool use_f3_in_decoder = false;

  double mask_threshold = 0.5;          // attention-mask binarization
  bool mask_resize_bilinear = false;    // resize binarized mask (nearest) vs logits (bilinear)
  bool nearest_context_upsample = false;  // ablation switch for Up in the context path
  bool classifier_bias = true;
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;

  std::vector<int> widths() const {
    if (!backbone_width_schedule.empty()) return backbone_width_schedule;
    const int c = spatial_channels;
    return {32, 64, c, 2 * c, 4 * c};
  }

  int num_blocks() const { return num_stages * blocks_per_stage; }

  void validate() const {
    check<config_error>(num_queries >= 1, "num_queries must be >= 1");
    check<config_error>(num_classes >= 1, "num_classes must be >= 1");
    check<config_error>(num_stages >= 1, "num_stages must be >= 1");
    check<config_error>(blocks_per_stage >= 1, "blocks_per_stage must be >= 1");
    check<config_error>(hidden_dim >= 1 && num_heads >= 1, "hidden_dim and num_heads must be >= 1");
    check<config_error>(hidden_dim % num_heads == 0, "hidden_dim ", hidden_dim,
                        " must be divisible by num_heads ", num_heads);
    check<config_error>(ffn_expansion >= 1, "ffn_expansion must be >= 1");
    check<config_error>(cp_proj_dim % 4 == 0, "cp_proj_dim must be a multiple of 4");
    const auto w = widths();
    check<config_error>(w.size() == 5, "backbone_width_schedule needs 5 entries, got ", w.size());
    for (int v : w) check<config_error>(v >= 1, "backbone widths must be positive");
    check<config_error>(w[2] == spatial_channels,
                        "third backbone width must equal spatial_channels");
  }
};

/// Postprocessing thresholds for panoptic inference.
struct InferParams {
  double object_score_threshold = 0.8;
  double overlap_threshold = 0.8;
};

/// Loss weights and optimizer settings. Learning rate and weight decay follow
/// the reference training recipe (AdamW, lr 3e-4, wd 0.05, backbone lr x0.1);
/// the LR schedule is constant at this scale.
struct TrainParams {
  double lr = 3e-4;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 2000;

  double lambda_ce = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
  double no_object_weight = 0.1;
  bool deep_supervision = true;
  double clip_grad_norm = 0.0;  // 0 disables clipping

  int log_every = 50;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_queries", c.num_queries},
                     {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},
                     {"num_stages", c.num_stages},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"ffn_expansion", c.ffn_expansion},
                     {"cp_proj_dim", c.cp_proj_dim},
                     {"spatial_channels", c.spatial_channels},
                     {"backbone_width_schedule", c.widths()},
                     {"num_classes", c.num_classes},
                     {"use_f3_in_decoder", c.use_f3_in_decoder},
                     {"mask_threshold", c.mask_threshold},
                     {"mask_resize_bilinear", c.mask_resize_bilinear},
                     {"nearest_context_upsample", c.nearest_context_upsample},
                     {"classifier_bias", c.classifier_bias},
                     {"norm_eps", c.norm_eps},
                     {"norm_momentum", c.norm_momentum}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig defaults;
  c.num_queries = j.value("num_queries", defaults.num_queries);
  c.hidden_dim = j.value("hidden_dim", defaults.hidden_dim);
  c.num_heads = j.value("num_heads", defaults.num_heads);
  c.num_stages = j.value("num_stages", defaults.num_stages);
  c.blocks_per_stage = j.value("blocks_per_stage", defaults.blocks_per_stage);
  c.ffn_expansion = j.value("ffn_expansion", defaults.ffn_expansion);
  c.cp_proj_dim = j.value("cp_proj_dim", defaults.cp_proj_dim);
  c.spatial_channels = j.value("spatial_channels", defaults.spatial_channels);
  c.backbone_width_schedule =
      j.value("backbone_width_schedule", std::vector<int>{});
  c.num_classes = j.value("num_classes", defaults.num_classes);
  c.use_f3_in_decoder = j.value("use_f3_in_decoder", defaults.use_f3_in_decoder);
  c.mask_threshold = j.value("mask_threshold", defaults.mask_threshold);
  c.mask_resize_bilinear = j.value("mask_resize_bilinear", defaults.mask_resize_bilinear);
  c.nearest_context_upsample =
      j.value("nearest_context_upsample", defaults.nearest_context_upsample);
  c.classifier_bias = j.value("classifier_bias", defaults.classifier_bias);
  c.norm_eps = j.value("norm_eps", defaults.norm_eps);
  c.norm_momentum = j.value("norm_momentum", defaults.norm_momentum);
}

inline void to_json(nlohmann::json& j, const TrainParams& p) {
  j = nlohmann::json{{"lr", p.lr},
                     {"weight_decay", p.weight_decay},
                     {"backbone_lr_mult", p.backbone_lr_mult},
                     {"beta1", p.beta1},
                     {"beta2", p.beta2},
                     {"adam_eps", p.adam_eps},
                     {"steps", p.steps},
                     {"lambda_ce", p.lambda_ce},
                     {"lambda_dice", p.lambda_dice},
                     {"lambda_cls", p.lambda_cls},
                     {"no_object_weight", p.no_object_weight},
                     {"deep_supervision", p.deep_supervision},
                     {"clip_grad_norm", p.clip_grad_norm},
                     {"log_every", p.log_every}};
}

inline void from_json(const nlohmann::json& j, TrainParams& p) {
  TrainParams d;
  p.lr = j.value("lr", d.lr);
  p.weight_decay = j.value("weight_decay", d.weight_decay);
  p.backbone_lr_mult = j.value("backbone_lr_mult", d.backbone_lr_mult);
  p.beta1 = j.value("beta1", d.beta1);
  p.beta2 = j.value("beta2", d.beta2);
  p.adam_eps = j.value("adam_eps", d.adam_eps);
  p.steps = j.value("steps", d.steps);
  p.lambda_ce = j.value("lambda_ce", d.lambda_ce);
  p.lambda_dice = j.value("lambda_dice", d.lambda_dice);
  p.lambda_cls = j.value("lambda_cls", d.lambda_cls);
  p.no_object_weight = j.value("no_object_weight", d.no_object_weight);
  p.deep_supervision = j.value("deep_supervision", d.deep_supervision);
  p.clip_grad_norm = j.value("clip_grad_norm", d.clip_grad_norm);
  p.log_every = j.value("log_every", d.log_every);
}

/// Canonical config text embedded in checkpoints; keys are sorted by the
/// JSON library, so equal configs serialize identically.
inline std::string canonical_config_text(const ModelConfig& c) {
  nlohmann::json j = c;
  return j.dump();
}

}  // namespace mfrt
