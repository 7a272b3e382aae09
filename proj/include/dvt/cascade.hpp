#pragma once

#include "dvt/reuse.hpp"

namespace dvt {

struct CascadeConfig {
  std::vector<TokenGridSpec> grids;  // one per exit, strictly growing tokens
  int layers = 4;
  int width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int context_width = 16;
  int feature_hidden = 0;  // 0 means 2*width
  bool feature_reuse = true;
  bool relationship_reuse = true;
  int classes = 10;
  int in_channels = 1;
  int image_h = 28;
  int image_w = 28;

  int num_exits() const { return static_cast<int>(grids.size()); }
  int effective_feature_hidden() const {
    return feature_hidden > 0 ? feature_hidden : 2 * width;
  }
  // Stage 0 has no upstream, so its blocks are never widened.
  EncoderConfig encoder_config(int stage) const;
  ReuseConfig reuse_config(int boundary) const;  // boundary i: stage i -> i+1
  void validate() const;
};

struct CascadeParams {
  std::vector<StageParams> stages;
  std::vector<ReuseParams> boundaries;
};

// Summed per-exit cross-entropy (all exits weighted equally).
Tensor multi_exit_loss(const std::vector<Tensor>& exit_logits,
                       const std::vector<int>& labels);

// Closed-form per-image FLOPs of one stage (multiply-add = 2 FLOPs; softmax,
// LayerNorm and GELU excluded). Reuse terms are attributed to the downstream
// stage they feed.
struct FlopsBreakdown {
  double patch_proj = 0;
  double encoder_linear = 0;     // (8+4r)*N*D^2 per layer (r = mlp_ratio)
  double encoder_attention = 0;  // 4*N^2*D per layer
  double head = 0;
  double feature_mlp = 0;
  double relationship_mlp = 0;
  double mlp_widening = 0;
  double total() const {
    return patch_proj + encoder_linear + encoder_attention + head +
           feature_mlp + relationship_mlp + mlp_widening;
  }
};

FlopsBreakdown flops_estimate(const CascadeConfig& cfg, int stage);
// Per-image FLOPs spent when exiting at `exit_index` (stages 0..exit_index).
double cumulative_flops(const CascadeConfig& cfg, int exit_index);

class Cascade {
 public:
  Cascade(CascadeConfig cfg, std::uint64_t seed);

  // Per-exit class logits for a batch; records on the active tape. Stage
  // order: all stages are initialized first, then boundary reuse parameters.
  std::vector<Tensor> forward_train(const Tensor& images);

  // One optimizer step on summed multi-exit cross-entropy; returns the loss.
  double train_step(const Tensor& images, const std::vector<int>& labels,
                    AdamState& state, double lr);

  struct ExitOutputs {
    std::vector<Tensor> probs;  // per exit [batch, classes]
    std::vector<double> flops;  // cumulative per exit, per image
  };
  ExitOutputs infer_all_exits(const Tensor& images) const;

  struct AdaptiveResult {
    std::vector<int> label;      // predicted class per sample
    std::vector<int> exit_index; // stage the sample left at
    std::vector<double> flops;   // per-sample cumulative FLOPs
    double mean_flops = 0;
  };
  // Confidence (max softmax probability) is compared against thresholds[i] at
  // exit i; the final exit takes every remaining sample. Samples that continue
  // are gathered into a smaller batch for the next stage, reproducing
  // full-batch arithmetic row for row.
  AdaptiveResult infer_adaptive(const Tensor& images,
                                const std::vector<double>& thresholds) const;

  std::vector<Tensor> param_list();
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  std::int64_t num_params();

  CascadeConfig config;
  CascadeParams params;

 private:
  struct StagePass {
    EncoderOutput out;
    Tensor probs;
  };
  EncoderOutput run_stage(const Tensor& images, int stage,
                          const EncoderOutput* upstream) const;
};

void visit_cascade_params(CascadeParams& p, const CascadeConfig& cfg,
                          const std::function<void(const std::string&, Tensor&)>& fn);

struct TrainOptions {
  int epochs = 3;
  int batch = 128;
  double lr = 1e-3;  // cosine-decayed to 0 over all steps
  std::uint64_t seed = 0;
  // Optional per-batch augmentation hook (seeded by the caller's policy).
  std::function<Tensor(const Tensor&, Rng&)> augment;
};

struct TrainResult {
  std::vector<double> epoch_loss;                 // mean train loss per epoch
  std::vector<std::vector<double>> epoch_val_acc; // per epoch, per exit
};

// Shuffles each epoch with a generator seeded from options.seed, applies the
// augmentation hook to each batch, steps Adam with cosine-decayed lr, and
// evaluates per-exit accuracy on (val_images, val_labels) after each epoch.
TrainResult train_loop(Cascade& model, const Tensor& train_images,
                       const std::vector<int>& train_labels,
                       const Tensor& val_images,
                       const std::vector<int>& val_labels,
                       const TrainOptions& options,
                       const std::function<void(const std::string&)>& log);

// Per-exit accuracy helper used by training and the CLI.
std::vector<double> evaluate_exit_accuracy(const Cascade& model,
                                           const Tensor& images,
                                           const std::vector<int>& labels,
                                           int eval_batch = 256);

}  // namespace dvt
