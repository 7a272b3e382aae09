#pragma once

#include "dvt/encoder.hpp"

namespace dvt {

// Wiring of one upstream->downstream boundary in the cascade.
struct ReuseConfig {
  TokenGridSpec up_grid;
  TokenGridSpec down_grid;
  int layers = 4;
  int width = 64;
  int heads = 4;
  int context_width = 16;   // D' appended per token downstream
  int feature_hidden = 128; // hidden width of the per-layer context MLPs
  bool feature = true;
  bool relationship = true;

  int logit_channels() const { return heads * layers; }
  void validate() const;
};

// Per-layer context MLP: LayerNorm -> FC(width->hidden) -> GELU ->
// FC(hidden->context_width).
struct FeatureLayerParams {
  Tensor ln_gain, ln_bias;  // [width]
  Tensor w1, b1;            // [width, hidden],[hidden]
  Tensor w2, b2;            // [hidden, context_width],[context_width]
};

// One MLP shared across token pairs refining all layers' attention logits at
// once: FC(C -> 3C) -> GELU -> FC(3C -> C) with C = heads*layers.
struct RelationshipParams {
  Tensor w1, b1;
  Tensor w2, b2;
};

struct ReuseParams {
  std::vector<FeatureLayerParams> feature;  // size layers, or empty if disabled
  RelationshipParams relationship;          // undefined tensors if disabled
};

// Draw order: per layer w1, w2; then relationship w1, w2 (truncated normal,
// std 0.02). LayerNorm gains one, biases zero.
ReuseParams init_reuse(const ReuseConfig& cfg, Rng& rng);

// Per-downstream-layer context from the upstream encoder's final tokens:
// drop the class token, apply the layer's context MLP, bilinearly upsample
// from the upstream grid to the downstream grid, and prepend an exact-zero
// row for the class token. Differentiable end to end.
std::vector<Tensor> build_context(const Tensor& up_tokens,
                                  const ReuseConfig& cfg,
                                  const ReuseParams& params);

// Stacks per-layer attention logits [batch, heads, n, n] into
// [batch, n, n, layers*heads]; channel l*heads+h holds layer l, head h.
Tensor concat_upstream_logits(const std::vector<Tensor>& layer_logits);

// Resizes token-pair maps [..., n_up, n_up] to [..., n_dn, n_dn]. Rows are
// upsampled first, then columns: the spatial entries of each row/column are
// reshaped to the upstream grid, bilinearly interpolated to the downstream
// grid and flattened back, while class-token entries map straight through.
// Equal grids return the input unchanged.
Tensor attention_grid_upsample(const Tensor& a, const TokenGridSpec& up,
                               const TokenGridSpec& down);

// Refines the stacked upstream logits with the shared relationship MLP and
// returns per-downstream-layer injected logits [batch, heads, n_dn, n_dn]
// (layer l reads output channels [l*heads, (l+1)*heads)).
std::vector<Tensor> transform_relationships(const Tensor& stack,
                                            const ReuseConfig& cfg,
                                            const RelationshipParams& params);

// Convenience: builds the downstream ReuseBundle from an upstream encoder
// output according to the enabled mechanisms.
ReuseBundle build_reuse_bundle(const EncoderOutput& upstream,
                               const ReuseConfig& cfg,
                               const ReuseParams& params);

void visit_reuse_params(ReuseParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn);

}  // namespace dvt
