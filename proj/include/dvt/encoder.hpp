#pragma once

#include <optional>

#include "dvt/patch_embed.hpp"
#include "dvt/tensor.hpp"

namespace dvt {

struct EncoderConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  // Extra channels concatenated to each token before the MLP sub-block's
  // LayerNorm; 0 for stages without feature reuse.
  int context_width = 0;

  int head_width() const { return width / heads; }
  int mlp_hidden() const { return mlp_ratio * width; }
  int mlp_in() const { return width + context_width; }
  void validate() const;
};

// One pre-norm transformer layer. When context_width > 0 the second LayerNorm
// and the first MLP matrix are widened from `width` to `width+context_width`.
struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv;  // [width,width],[width]
  Tensor wo, bo;                  // [width,width],[width]
  Tensor ln1_gain, ln1_bias;      // [width]
  Tensor ln2_gain, ln2_bias;      // [mlp_in]
  Tensor mlp_w1, mlp_b1;          // [mlp_in, hidden],[hidden]
  Tensor mlp_w2, mlp_b2;          // [hidden, width],[width]
};

struct HeadParams {
  Tensor ln_gain, ln_bias;  // [width]
  Tensor w, b;              // [width, classes],[classes]
};

struct StageParams {
  EmbedParams embed;
  std::vector<LayerParams> layers;
  HeadParams head;
};

// Optional per-layer inputs produced by the reuse module. Either vector may be
// empty: empty context means exact-zero context (when context_width > 0),
// empty injected means no attention-logit injection.
struct ReuseBundle {
  std::vector<Tensor> context;   // per layer [batch, tokens, context_width]
  std::vector<Tensor> injected;  // per layer [batch, heads, tokens, tokens]
};

struct MsaResult {
  Tensor tokens;  // [batch, tokens, width]
  Tensor logits;  // [batch, heads, tokens, tokens], pre-softmax, pre-injection
};

// Multi-head self-attention sub-block with residual:
//   y = tokens + W_o(Attention(LN(tokens))).
// Attention logits are Q K^T / sqrt(head_width); `injected` (if non-null) is
// added to the logits before the softmax. The returned logits exclude the
// injection (they are this layer's own Q K^T product).
MsaResult msa_block(const Tensor& tokens, const LayerParams& p,
                    const EncoderConfig& cfg, const Tensor* injected);

// MLP sub-block with residual. When context is available each token is
// concatenated with its context row before the LayerNorm; the residual adds
// the unconcatenated input:
//   y = tokens + W2 GELU(W1 LN([tokens, context])).
// With context_width > 0 and context == nullptr, exact zeros are used.
Tensor mlp_block(const Tensor& tokens, const LayerParams& p,
                 const EncoderConfig& cfg, const Tensor* context);

struct EncoderOutput {
  Tensor tokens;                    // final layer output [batch, tokens, width]
  std::vector<Tensor> layer_logits; // per layer [batch, heads, tokens, tokens]
  Tensor class_logits;              // [batch, classes]
};

EncoderOutput encoder_forward(const TokenSequence& input, const StageParams& p,
                              const EncoderConfig& cfg,
                              const ReuseBundle* reuse);

// Weight draw order per layer: wq, wk, wv, wo, mlp_w1, mlp_w2 (truncated
// normal, std 0.02). LayerNorm gains one, all biases zero.
LayerParams init_layer(const EncoderConfig& cfg, Rng& rng);
HeadParams init_head(int width, int classes, Rng& rng);

void visit_layer_params(LayerParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn);
void visit_head_params(HeadParams& p, const std::string& prefix,
                       const std::function<void(const std::string&, Tensor&)>& fn);
void visit_stage_params(StageParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn);

}  // namespace dvt
