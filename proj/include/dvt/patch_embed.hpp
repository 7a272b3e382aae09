#pragma once

#include "dvt/tensor.hpp"

namespace dvt {

// A square patching of the input image into grid_h x grid_w patches of
// patch_px x patch_px pixels. Token 0 is the classification token; spatial
// tokens follow in row-major grid order.
struct TokenGridSpec {
  int grid_h = 0;
  int grid_w = 0;
  int patch_px = 0;

  int spatial_tokens() const { return grid_h * grid_w; }
  int tokens() const { return spatial_tokens() + 1; }
  bool operator==(const TokenGridSpec&) const = default;
};

struct EmbedParams {
  Tensor projection;       // [channels*patch_px*patch_px, width]
  Tensor projection_bias;  // [width]
  Tensor class_token;      // [1, width]
  Tensor pos_embedding;    // [tokens, width]
};

struct TokenSequence {
  Tensor tokens;  // [batch, tokens, width]
  TokenGridSpec grid;
};

// Weights drawn from truncated normal (std 0.02), biases zero. Draw order:
// projection, class_token, pos_embedding.
EmbedParams init_embed(const TokenGridSpec& grid, int in_channels, int width,
                       Rng& rng);

// Splits images [batch, channels, H, W] into patches (flattened channel-major,
// then pixel row-major), linearly projects each to `width`, prepends the class
// token and adds position embeddings. Requires H = grid_h*patch_px and
// W = grid_w*patch_px. Differentiable in the embedding parameters.
TokenSequence tokenize(const Tensor& images, const TokenGridSpec& grid,
                       const EmbedParams& params);

void visit_embed_params(EmbedParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn);

}  // namespace dvt
