#include "dvt/patch_embed.hpp"

namespace dvt {

EmbedParams init_embed(const TokenGridSpec& grid, int in_channels, int width,
                       Rng& rng) {
  if (grid.grid_h < 1 || grid.grid_w < 1 || grid.patch_px < 1) {
    throw ShapeError("init_embed: degenerate token grid");
  }
  const int patch_dim = in_channels * grid.patch_px * grid.patch_px;
  EmbedParams p;
  p.projection = truncated_normal({patch_dim, width}, 0.02, rng).set_requires_grad();
  p.projection_bias = Tensor::zeros({width}).set_requires_grad();
  p.class_token = truncated_normal({1, width}, 0.02, rng).set_requires_grad();
  p.pos_embedding =
      truncated_normal({grid.tokens(), width}, 0.02, rng).set_requires_grad();
  return p;
}

TokenSequence tokenize(const Tensor& images, const TokenGridSpec& grid,
                       const EmbedParams& params) {
  if (images.ndim() != 4) {
    throw ShapeError("tokenize: images must be [batch,channels,height,width]");
  }
  const int b = images.dim(0), c = images.dim(1);
  const int h = images.dim(2), w = images.dim(3);
  const int pp = grid.patch_px;
  if (grid.grid_h * pp != h || grid.grid_w * pp != w) {
    throw ShapeError("tokenize: image " + std::to_string(h) + "x" +
                     std::to_string(w) + " does not divide into " +
                     std::to_string(grid.grid_h) + "x" +
                     std::to_string(grid.grid_w) + " patches of " +
                     std::to_string(pp) + "px");
  }
  const int patch_dim = c * pp * pp;
  const int width = params.projection.dim(1);
  if (params.projection.dim(0) != patch_dim) {
    throw ShapeError("tokenize: projection expects patch dim " +
                     std::to_string(params.projection.dim(0)) + ", images give " +
                     std::to_string(patch_dim));
  }
  if (params.pos_embedding.dim(0) != grid.tokens()) {
    throw ShapeError("tokenize: pos_embedding rows != token count");
  }
  const int spatial = grid.spatial_tokens();

  // Raw rearrangement: images carry no gradient, so this is a constant.
  Tensor patches = Tensor::zeros({b * spatial, patch_dim});
  {
    const auto& iv = images.data();
    auto& pv = patches.data();
    for (int bi = 0; bi < b; ++bi) {
      for (int gh = 0; gh < grid.grid_h; ++gh) {
        for (int gw = 0; gw < grid.grid_w; ++gw) {
          double* dst =
              pv.data() +
              (static_cast<std::size_t>(bi) * spatial + gh * grid.grid_w + gw) *
                  patch_dim;
          for (int ci = 0; ci < c; ++ci) {
            for (int py = 0; py < pp; ++py) {
              const double* src =
                  iv.data() +
                  ((static_cast<std::size_t>(bi) * c + ci) * h + gh * pp + py) * w +
                  gw * pp;
              for (int px = 0; px < pp; ++px) {
                dst[(ci * pp + py) * pp + px] = src[px];
              }
            }
          }
        }
      }
    }
  }

  Tensor proj = add(matmul(patches, params.projection), params.projection_bias);
  proj = reshape(proj, {b, spatial, width});
  Tensor cls = broadcast_front(params.class_token, b);  // [b,1,width]
  Tensor tok = concat({cls, proj}, 1);
  tok = add(tok, params.pos_embedding);
  return TokenSequence{tok, grid};
}

void visit_embed_params(EmbedParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".projection", p.projection);
  fn(prefix + ".projection_bias", p.projection_bias);
  fn(prefix + ".class_token", p.class_token);
  fn(prefix + ".pos_embedding", p.pos_embedding);
}

}  // namespace dvt
