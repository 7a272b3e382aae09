#include "dvt/reuse.hpp"

namespace dvt {

void ReuseConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1) {
    throw ShapeError("reuse: degenerate dimensions");
  }
  if (feature && (context_width < 1 || feature_hidden < 1)) {
    throw ShapeError("reuse: feature reuse needs positive widths");
  }
  if (up_grid.spatial_tokens() < 1 || down_grid.spatial_tokens() < 1) {
    throw ShapeError("reuse: empty token grid");
  }
}

ReuseParams init_reuse(const ReuseConfig& cfg, Rng& rng) {
  cfg.validate();
  ReuseParams p;
  if (cfg.feature) {
    p.feature.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
      FeatureLayerParams& f = p.feature[l];
      f.w1 = truncated_normal({cfg.width, cfg.feature_hidden}, 0.02, rng)
                 .set_requires_grad();
      f.w2 = truncated_normal({cfg.feature_hidden, cfg.context_width}, 0.02, rng)
                 .set_requires_grad();
      f.b1 = Tensor::zeros({cfg.feature_hidden}).set_requires_grad();
      f.b2 = Tensor::zeros({cfg.context_width}).set_requires_grad();
      f.ln_gain = Tensor::full({cfg.width}, 1.0).set_requires_grad();
      f.ln_bias = Tensor::zeros({cfg.width}).set_requires_grad();
    }
  }
  if (cfg.relationship) {
    const int c = cfg.logit_channels();
    p.relationship.w1 = truncated_normal({c, 3 * c}, 0.02, rng).set_requires_grad();
    p.relationship.w2 = truncated_normal({3 * c, c}, 0.02, rng).set_requires_grad();
    p.relationship.b1 = Tensor::zeros({3 * c}).set_requires_grad();
    p.relationship.b2 = Tensor::zeros({c}).set_requires_grad();
  }
  return p;
}

std::vector<Tensor> build_context(const Tensor& up_tokens,
                                  const ReuseConfig& cfg,
                                  const ReuseParams& params) {
  cfg.validate();
  if (!cfg.feature) throw ShapeError("build_context: feature reuse disabled");
  if (static_cast<int>(params.feature.size()) != cfg.layers) {
    throw ShapeError("build_context: feature param count mismatch");
  }
  const int b = up_tokens.dim(0);
  if (up_tokens.dim(1) != cfg.up_grid.tokens() || up_tokens.dim(2) != cfg.width) {
    throw ShapeError("build_context: upstream token shape mismatch");
  }
  const int su = cfg.up_grid.spatial_tokens();
  const int sd = cfg.down_grid.spatial_tokens();
  Tensor spatial = slice(up_tokens, 1, 1, su);
  std::vector<Tensor> out;
  out.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    const FeatureLayerParams& f = params.feature[l];
    Tensor h = layer_norm(spatial, f.ln_gain, f.ln_bias);
    h = gelu(linear(h, f.w1, f.b1));
    h = linear(h, f.w2, f.b2);  // [b, su, context_width]
    h = reshape(h, {b, cfg.up_grid.grid_h, cfg.up_grid.grid_w, cfg.context_width});
    h = bilinear_upsample_grid(h, cfg.down_grid.grid_h, cfg.down_grid.grid_w);
    h = reshape(h, {b, sd, cfg.context_width});
    Tensor zero_row = Tensor::zeros({b, 1, cfg.context_width});
    out.push_back(concat({zero_row, h}, 1));
  }
  return out;
}

Tensor concat_upstream_logits(const std::vector<Tensor>& layer_logits) {
  if (layer_logits.empty()) {
    throw ShapeError("concat_upstream_logits: no layers");
  }
  Tensor stacked = concat(std::span<const Tensor>(layer_logits), 1);
  // [b, layers*heads, n, n] -> [b, n, n, layers*heads]
  return transpose(stacked, {0, 2, 3, 1});
}

namespace {

// Dense token-pair resize matrix [n_dn, n_up]: entry (0,0) is 1 (class token
// passthrough), the spatial block is the outer product of the row and column
// interpolation matrices.
Tensor token_resize_matrix(const TokenGridSpec& up, const TokenGridSpec& down) {
  const int nu = up.tokens(), nd = down.tokens();
  std::vector<double> r = interp_matrix(up.grid_h, down.grid_h);
  std::vector<double> s = interp_matrix(up.grid_w, down.grid_w);
  std::vector<double> u(static_cast<std::size_t>(nd) * nu, 0.0);
  u[0] = 1.0;
  for (int oh = 0; oh < down.grid_h; ++oh) {
    for (int ow = 0; ow < down.grid_w; ++ow) {
      const std::size_t row = 1 + static_cast<std::size_t>(oh) * down.grid_w + ow;
      for (int ih = 0; ih < up.grid_h; ++ih) {
        const double rw = r[static_cast<std::size_t>(oh) * up.grid_h + ih];
        if (rw == 0.0) continue;
        for (int iw = 0; iw < up.grid_w; ++iw) {
          const double sw = s[static_cast<std::size_t>(ow) * up.grid_w + iw];
          if (sw == 0.0) continue;
          u[row * nu + 1 + static_cast<std::size_t>(ih) * up.grid_w + iw] = rw * sw;
        }
      }
    }
  }
  return Tensor::from_data({nd, nu}, std::move(u));
}

}  // namespace

Tensor attention_grid_upsample(const Tensor& a, const TokenGridSpec& up,
                               const TokenGridSpec& down) {
  const int nu = up.tokens(), nd = down.tokens();
  if (a.ndim() < 2 || a.dim(a.ndim() - 1) != nu || a.dim(a.ndim() - 2) != nu) {
    throw ShapeError("attention_grid_upsample: trailing dims must be [" +
                     std::to_string(nu) + "," + std::to_string(nu) + "]");
  }
  if (up == down) return a;  // exact identity
  const int g = static_cast<int>(a.numel() / (static_cast<std::int64_t>(nu) * nu));
  Tensor ut = transpose(token_resize_matrix(up, down), {1, 0});  // [nu, nd]

  // rows: A -> A U^T
  Tensor m = reshape(a, {g * nu, nu});
  m = matmul(m, ut);
  m = reshape(m, {g, nu, nd});
  // columns: U (A U^T) computed as ((A U^T)^T U^T)^T
  m = transpose(m, {0, 2, 1});
  m = reshape(m, {g * nd, nu});
  m = matmul(m, ut);
  m = reshape(m, {g, nd, nd});
  m = transpose(m, {0, 2, 1});

  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = nd;
  out_shape[out_shape.size() - 1] = nd;
  return reshape(m, std::move(out_shape));
}

std::vector<Tensor> transform_relationships(const Tensor& stack,
                                            const ReuseConfig& cfg,
                                            const RelationshipParams& params) {
  cfg.validate();
  if (!cfg.relationship) {
    throw ShapeError("transform_relationships: relationship reuse disabled");
  }
  const int c = cfg.logit_channels();
  const int nu = cfg.up_grid.tokens();
  if (stack.ndim() != 4 || stack.dim(1) != nu || stack.dim(2) != nu ||
      stack.dim(3) != c) {
    throw ShapeError("transform_relationships: stack must be [batch," +
                     std::to_string(nu) + "," + std::to_string(nu) + "," +
                     std::to_string(c) + "]");
  }
  const int b = stack.dim(0);
  Tensor h = reshape(stack, {b * nu * nu, c});
  h = gelu(linear(h, params.w1, params.b1));
  h = linear(h, params.w2, params.b2);
  h = reshape(h, {b, nu, nu, c});
  h = transpose(h, {0, 3, 1, 2});  // [b, c, nu, nu]
  h = attention_grid_upsample(h, cfg.up_grid, cfg.down_grid);
  std::vector<Tensor> out;
  out.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    out.push_back(slice(h, 1, l * cfg.heads, cfg.heads));  // [b, heads, nd, nd]
  }
  return out;
}

ReuseBundle build_reuse_bundle(const EncoderOutput& upstream,
                               const ReuseConfig& cfg,
                               const ReuseParams& params) {
  ReuseBundle bundle;
  if (cfg.feature) {
    bundle.context = build_context(upstream.tokens, cfg, params);
  }
  if (cfg.relationship) {
    Tensor stack = concat_upstream_logits(upstream.layer_logits);
    bundle.injected = transform_relationships(stack, cfg, params.relationship);
  }
  return bundle;
}

void visit_reuse_params(ReuseParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t l = 0; l < p.feature.size(); ++l) {
    FeatureLayerParams& f = p.feature[l];
    const std::string fp = prefix + ".feature" + std::to_string(l);
    fn(fp + ".ln_gain", f.ln_gain);
    fn(fp + ".ln_bias", f.ln_bias);
    fn(fp + ".w1", f.w1);
    fn(fp + ".b1", f.b1);
    fn(fp + ".w2", f.w2);
    fn(fp + ".b2", f.b2);
  }
  if (p.relationship.w1.defined()) {
    fn(prefix + ".relationship.w1", p.relationship.w1);
    fn(prefix + ".relationship.b1", p.relationship.b1);
    fn(prefix + ".relationship.w2", p.relationship.w2);
    fn(prefix + ".relationship.b2", p.relationship.b2);
  }
}

}  // namespace dvt
