#include "dvt/encoder.hpp"

#include <cmath>

namespace dvt {

void EncoderConfig::validate() const {
  if (layers < 1) throw ShapeError("encoder: layers < 1");
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ShapeError("encoder: width must be a positive multiple of heads");
  }
  if (mlp_ratio < 1) throw ShapeError("encoder: mlp_ratio < 1");
  if (context_width < 0) throw ShapeError("encoder: negative context width");
}

MsaResult msa_block(const Tensor& tokens, const LayerParams& p,
                    const EncoderConfig& cfg, const Tensor* injected) {
  const int b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  if (d != cfg.width) throw ShapeError("msa_block: token width mismatch");
  const int h = cfg.heads, dh = cfg.head_width();

  Tensor x = layer_norm(tokens, p.ln1_gain, p.ln1_bias);
  auto split_heads = [&](const Tensor& t) {
    // [b,n,d] -> [b*heads, n, dh]; head i reads columns [i*dh, (i+1)*dh)
    Tensor r = reshape(t, {b, n, h, dh});
    r = transpose(r, {0, 2, 1, 3});
    return reshape(r, {b * h, n, dh});
  };
  Tensor q = split_heads(linear(x, p.wq, p.bq));
  Tensor k = split_heads(linear(x, p.wk, p.bk));
  Tensor v = split_heads(linear(x, p.wv, p.bv));

  Tensor logits = scale(bmm(q, transpose(k, {0, 2, 1})), 1.0 / std::sqrt(dh));
  logits = reshape(logits, {b, h, n, n});

  Tensor att_in = logits;
  if (injected != nullptr) {
    if (injected->shape() != logits.shape()) {
      throw ShapeError("msa_block: injected logits shape mismatch");
    }
    att_in = add(logits, *injected);
  }
  Tensor att = softmax(att_in, 3);
  Tensor o = bmm(reshape(att, {b * h, n, n}), v);  // [b*h, n, dh]
  o = reshape(transpose(reshape(o, {b, h, n, dh}), {0, 2, 1, 3}), {b, n, d});
  Tensor out = add(tokens, linear(o, p.wo, p.bo));
  return MsaResult{out, logits};
}

Tensor mlp_block(const Tensor& tokens, const LayerParams& p,
                 const EncoderConfig& cfg, const Tensor* context) {
  const int b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  if (d != cfg.width) throw ShapeError("mlp_block: token width mismatch");
  Tensor x = tokens;
  if (cfg.context_width > 0) {
    Tensor ctx;
    if (context != nullptr) {
      if (context->dim(0) != b || context->dim(1) != n ||
          context->dim(2) != cfg.context_width) {
        throw ShapeError("mlp_block: context shape mismatch");
      }
      ctx = *context;
    } else {
      ctx = Tensor::zeros({b, n, cfg.context_width});
    }
    x = concat({tokens, ctx}, 2);
  } else if (context != nullptr) {
    throw ShapeError("mlp_block: context given but context_width is 0");
  }
  x = layer_norm(x, p.ln2_gain, p.ln2_bias);
  x = linear(x, p.mlp_w1, p.mlp_b1);
  x = gelu(x);
  x = linear(x, p.mlp_w2, p.mlp_b2);
  return add(tokens, x);
}

EncoderOutput encoder_forward(const TokenSequence& input, const StageParams& p,
                              const EncoderConfig& cfg,
                              const ReuseBundle* reuse) {
  cfg.validate();
  if (static_cast<int>(p.layers.size()) != cfg.layers) {
    throw ShapeError("encoder_forward: layer param count mismatch");
  }
  if (reuse != nullptr) {
    if (!reuse->context.empty() &&
        static_cast<int>(reuse->context.size()) != cfg.layers) {
      throw ShapeError("encoder_forward: context bundle size mismatch");
    }
    if (!reuse->injected.empty() &&
        static_cast<int>(reuse->injected.size()) != cfg.layers) {
      throw ShapeError("encoder_forward: injected bundle size mismatch");
    }
  }
  EncoderOutput out;
  Tensor x = input.tokens;
  out.layer_logits.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    const Tensor* injected = nullptr;
    if (reuse != nullptr && !reuse->injected.empty()) {
      injected = &reuse->injected[l];
    }
    MsaResult msa = msa_block(x, p.layers[l], cfg, injected);
    out.layer_logits.push_back(msa.logits);
    const Tensor* context = nullptr;
    if (reuse != nullptr && !reuse->context.empty()) {
      context = &reuse->context[l];
    }
    x = mlp_block(msa.tokens, p.layers[l], cfg, context);
  }
  out.tokens = x;
  Tensor cls = reshape(slice(x, 1, 0, 1), {x.dim(0), cfg.width});
  cls = layer_norm(cls, p.head.ln_gain, p.head.ln_bias);
  out.class_logits = linear(cls, p.head.w, p.head.b);
  return out;
}

LayerParams init_layer(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.width, din = cfg.mlp_in(), hid = cfg.mlp_hidden();
  LayerParams p;
  p.wq = truncated_normal({d, d}, 0.02, rng).set_requires_grad();
  p.wk = truncated_normal({d, d}, 0.02, rng).set_requires_grad();
  p.wv = truncated_normal({d, d}, 0.02, rng).set_requires_grad();
  p.wo = truncated_normal({d, d}, 0.02, rng).set_requires_grad();
  p.mlp_w1 = truncated_normal({din, hid}, 0.02, rng).set_requires_grad();
  p.mlp_w2 = truncated_normal({hid, d}, 0.02, rng).set_requires_grad();
  p.bq = Tensor::zeros({d}).set_requires_grad();
  p.bk = Tensor::zeros({d}).set_requires_grad();
  p.bv = Tensor::zeros({d}).set_requires_grad();
  p.bo = Tensor::zeros({d}).set_requires_grad();
  p.mlp_b1 = Tensor::zeros({hid}).set_requires_grad();
  p.mlp_b2 = Tensor::zeros({d}).set_requires_grad();
  p.ln1_gain = Tensor::full({d}, 1.0).set_requires_grad();
  p.ln1_bias = Tensor::zeros({d}).set_requires_grad();
  p.ln2_gain = Tensor::full({din}, 1.0).set_requires_grad();
  p.ln2_bias = Tensor::zeros({din}).set_requires_grad();
  return p;
}

HeadParams init_head(int width, int classes, Rng& rng) {
  HeadParams p;
  p.w = truncated_normal({width, classes}, 0.02, rng).set_requires_grad();
  p.b = Tensor::zeros({classes}).set_requires_grad();
  p.ln_gain = Tensor::full({width}, 1.0).set_requires_grad();
  p.ln_bias = Tensor::zeros({width}).set_requires_grad();
  return p;
}

void visit_layer_params(LayerParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".wq", p.wq);
  fn(prefix + ".bq", p.bq);
  fn(prefix + ".wk", p.wk);
  fn(prefix + ".bk", p.bk);
  fn(prefix + ".wv", p.wv);
  fn(prefix + ".bv", p.bv);
  fn(prefix + ".wo", p.wo);
  fn(prefix + ".bo", p.bo);
  fn(prefix + ".ln1_gain", p.ln1_gain);
  fn(prefix + ".ln1_bias", p.ln1_bias);
  fn(prefix + ".ln2_gain", p.ln2_gain);
  fn(prefix + ".ln2_bias", p.ln2_bias);
  fn(prefix + ".mlp_w1", p.mlp_w1);
  fn(prefix + ".mlp_b1", p.mlp_b1);
  fn(prefix + ".mlp_w2", p.mlp_w2);
  fn(prefix + ".mlp_b2", p.mlp_b2);
}

void visit_head_params(HeadParams& p, const std::string& prefix,
                       const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".ln_gain", p.ln_gain);
  fn(prefix + ".ln_bias", p.ln_bias);
  fn(prefix + ".w", p.w);
  fn(prefix + ".b", p.b);
}

void visit_stage_params(StageParams& p, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_embed_params(p.embed, prefix + ".embed", fn);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    visit_layer_params(p.layers[l], prefix + ".layer" + std::to_string(l), fn);
  }
  visit_head_params(p.head, prefix + ".head", fn);
}

}  // namespace dvt
