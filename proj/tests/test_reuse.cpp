#include <doctest.h>

#include <cmath>

#include "dvt/reuse.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace dvt;
using testutil::check_gradients;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

ReuseConfig small_cfg(int h_up, int w_up, int h_dn, int w_dn) {
  ReuseConfig cfg;
  cfg.up_grid = {h_up, w_up, 4};
  cfg.down_grid = {h_dn, w_dn, 2};
  cfg.layers = 2;
  cfg.width = 6;
  cfg.heads = 2;
  cfg.context_width = 3;
  cfg.feature_hidden = 5;
  return cfg;
}

oracle::FeatureWeights feature_oracle(const FeatureLayerParams& p) {
  oracle::FeatureWeights w;
  w.ln_g = p.ln_gain.data();
  w.ln_b = p.ln_bias.data();
  w.w1 = p.w1.data();
  w.b1 = p.b1.data();
  w.w2 = p.w2.data();
  w.b2 = p.b2.data();
  return w;
}

oracle::Vec sample(const Tensor& t, int b, int per_sample) {
  const double* base = t.data().data() + static_cast<std::size_t>(b) * per_sample;
  return oracle::Vec(base, base + per_sample);
}

void densify(ReuseParams& params, Rng& rng) {
  visit_reuse_params(params, "r", [&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v = rng.uniform() * 2.0 - 1.0;
  });
}

}  // namespace

TEST_SUITE_BEGIN("reuse");

TEST_CASE("build_context matches the scalar oracle per layer") {
  Rng rng(201);
  for (int it = 0; it < 6; ++it) {
    ReuseConfig cfg = small_cfg(2, 2, 3, 4);
    if (it % 2 == 1) cfg.down_grid = {4, 2, 2};
    cfg.validate();
    ReuseParams params = init_reuse(cfg, rng);
    densify(params, rng);
    const int n_up = cfg.up_grid.tokens();
    const int batch = 1 + static_cast<int>(rng.integer(3));
    Tensor up = random_tensor({batch, n_up, cfg.width}, rng);

    std::vector<Tensor> ctx = build_context(up, cfg, params);
    REQUIRE(static_cast<int>(ctx.size()) == cfg.layers);
    const int n_dn = cfg.down_grid.tokens();
    for (int l = 0; l < cfg.layers; ++l) {
      CHECK(ctx[l].shape() == Shape{batch, n_dn, cfg.context_width});
      oracle::FeatureWeights w = feature_oracle(params.feature[l]);
      for (int b = 0; b < batch; ++b) {
        oracle::Vec out;
        oracle::build_context_layer(sample(up, b, n_up * cfg.width), cfg.width,
                                    cfg.up_grid.grid_h, cfg.up_grid.grid_w,
                                    cfg.down_grid.grid_h, cfg.down_grid.grid_w,
                                    cfg.feature_hidden, cfg.context_width, w, out);
        CHECK(max_abs_diff(sample(ctx[l], b, n_dn * cfg.context_width), out) < 1e-9);
      }
    }
  }
}

TEST_CASE("context class row is exactly zero") {
  Rng rng(202);
  ReuseConfig cfg = small_cfg(2, 2, 4, 4);
  ReuseParams params = init_reuse(cfg, rng);
  densify(params, rng);
  Tensor up = random_tensor({2, cfg.up_grid.tokens(), cfg.width}, rng);
  for (const Tensor& c : build_context(up, cfg, params)) {
    for (int b = 0; b < 2; ++b) {
      for (int j = 0; j < cfg.context_width; ++j) {
        const double v =
            c.data()[(b * cfg.down_grid.tokens() + 0) * cfg.context_width + j];
        CHECK(v == 0.0);
        CHECK(!std::signbit(v));
      }
    }
  }
}

TEST_CASE("concat_upstream_logits interleaves channels layer-major") {
  // layer l head h must land in channel l*heads + h
  const int batch = 1, heads = 2, n = 3, layers = 2;
  std::vector<Tensor> per_layer;
  for (int l = 0; l < layers; ++l) {
    Tensor t = Tensor::zeros({batch, heads, n, n});
    for (int h = 0; h < heads; ++h) {
      for (int ij = 0; ij < n * n; ++ij) {
        t.data()[(h * n * n) + ij] = 100 * l + 10 * h + ij;
      }
    }
    per_layer.push_back(t);
  }
  Tensor stack = concat_upstream_logits(per_layer);
  CHECK(stack.shape() == Shape{batch, n, n, layers * heads});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int l = 0; l < layers; ++l) {
        for (int h = 0; h < heads; ++h) {
          const double got =
              stack.data()[((i * n) + j) * layers * heads + l * heads + h];
          CHECK(got == 100 * l + 10 * h + i * n + j);
        }
      }
    }
  }
}

TEST_CASE("attention_grid_upsample matches the scalar oracle") {
  Rng rng(203);
  for (int it = 0; it < 6; ++it) {
    TokenGridSpec up{2, 2, 4};
    TokenGridSpec dn = (it % 2 == 0) ? TokenGridSpec{4, 4, 2}
                                     : TokenGridSpec{3, 5, 2};
    const int channels = 1 + static_cast<int>(rng.integer(4));
    const int batch = 1 + static_cast<int>(rng.integer(2));
    const int n_up = up.tokens();
    Tensor a = random_tensor({batch * channels, n_up, n_up}, rng);
    Tensor got = attention_grid_upsample(
        reshape(a, {batch, channels, n_up, n_up}), up, dn);
    const int n_dn = dn.tokens();
    CHECK(got.shape() == Shape{batch, channels, n_dn, n_dn});
    for (int b = 0; b < batch; ++b) {
      oracle::Vec out;
      oracle::attention_grid_upsample(sample(a, b, channels * n_up * n_up),
                                      channels, up.grid_h, up.grid_w, dn.grid_h,
                                      dn.grid_w, out);
      CHECK(max_abs_diff(sample(got, b, channels * n_dn * n_dn), out) < 1e-9);
    }
  }
}

TEST_CASE("attention_grid_upsample on equal grids returns the input tensor") {
  Rng rng(204);
  TokenGridSpec g{3, 3, 2};
  Tensor a = random_tensor({2, 4, 10, 10}, rng);
  Tensor out = attention_grid_upsample(a, g, g);
  CHECK(out.node() == a.node());
}

TEST_CASE("attention_grid_upsample keeps class row and column fixed points") {
  Rng rng(205);
  TokenGridSpec up{2, 2, 4};
  TokenGridSpec dn{4, 4, 2};
  Tensor a = random_tensor({1, 1, 5, 5}, rng);
  Tensor out = attention_grid_upsample(a, up, dn);
  // [0,0] passes straight through
  CHECK(out.data()[0] == doctest::Approx(a.data()[0]).epsilon(1e-12));
  // constant map stays constant (interpolation preserves constants)
  Tensor c = Tensor::full({1, 1, 5, 5}, 2.5);
  Tensor cu = attention_grid_upsample(c, up, dn);
  for (double v : cu.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("transform_relationships matches the scalar oracle") {
  Rng rng(206);
  for (int it = 0; it < 4; ++it) {
    ReuseConfig cfg = small_cfg(2, 2, 3, 3);
    cfg.feature = it % 2 == 0;  // irrelevant to this path
    ReuseParams params = init_reuse(cfg, rng);
    densify(params, rng);
    const int n_up = cfg.up_grid.tokens();
    const int c = cfg.logit_channels();
    const int batch = 1 + static_cast<int>(rng.integer(2));
    Tensor stack = random_tensor({batch, n_up, n_up, c}, rng);

    std::vector<Tensor> injected =
        transform_relationships(stack, cfg, params.relationship);
    REQUIRE(static_cast<int>(injected.size()) == cfg.layers);
    const int n_dn = cfg.down_grid.tokens();

    oracle::RelationshipWeights w;
    w.w1 = params.relationship.w1.data();
    w.b1 = params.relationship.b1.data();
    w.w2 = params.relationship.w2.data();
    w.b2 = params.relationship.b2.data();
    for (int b = 0; b < batch; ++b) {
      oracle::Vec out;
      oracle::transform_relationships(sample(stack, b, n_up * n_up * c),
                                      cfg.heads, cfg.layers, cfg.up_grid.grid_h,
                                      cfg.up_grid.grid_w, cfg.down_grid.grid_h,
                                      cfg.down_grid.grid_w, w, out);
      for (int l = 0; l < cfg.layers; ++l) {
        CHECK(injected[l].shape() == Shape{batch, cfg.heads, n_dn, n_dn});
        const int per = cfg.heads * n_dn * n_dn;
        oracle::Vec want(out.begin() + l * per, out.begin() + (l + 1) * per);
        CHECK(max_abs_diff(sample(injected[l], b, per), want) < 1e-9);
      }
    }
  }
}

TEST_CASE("identity relationship MLP reproduces upsampled logits") {
  // W1 = [I; -I; 0], W2 = [I; -I; 0]: gelu(x) - gelu(-x) = x for the tanh form,
  // so the MLP is the identity and the transform reduces to pure upsampling.
  Rng rng(207);
  ReuseConfig cfg = small_cfg(2, 2, 3, 3);
  ReuseParams params = init_reuse(cfg, rng);
  const int c = cfg.logit_channels();
  params.relationship.w1 = Tensor::zeros({c, 3 * c});
  params.relationship.w2 = Tensor::zeros({3 * c, c});
  for (int i = 0; i < c; ++i) {
    params.relationship.w1.data()[i * 3 * c + i] = 1.0;
    params.relationship.w1.data()[i * 3 * c + (c + i)] = -1.0;
    params.relationship.w2.data()[i * c + i] = 1.0;
    params.relationship.w2.data()[(c + i) * c + i] = -1.0;
  }
  const int n_up = cfg.up_grid.tokens();
  Tensor stack = random_tensor({1, n_up, n_up, c}, rng);
  std::vector<Tensor> injected =
      transform_relationships(stack, cfg, params.relationship);

  Tensor chan_major = transpose(stack, {0, 3, 1, 2});  // [1, c, n, n]
  Tensor up = attention_grid_upsample(chan_major, cfg.up_grid, cfg.down_grid);
  const int n_dn = cfg.down_grid.tokens();
  for (int l = 0; l < cfg.layers; ++l) {
    Tensor want = slice(up, 1, l * cfg.heads, cfg.heads);
    CHECK(max_abs_diff(injected[l], want) < 1e-12);
  }
}

TEST_CASE("bundle honors the enable flags") {
  Rng rng(208);
  ReuseConfig cfg = small_cfg(2, 2, 3, 3);
  ReuseParams params = init_reuse(cfg, rng);
  densify(params, rng);

  EncoderOutput upstream;
  const int n_up = cfg.up_grid.tokens();
  upstream.tokens = random_tensor({2, n_up, cfg.width}, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    upstream.layer_logits.push_back(
        random_tensor({2, cfg.heads, n_up, n_up}, rng));
  }

  ReuseBundle both = build_reuse_bundle(upstream, cfg, params);
  CHECK(both.context.size() == 2);
  CHECK(both.injected.size() == 2);

  cfg.feature = false;
  ReuseParams no_feat = init_reuse(cfg, rng);
  CHECK(no_feat.feature.empty());
  densify(no_feat, rng);
  ReuseBundle rel_only = build_reuse_bundle(upstream, cfg, no_feat);
  CHECK(rel_only.context.empty());
  CHECK(rel_only.injected.size() == 2);

  cfg.feature = true;
  cfg.relationship = false;
  ReuseParams no_rel = init_reuse(cfg, rng);
  densify(no_rel, rng);
  ReuseBundle feat_only = build_reuse_bundle(upstream, cfg, no_rel);
  CHECK(feat_only.context.size() == 2);
  CHECK(feat_only.injected.empty());
}

TEST_CASE("gradients flow through context building and relationship transform") {
  Rng rng(209);
  ReuseConfig cfg = small_cfg(2, 2, 3, 3);
  cfg.layers = 1;
  ReuseParams params = init_reuse(cfg, rng);
  densify(params, rng);
  const int n_up = cfg.up_grid.tokens();
  Tensor up = random_tensor({1, n_up, cfg.width}, rng).set_requires_grad();
  params.feature[0].w1.set_requires_grad();
  params.feature[0].b2.set_requires_grad();
  Tensor probe =
      random_tensor({1, cfg.down_grid.tokens(), cfg.context_width}, rng);
  check_gradients({up, params.feature[0].w1, params.feature[0].b2}, [&] {
    return sum_all(mul(build_context(up, cfg, params)[0], probe));
  });

  const int c = cfg.logit_channels();
  Tensor stack = random_tensor({1, n_up, n_up, c}, rng).set_requires_grad();
  params.relationship.w1.set_requires_grad();
  const int n_dn = cfg.down_grid.tokens();
  Tensor probe2 = random_tensor({1, cfg.heads, n_dn, n_dn}, rng);
  check_gradients({stack, params.relationship.w1}, [&] {
    return sum_all(
        mul(transform_relationships(stack, cfg, params.relationship)[0], probe2));
  });
}

TEST_CASE("validate rejects degenerate boundary configs") {
  ReuseConfig cfg = small_cfg(2, 2, 4, 4);
  cfg.context_width = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);  // feature reuse needs width
  cfg = small_cfg(2, 2, 4, 4);
  cfg.up_grid = {0, 2, 4};
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = small_cfg(2, 2, 4, 4);
  cfg.heads = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
}

TEST_SUITE_END();
