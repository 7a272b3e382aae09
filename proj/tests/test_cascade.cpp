#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dvt/cascade.hpp"
#include "test_util.hpp"

using namespace dvt;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

// Two-exit cascade small enough for per-test training budgets: 8x8 inputs,
// 2x2 then 4x4 grids.
CascadeConfig tiny_config() {
  CascadeConfig cfg;
  cfg.grids = {{2, 2, 4}, {4, 4, 2}};
  cfg.layers = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.context_width = 4;
  cfg.classes = 3;
  cfg.in_channels = 1;
  cfg.image_h = 8;
  cfg.image_w = 8;
  return cfg;
}

// Synthetic class pattern: class 0 bright top, 1 bright bottom, 2 uniform.
void synth_batch(Rng& rng, int n, int classes, Tensor& images,
                 std::vector<int>& labels) {
  images = Tensor::zeros({n, 1, 8, 8});
  labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.integer(classes));
    labels[i] = y;
    for (int r = 0; r < 8; ++r) {
      for (int c = 0; c < 8; ++c) {
        double base = y == 2 ? 0.5 : (y == 0 ? (r < 4 ? 0.9 : 0.1)
                                             : (r < 4 ? 0.1 : 0.9));
        images.data()[(i * 64) + r * 8 + c] = base + 0.05 * rng.normal();
      }
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("cascade");

TEST_CASE("multi_exit_loss sums the per-exit cross entropies") {
  Rng rng(301);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  std::vector<int> labels{0, 4, 2, 1};
  const double la = cross_entropy(a, labels).item();
  const double lb = cross_entropy(b, labels).item();
  CHECK(multi_exit_loss({a, b}, labels).item() ==
        doctest::Approx(la + lb).epsilon(1e-12));
  // K identical exits scale the single-exit loss by K
  CHECK(multi_exit_loss({a, a, a}, labels).item() ==
        doctest::Approx(3 * la).epsilon(1e-12));
  CHECK_THROWS_AS(multi_exit_loss({}, labels), ShapeError);
}

TEST_CASE("config validation enforces tiling and strictly growing grids") {
  CascadeConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.grids[1].patch_px = 3;  // 4*3 != 8
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = tiny_config();
  cfg.grids = {{4, 4, 2}, {2, 2, 4}};  // shrinking token count
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = tiny_config();
  cfg.grids.clear();
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = tiny_config();
  cfg.width = 9;  // not divisible by heads
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
}

TEST_CASE("flops closed form on a hand-computed single-layer stage") {
  CascadeConfig cfg;
  cfg.grids = {{1, 1, 2}};
  cfg.layers = 1;
  cfg.width = 1;
  cfg.heads = 1;
  cfg.mlp_ratio = 4;
  cfg.classes = 10;
  cfg.in_channels = 1;
  cfg.image_h = 2;
  cfg.image_w = 2;
  cfg.feature_reuse = false;
  cfg.relationship_reuse = false;
  FlopsBreakdown fb = flops_estimate(cfg, 0);
  // N = 2 tokens, D = 1: patch 2*1*(4*1)*1 = 8 for the single spatial token,
  // encoder linear 24*2*1 = 48, attention 4*4*1 = 16, head 2*1*10 = 20.
  CHECK(fb.patch_proj == 8.0);
  CHECK(fb.encoder_linear == 48.0);
  CHECK(fb.encoder_attention == 16.0);
  CHECK(fb.head == 20.0);
  CHECK(fb.feature_mlp == 0.0);
  CHECK(fb.relationship_mlp == 0.0);
  CHECK(fb.mlp_widening == 0.0);
  CHECK(fb.total() == 92.0);
}

TEST_CASE("reuse flops land on the downstream stage and widen its mlp") {
  CascadeConfig cfg = tiny_config();
  FlopsBreakdown s0 = flops_estimate(cfg, 0);
  FlopsBreakdown s1 = flops_estimate(cfg, 1);
  CHECK(s0.feature_mlp == 0.0);
  CHECK(s0.relationship_mlp == 0.0);
  CHECK(s0.mlp_widening == 0.0);
  CHECK(s1.feature_mlp > 0.0);
  CHECK(s1.relationship_mlp > 0.0);
  CHECK(s1.mlp_widening > 0.0);

  // Feature MLPs consume the upstream spatial tokens (class row dropped), the
  // relationship MLP every upstream token pair, and the widening term the
  // downstream tokens. Each path also pays for its interp matmuls into the
  // downstream grid (one per axis for features, row+column for pair grids).
  const int sp_up = cfg.grids[0].spatial_tokens();
  const int hid = cfg.effective_feature_hidden();
  const double resize =
      cfg.context_width * cfg.grids[0].grid_w * cfg.grids[0].grid_h *
          cfg.grids[1].grid_h +
      cfg.context_width * cfg.grids[1].grid_h * cfg.grids[0].grid_w *
          cfg.grids[1].grid_w;
  const double feat = 2.0 * cfg.layers * sp_up * cfg.width * hid +
                      2.0 * cfg.layers * sp_up * hid * cfg.context_width +
                      2.0 * cfg.layers * resize;
  CHECK(s1.feature_mlp == doctest::Approx(feat));
  const int n_up = cfg.grids[0].tokens();
  const int n_dn = cfg.grids[1].tokens();
  const double ch = static_cast<double>(cfg.heads) * cfg.layers;
  const double rel = 2.0 * n_up * n_up * ch * (3.0 * ch) * 2.0 +
                     2.0 * ch * n_up * n_dn * (n_up + n_dn);
  CHECK(s1.relationship_mlp == doctest::Approx(rel));
  const double widen = 2.0 * cfg.layers * cfg.grids[1].tokens() *
                       cfg.context_width * (cfg.mlp_ratio * cfg.width);
  CHECK(s1.mlp_widening == doctest::Approx(widen));

  CHECK(cumulative_flops(cfg, 0) == doctest::Approx(s0.total()));
  CHECK(cumulative_flops(cfg, 1) == doctest::Approx(s0.total() + s1.total()));
}

TEST_CASE("disabling reuse removes its flops terms") {
  CascadeConfig cfg = tiny_config();
  cfg.feature_reuse = false;
  FlopsBreakdown s1 = flops_estimate(cfg, 1);
  CHECK(s1.feature_mlp == 0.0);
  CHECK(s1.mlp_widening == 0.0);
  CHECK(s1.relationship_mlp > 0.0);
  cfg.relationship_reuse = false;
  CHECK(flops_estimate(cfg, 1).relationship_mlp == 0.0);
}

TEST_CASE("forward_train emits one logits tensor per exit") {
  Cascade model(tiny_config(), 42);
  Rng rng(302);
  Tensor images = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  std::vector<Tensor> exits = model.forward_train(images);
  REQUIRE(exits.size() == 2);
  CHECK(exits[0].shape() == Shape{3, 3});
  CHECK(exits[1].shape() == Shape{3, 3});

  // seed determinism across fresh instances
  Cascade same(tiny_config(), 42);
  Cascade other(tiny_config(), 43);
  CHECK(testutil::bitwise_equal(same.forward_train(images)[1], exits[1]));
  CHECK(max_abs_diff(other.forward_train(images)[1], exits[1]) > 0.0);
}

TEST_CASE("parameter census matches the visitor and stays stable") {
  Cascade model(tiny_config(), 1);
  std::vector<std::string> names;
  model.visit_params([&](const std::string& n, Tensor&) { names.push_back(n); });
  // 2 stages x (4 embed + 2 layers x 16 + 4 head) + 1 boundary x (2 layers x 6 + 4)
  CHECK(names.size() == 2 * (4 + 32 + 4) + 16);
  CHECK(names.front() == "stage0.embed.projection");
  CHECK(std::count(names.begin(), names.end(), "boundary0.relationship.w1") == 1);
  CHECK(model.param_list().size() == names.size());

  std::int64_t n = 0;
  for (Tensor& t : model.param_list()) n += t.numel();
  CHECK(model.num_params() == n);
}

TEST_CASE("train_step lowers the loss on a learnable batch") {
  Cascade model(tiny_config(), 7);
  Rng rng(303);
  Tensor images;
  std::vector<int> labels;
  synth_batch(rng, 24, 3, images, labels);
  AdamState state;
  const double first = model.train_step(images, labels, state, 1e-3);
  double last = first;
  for (int it = 0; it < 30; ++it) last = model.train_step(images, labels, state, 1e-3);
  CHECK(last < first);
  CHECK(std::isfinite(last));
}

TEST_CASE("infer_all_exits returns softmax rows and growing flops") {
  Cascade model(tiny_config(), 9);
  Rng rng(304);
  Tensor images = random_tensor({4, 1, 8, 8}, rng, 0, 1);
  auto out = model.infer_all_exits(images);
  REQUIRE(out.probs.size() == 2);
  REQUIRE(out.flops.size() == 2);
  CHECK(out.flops[0] > 0.0);
  CHECK(out.flops[1] > out.flops[0]);
  for (const Tensor& p : out.probs) {
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += p.data()[i * 3 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("adaptive inference equals whole-batch exits row for row") {
  // Raising the threshold so nobody exits early must reproduce the final
  // exit's full-batch outputs bitwise; threshold 0 reproduces the first exit.
  Cascade model(tiny_config(), 11);
  Rng rng(305);
  Tensor images = random_tensor({6, 1, 8, 8}, rng, 0, 1);
  auto all = model.infer_all_exits(images);

  auto none_exit = model.infer_adaptive(images, {1.0});
  auto all_exit = model.infer_adaptive(images, {0.0});
  for (int i = 0; i < 6; ++i) {
    CHECK(none_exit.exit_index[i] == 1);
    CHECK(all_exit.exit_index[i] == 0);
    const double* row1 = all.probs[1].data().data() + i * 3;
    const double* row0 = all.probs[0].data().data() + i * 3;
    CHECK(none_exit.label[i] ==
          static_cast<int>(std::max_element(row1, row1 + 3) - row1));
    CHECK(all_exit.label[i] ==
          static_cast<int>(std::max_element(row0, row0 + 3) - row0));
    CHECK(none_exit.flops[i] == all.flops[1]);
    CHECK(all_exit.flops[i] == all.flops[0]);
  }
  CHECK(none_exit.mean_flops == doctest::Approx(all.flops[1]));

  // mixed threshold: every sample's decision must match the policy applied to
  // the whole-batch probabilities, and survivors' rows must be bit-identical
  auto mixed = model.infer_adaptive(images, {0.5});
  for (int i = 0; i < 6; ++i) {
    const double* row0 = all.probs[0].data().data() + i * 3;
    const double conf = *std::max_element(row0, row0 + 3);
    const int want_exit = conf >= 0.5 ? 0 : 1;
    CHECK(mixed.exit_index[i] == want_exit);
    const double* row = all.probs[want_exit].data().data() + i * 3;
    CHECK(mixed.label[i] ==
          static_cast<int>(std::max_element(row, row + 3) - row));
  }
  CHECK_THROWS_AS(model.infer_adaptive(images, {0.5, 0.5}), ShapeError);
  CHECK_THROWS_AS(model.infer_adaptive(images, {-0.1}), NumericError);
  CHECK_THROWS_AS(model.infer_adaptive(images, {1.1}), NumericError);
}

TEST_CASE("reuse toggles change the forward pass but keep interfaces") {
  CascadeConfig cfg = tiny_config();
  cfg.feature_reuse = false;
  cfg.relationship_reuse = false;
  Cascade plain(cfg, 5);
  cfg.feature_reuse = true;
  cfg.relationship_reuse = true;
  Cascade reuse(cfg, 5);
  Rng rng(306);
  Tensor images = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  auto a = plain.infer_all_exits(images);
  auto b = reuse.infer_all_exits(images);
  CHECK(a.probs[0].shape() == b.probs[0].shape());
  CHECK(a.flops[1] < b.flops[1]);  // reuse adds compute
  CHECK(plain.num_params() < reuse.num_params());
}

TEST_CASE("train_loop logs, shuffles deterministically, and reports accuracy") {
  Cascade model(tiny_config(), 21);
  Rng rng(307);
  Tensor train_images, val_images;
  std::vector<int> train_labels, val_labels;
  synth_batch(rng, 48, 3, train_images, train_labels);
  synth_batch(rng, 12, 3, val_images, val_labels);

  TrainOptions opt;
  opt.epochs = 2;
  opt.batch = 16;
  opt.lr = 1e-3;
  opt.seed = 77;
  std::vector<std::string> lines;
  TrainResult res = train_loop(model, train_images, train_labels, val_images,
                               val_labels, opt, [&](const std::string& s) {
                                 lines.push_back(s);
                               });
  REQUIRE(res.epoch_loss.size() == 2);
  REQUIRE(res.epoch_val_acc.size() == 2);
  CHECK(res.epoch_val_acc[0].size() == 2);
  CHECK(lines.size() == 2);
  CHECK(lines[0].find("epoch 1/2") != std::string::npos);
  for (double a : res.epoch_val_acc[1]) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }

  Cascade again(tiny_config(), 21);
  TrainResult res2 = train_loop(again, train_images, train_labels, val_images,
                                val_labels, opt, nullptr);
  CHECK(res2.epoch_loss == res.epoch_loss);
  CHECK(res2.epoch_val_acc == res.epoch_val_acc);
}

TEST_CASE("evaluate_exit_accuracy scores a stacked batch") {
  Cascade model(tiny_config(), 31);
  Rng rng(308);
  Tensor images;
  std::vector<int> labels;
  synth_batch(rng, 10, 3, images, labels);
  std::vector<double> acc = evaluate_exit_accuracy(model, images, labels, 4);
  REQUIRE(acc.size() == 2);
  std::vector<double> acc2 = evaluate_exit_accuracy(model, images, labels, 10);
  // batching must not change the result
  CHECK(acc == acc2);
}

TEST_SUITE_END();
