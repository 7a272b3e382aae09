#include "dvt/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dvt {

EncoderConfig CascadeConfig::encoder_config(int stage) const {
  EncoderConfig e;
  e.layers = layers;
  e.width = width;
  e.heads = heads;
  e.mlp_ratio = mlp_ratio;
  e.context_width = (stage > 0 && feature_reuse) ? context_width : 0;
  return e;
}

ReuseConfig CascadeConfig::reuse_config(int boundary) const {
  if (boundary < 0 || boundary >= num_exits() - 1) {
    throw ShapeError("reuse_config: boundary out of range");
  }
  ReuseConfig r;
  r.up_grid = grids[boundary];
  r.down_grid = grids[boundary + 1];
  r.layers = layers;
  r.width = width;
  r.heads = heads;
  r.context_width = context_width;
  r.feature_hidden = effective_feature_hidden();
  r.feature = feature_reuse;
  r.relationship = relationship_reuse;
  return r;
}

void CascadeConfig::validate() const {
  if (grids.empty()) throw ShapeError("cascade: no token grids");
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const TokenGridSpec& g = grids[i];
    if (g.grid_h < 1 || g.grid_w < 1 || g.patch_px < 1) {
      throw ShapeError("cascade: degenerate grid at stage " + std::to_string(i));
    }
    if (g.grid_h * g.patch_px != image_h || g.grid_w * g.patch_px != image_w) {
      throw ShapeError("cascade: stage " + std::to_string(i) +
                       " grid does not tile the " + std::to_string(image_h) +
                       "x" + std::to_string(image_w) + " image");
    }
    if (i > 0 && grids[i].tokens() <= grids[i - 1].tokens()) {
      throw ShapeError("cascade: token counts must strictly increase");
    }
  }
  if (classes < 2) throw ShapeError("cascade: classes < 2");
  if (in_channels < 1) throw ShapeError("cascade: in_channels < 1");
  if (feature_reuse && num_exits() > 1 && context_width < 1) {
    throw ShapeError("cascade: feature reuse needs context_width >= 1");
  }
  encoder_config(0).validate();
  if (num_exits() > 1) encoder_config(1).validate();
}

Tensor multi_exit_loss(const std::vector<Tensor>& exit_logits,
                       const std::vector<int>& labels) {
  if (exit_logits.empty()) throw ShapeError("multi_exit_loss: no exits");
  Tensor total = cross_entropy(exit_logits[0], labels);
  for (std::size_t i = 1; i < exit_logits.size(); ++i) {
    total = add(total, cross_entropy(exit_logits[i], labels));
  }
  return total;
}

FlopsBreakdown flops_estimate(const CascadeConfig& cfg, int stage) {
  cfg.validate();
  if (stage < 0 || stage >= cfg.num_exits()) {
    throw ShapeError("flops_estimate: stage out of range");
  }
  const double n = cfg.grids[stage].tokens();
  const double d = cfg.width;
  const double l = cfg.layers;
  const double patch_dim =
      static_cast<double>(cfg.in_channels) * cfg.grids[stage].patch_px *
      cfg.grids[stage].patch_px;
  const double r = cfg.mlp_ratio;
  FlopsBreakdown f;
  // The class token is a parameter, not a pixel projection.
  f.patch_proj = 2.0 * cfg.grids[stage].spatial_tokens() * patch_dim * d;
  f.encoder_linear = l * (8.0 + 4.0 * r) * n * d * d;  // qkvo + unwidened mlp
  f.encoder_attention = l * 4.0 * n * n * d;
  f.head = 2.0 * d * cfg.classes;
  if (stage > 0) {
    const TokenGridSpec& up = cfg.grids[stage - 1];
    const TokenGridSpec& dn = cfg.grids[stage];
    if (cfg.feature_reuse) {
      // Context MLPs see the upstream tokens with the class row dropped.
      const double sp_up = up.spatial_tokens();
      const double hid = cfg.effective_feature_hidden();
      const double dp = cfg.context_width;
      f.feature_mlp = 2.0 * l * sp_up * d * hid + 2.0 * l * sp_up * hid * dp;
      // Bilinear resize to the downstream grid runs one matmul per changed axis.
      double resize = 0.0;
      if (dn.grid_h != up.grid_h) resize += dp * up.grid_w * up.grid_h * dn.grid_h;
      if (dn.grid_w != up.grid_w) resize += dp * dn.grid_h * up.grid_w * dn.grid_w;
      f.feature_mlp += 2.0 * l * resize;
      f.mlp_widening = 2.0 * l * n * dp * (r * d);
    }
    if (cfg.relationship_reuse) {
      // The pair MLP runs at upstream resolution over all pairs, class included.
      const double n_up = up.tokens();
      const double c = static_cast<double>(cfg.heads) * cfg.layers;
      f.relationship_mlp = 2.0 * n_up * n_up * c * (3.0 * c) * 2.0;
      // Resizing the pair grid multiplies by the interp matrix along each side.
      if (!(up == dn)) {
        f.relationship_mlp += 2.0 * c * n_up * n * (n_up + n);
      }
    }
  }
  return f;
}

double cumulative_flops(const CascadeConfig& cfg, int exit_index) {
  if (exit_index < 0 || exit_index >= cfg.num_exits()) {
    throw ShapeError("cumulative_flops: exit out of range");
  }
  double total = 0.0;
  for (int s = 0; s <= exit_index; ++s) total += flops_estimate(cfg, s).total();
  return total;
}

Cascade::Cascade(CascadeConfig cfg, std::uint64_t seed) : config(std::move(cfg)) {
  config.validate();
  Rng rng(seed);
  const int k = config.num_exits();
  params.stages.resize(k);
  for (int s = 0; s < k; ++s) {
    EncoderConfig ec = config.encoder_config(s);
    params.stages[s].embed =
        init_embed(config.grids[s], config.in_channels, config.width, rng);
    params.stages[s].layers.reserve(ec.layers);
    for (int l = 0; l < ec.layers; ++l) {
      params.stages[s].layers.push_back(init_layer(ec, rng));
    }
    params.stages[s].head = init_head(config.width, config.classes, rng);
  }
  if (config.feature_reuse || config.relationship_reuse) {
    params.boundaries.resize(std::max(k - 1, 0));
    for (int bi = 0; bi < k - 1; ++bi) {
      params.boundaries[bi] = init_reuse(config.reuse_config(bi), rng);
    }
  }
}

EncoderOutput Cascade::run_stage(const Tensor& images, int stage,
                                 const EncoderOutput* upstream) const {
  const EncoderConfig ec = config.encoder_config(stage);
  ReuseBundle bundle;
  const ReuseBundle* bundle_ptr = nullptr;
  if (stage > 0 && upstream != nullptr &&
      (config.feature_reuse || config.relationship_reuse)) {
    bundle = build_reuse_bundle(*upstream, config.reuse_config(stage - 1),
                                params.boundaries[stage - 1]);
    bundle_ptr = &bundle;
  }
  TokenSequence seq =
      tokenize(images, config.grids[stage], params.stages[stage].embed);
  return encoder_forward(seq, params.stages[stage], ec, bundle_ptr);
}

std::vector<Tensor> Cascade::forward_train(const Tensor& images) {
  std::vector<Tensor> exit_logits;
  exit_logits.reserve(config.num_exits());
  EncoderOutput prev;
  for (int s = 0; s < config.num_exits(); ++s) {
    EncoderOutput out = run_stage(images, s, s > 0 ? &prev : nullptr);
    exit_logits.push_back(out.class_logits);
    prev = std::move(out);
  }
  return exit_logits;
}

double Cascade::train_step(const Tensor& images, const std::vector<int>& labels,
                           AdamState& state, double lr) {
  double loss_value = 0.0;
  {
    Tape tape;
    std::vector<Tensor> logits = forward_train(images);
    Tensor loss = multi_exit_loss(logits, labels);
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("train_step: non-finite loss");
    }
    tape.backward(loss);
  }
  std::vector<Tensor> plist = param_list();
  adam_step(plist, state, lr);
  return loss_value;
}

namespace {

int argmax_row(const std::vector<double>& v, std::int64_t base, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j) {
    if (v[base + j] > v[base + best]) best = j;
  }
  return best;
}

}  // namespace

Cascade::ExitOutputs Cascade::infer_all_exits(const Tensor& images) const {
  ExitOutputs out;
  EncoderOutput prev;
  for (int s = 0; s < config.num_exits(); ++s) {
    EncoderOutput o = run_stage(images, s, s > 0 ? &prev : nullptr);
    out.probs.push_back(softmax(o.class_logits, 1));
    out.flops.push_back(cumulative_flops(config, s));
    prev = std::move(o);
  }
  return out;
}

Cascade::AdaptiveResult Cascade::infer_adaptive(
    const Tensor& images, const std::vector<double>& thresholds) const {
  const int k = config.num_exits();
  if (static_cast<int>(thresholds.size()) != k - 1) {
    throw ShapeError("infer_adaptive: expected " + std::to_string(k - 1) +
                     " thresholds");
  }
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw NumericError("infer_adaptive: thresholds must lie in [0,1]");
    }
  }
  const int b = images.dim(0);
  const int c = config.classes;
  AdaptiveResult res;
  res.label.assign(b, -1);
  res.exit_index.assign(b, -1);
  res.flops.assign(b, 0.0);

  std::vector<int> active(b);
  std::iota(active.begin(), active.end(), 0);
  Tensor batch = images;
  EncoderOutput prev;
  for (int s = 0; s < k && !active.empty(); ++s) {
    EncoderOutput o = run_stage(batch, s, s > 0 ? &prev : nullptr);
    Tensor probs = softmax(o.class_logits, 1);
    const auto& pv = probs.data();
    const double stage_flops = cumulative_flops(config, s);
    std::vector<int> continuing_local;
    for (std::size_t row = 0; row < active.size(); ++row) {
      const std::int64_t base = static_cast<std::int64_t>(row) * c;
      const int arg = argmax_row(pv, base, c);
      const double conf = pv[base + arg];
      const bool exit_now = (s == k - 1) || (conf >= thresholds[s]);
      if (exit_now) {
        const int g = active[row];
        res.label[g] = arg;
        res.exit_index[g] = s;
        res.flops[g] = stage_flops;
      } else {
        continuing_local.push_back(static_cast<int>(row));
      }
    }
    if (s == k - 1 || continuing_local.empty()) break;
    // Compact every stage input to the surviving rows; per-row kernels make
    // this bitwise-identical to running the full batch through.
    std::vector<int> next_active(continuing_local.size());
    for (std::size_t i = 0; i < continuing_local.size(); ++i) {
      next_active[i] = active[continuing_local[i]];
    }
    batch = take_rows(batch, continuing_local);
    prev.tokens = take_rows(o.tokens, continuing_local);
    prev.class_logits = take_rows(o.class_logits, continuing_local);
    prev.layer_logits.clear();
    for (const Tensor& ll : o.layer_logits) {
      prev.layer_logits.push_back(take_rows(ll, continuing_local));
    }
    active = std::move(next_active);
  }
  double total = 0.0;
  for (double f : res.flops) total += f;
  res.mean_flops = b > 0 ? total / b : 0.0;
  return res;
}

std::vector<Tensor> Cascade::param_list() {
  std::vector<Tensor> out;
  visit_params([&out](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

void Cascade::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_cascade_params(params, config, fn);
}

std::int64_t Cascade::num_params() {
  std::int64_t n = 0;
  visit_params([&n](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

void visit_cascade_params(CascadeParams& p, const CascadeConfig& cfg,
                          const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t s = 0; s < p.stages.size(); ++s) {
    visit_stage_params(p.stages[s], "stage" + std::to_string(s), fn);
  }
  for (std::size_t b = 0; b < p.boundaries.size(); ++b) {
    visit_reuse_params(p.boundaries[b], "boundary" + std::to_string(b), fn);
  }
  (void)cfg;
}

std::vector<double> evaluate_exit_accuracy(const Cascade& model,
                                           const Tensor& images,
                                           const std::vector<int>& labels,
                                           int eval_batch) {
  const int n = images.dim(0);
  const int k = model.config.num_exits();
  const int c = model.config.classes;
  std::vector<std::int64_t> correct(k, 0);
  for (int start = 0; start < n; start += eval_batch) {
    const int len = std::min(eval_batch, n - start);
    std::vector<int> idx(len);
    std::iota(idx.begin(), idx.end(), start);
    Tensor batch = take_rows(images, idx);
    Cascade::ExitOutputs out = model.infer_all_exits(batch);
    for (int e = 0; e < k; ++e) {
      const auto& pv = out.probs[e].data();
      for (int row = 0; row < len; ++row) {
        const int arg = argmax_row(pv, static_cast<std::int64_t>(row) * c, c);
        if (arg == labels[start + row]) correct[e] += 1;
      }
    }
  }
  std::vector<double> acc(k, 0.0);
  for (int e = 0; e < k; ++e) acc[e] = n > 0 ? static_cast<double>(correct[e]) / n : 0.0;
  return acc;
}

TrainResult train_loop(Cascade& model, const Tensor& train_images,
                       const std::vector<int>& train_labels,
                       const Tensor& val_images,
                       const std::vector<int>& val_labels,
                       const TrainOptions& options,
                       const std::function<void(const std::string&)>& log) {
  const int n = train_images.dim(0);
  if (n != static_cast<int>(train_labels.size())) {
    throw ShapeError("train_loop: image/label count mismatch");
  }
  if (options.epochs < 1 || options.batch < 1) {
    throw UsageError("train_loop: epochs and batch must be positive");
  }
  Rng rng(options.seed);
  AdamState state;
  TrainResult result;
  const std::int64_t steps_per_epoch = (n + options.batch - 1) / options.batch;
  const std::int64_t total_steps = steps_per_epoch * options.epochs;
  std::int64_t step = 0;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    for (int start = 0; start < n; start += options.batch) {
      const int len = std::min(options.batch, n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + len);
      Tensor batch = take_rows(train_images, idx);
      if (options.augment) batch = options.augment(batch, rng);
      std::vector<int> batch_labels(len);
      for (int i = 0; i < len; ++i) batch_labels[i] = train_labels[idx[i]];
      const double progress = static_cast<double>(step) / total_steps;
      const double lr = options.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
      loss_sum += model.train_step(batch, batch_labels, state, lr);
      loss_count += 1;
      step += 1;
    }
    result.epoch_loss.push_back(loss_sum / loss_count);
    std::vector<double> acc =
        evaluate_exit_accuracy(model, val_images, val_labels);
    result.epoch_val_acc.push_back(acc);
    if (log) {
      std::ostringstream os;
      os << "epoch " << (epoch + 1) << "/" << options.epochs
         << " loss " << result.epoch_loss.back() << " val_acc";
      for (double a : acc) os << " " << a;
      log(os.str());
    }
  }
  return result;
}

}  // namespace dvt
