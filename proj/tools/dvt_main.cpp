// Command-line front end: train a cascade, record per-exit traces, solve for
// budgeted exit thresholds, sweep budgets, and run adaptive inference.
//
// Exit codes: 0 success, 1 usage/configuration error, 2 data error,
// 3 numeric or internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "dvt/data_io.hpp"
#include "dvt/run_config.hpp"

namespace {

using namespace dvt;

struct CommonArgs {
  std::string config_path;
  // dotted-key overrides applied on top of the config file
  std::optional<std::string> dataset_name;
  std::optional<std::string> dataset_dir;
  std::optional<std::string> dataset_augment;
  std::optional<std::string> cascade_stages;
  std::optional<int> cascade_layers;
  std::optional<int> cascade_width;
  std::optional<int> cascade_heads;
  std::optional<int> cascade_mlp_ratio;
  std::optional<int> cascade_context_width;
  std::optional<bool> cascade_feature_reuse;
  std::optional<bool> cascade_relationship_reuse;
  std::optional<int> train_epochs;
  std::optional<int> train_batch;
  std::optional<double> train_lr;
  std::optional<double> train_val_fraction;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> solve_method;
  std::optional<double> solve_grid_resolution;
  std::optional<std::uint64_t> ga_seed;
  std::optional<int> ga_population;
  std::optional<int> ga_generations;
};

void add_common_flags(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON run configuration file");
  cmd->add_option("--dataset.name", args.dataset_name, "mnist | cifar10");
  cmd->add_option("--dataset.dir", args.dataset_dir,
                  "dataset directory (default $DVT_DATA_DIR/<name>)");
  cmd->add_option("--dataset.augment", args.dataset_augment, "none | crop-flip");
  cmd->add_option("--cascade.stages", args.cascade_stages,
                  "token grids, e.g. 2x2:14,4x4:7");
  cmd->add_option("--cascade.layers", args.cascade_layers);
  cmd->add_option("--cascade.width", args.cascade_width);
  cmd->add_option("--cascade.heads", args.cascade_heads);
  cmd->add_option("--cascade.mlp-ratio", args.cascade_mlp_ratio);
  cmd->add_option("--cascade.context-width", args.cascade_context_width);
  cmd->add_option("--cascade.feature-reuse", args.cascade_feature_reuse);
  cmd->add_option("--cascade.relationship-reuse",
                  args.cascade_relationship_reuse);
  cmd->add_option("--train.epochs", args.train_epochs);
  cmd->add_option("--train.batch", args.train_batch);
  cmd->add_option("--train.lr", args.train_lr);
  cmd->add_option("--train.val-fraction", args.train_val_fraction);
  cmd->add_option("--train.seed", args.train_seed);
  cmd->add_option("--solve.method", args.solve_method, "grid | ga");
  cmd->add_option("--solve.grid-resolution", args.solve_grid_resolution);
  cmd->add_option("--solve.ga.seed", args.ga_seed);
  cmd->add_option("--solve.ga.population", args.ga_population);
  cmd->add_option("--solve.ga.generations", args.ga_generations);
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = load_run_config(args.config_path);
  if (args.dataset_name) cfg.dataset.name = *args.dataset_name;
  if (args.dataset_dir) cfg.dataset.dir = *args.dataset_dir;
  if (args.dataset_augment) cfg.dataset.augment = *args.dataset_augment;
  if (args.cascade_stages) cfg.cascade.stages = parse_stage_list(*args.cascade_stages);
  if (args.cascade_layers) cfg.cascade.layers = *args.cascade_layers;
  if (args.cascade_width) cfg.cascade.width = *args.cascade_width;
  if (args.cascade_heads) cfg.cascade.heads = *args.cascade_heads;
  if (args.cascade_mlp_ratio) cfg.cascade.mlp_ratio = *args.cascade_mlp_ratio;
  if (args.cascade_context_width) {
    cfg.cascade.context_width = *args.cascade_context_width;
  }
  if (args.cascade_feature_reuse) {
    cfg.cascade.feature_reuse = *args.cascade_feature_reuse;
  }
  if (args.cascade_relationship_reuse) {
    cfg.cascade.relationship_reuse = *args.cascade_relationship_reuse;
  }
  if (args.train_epochs) cfg.train.epochs = *args.train_epochs;
  if (args.train_batch) cfg.train.batch = *args.train_batch;
  if (args.train_lr) cfg.train.lr = *args.train_lr;
  if (args.train_val_fraction) cfg.train.val_fraction = *args.train_val_fraction;
  if (args.train_seed) cfg.train.seed = *args.train_seed;
  if (args.solve_method) cfg.solve.method = *args.solve_method;
  if (args.solve_grid_resolution) {
    cfg.solve.grid_resolution = *args.solve_grid_resolution;
  }
  if (args.ga_seed) cfg.solve.ga.seed = *args.ga_seed;
  if (args.ga_population) cfg.solve.ga.population = *args.ga_population;
  if (args.ga_generations) cfg.solve.ga.generations = *args.ga_generations;
  return cfg;
}

// Splits off the validation tail used for threshold solving and reporting.
struct TrainValSplit {
  Tensor train_images, val_images;
  std::vector<int> train_labels, val_labels;
};

TrainValSplit split_dataset(const DatasetHandle& data, double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw UsageError("train.val_fraction must lie in [0,1)");
  }
  const int n = data.images.dim(0);
  const int n_val = static_cast<int>(n * val_fraction);
  const int n_train = n - n_val;
  if (n_train < 1) throw UsageError("empty training split");
  TrainValSplit split;
  std::vector<int> head(n_train), tail(n_val);
  for (int i = 0; i < n_train; ++i) head[i] = i;
  for (int i = 0; i < n_val; ++i) tail[i] = n_train + i;
  split.train_images = take_rows(data.images, head);
  split.val_images = n_val > 0 ? take_rows(data.images, tail) : Tensor();
  split.train_labels.assign(data.labels.begin(), data.labels.begin() + n_train);
  split.val_labels.assign(data.labels.begin() + n_train, data.labels.end());
  return split;
}

double resolve_budget(const RunConfig& cfg, const CascadeConfig& model_cfg) {
  if (cfg.solve.budget && cfg.solve.budget_fraction) {
    throw UsageError("give either solve.budget or solve.budget_fraction, not both");
  }
  if (cfg.solve.budget) return *cfg.solve.budget;
  if (cfg.solve.budget_fraction) {
    const double final_cost =
        cumulative_flops(model_cfg, model_cfg.num_exits() - 1);
    return *cfg.solve.budget_fraction * final_cost;
  }
  throw UsageError("solve.budget or solve.budget_fraction is required");
}

ExitTrace record_trace(const Cascade& model, const Tensor& images,
                       const std::vector<int>& labels, int batch) {
  ExitTrace trace;
  trace.num_exits = model.config.num_exits();
  trace.num_classes = model.config.classes;
  for (int e = 0; e < trace.num_exits; ++e) {
    trace.exit_flops.push_back(cumulative_flops(model.config, e));
  }
  trace.labels = labels;
  const int n = images.dim(0);
  trace.probs.reserve(static_cast<std::size_t>(n) * trace.num_exits *
                      trace.num_classes);
  for (int start = 0; start < n; start += batch) {
    const int len = std::min(batch, n - start);
    std::vector<int> idx(len);
    for (int i = 0; i < len; ++i) idx[i] = start + i;
    auto out = model.infer_all_exits(take_rows(images, idx));
    for (int i = 0; i < len; ++i) {
      for (int e = 0; e < trace.num_exits; ++e) {
        const double* row =
            out.probs[e].data().data() +
            static_cast<std::size_t>(i) * trace.num_classes;
        trace.probs.insert(trace.probs.end(), row, row + trace.num_classes);
      }
    }
  }
  trace.validate();
  return trace;
}

Cascade load_model(const std::string& path) {
  // Build the skeleton from the embedded config, then swap the loaded weights in.
  CascadeParams loaded;
  CheckpointInfo info = load_checkpoint(path, loaded);
  Cascade model(info.config, info.seed);
  model.params = std::move(loaded);
  return model;
}

void print_solution(const SolveResult& r) {
  std::printf("feasible %s accuracy %.6f mean_flops %.6g thresholds",
              r.feasible ? "yes" : "no", r.accuracy, r.mean_flops);
  if (r.thresholds.values.empty()) std::printf(" (none)");
  for (double t : r.thresholds.values) std::printf(" %.6f", t);
  std::printf("\n");
}

int cmd_train(const CommonArgs& args, const std::string& out_path) {
  RunConfig cfg = resolve_config(args);
  if (!cfg.train.seed) throw UsageError("train.seed is required");
  CascadeConfig model_cfg = cfg.build_cascade_config();
  DatasetHandle data =
      load_dataset(cfg.dataset.name, resolve_dataset_dir(cfg.dataset), "train");
  TrainValSplit split = split_dataset(data, cfg.train.val_fraction);

  Cascade model(model_cfg, *cfg.train.seed);
  std::printf("model parameters: %lld\n",
              static_cast<long long>(model.num_params()));
  TrainOptions opt;
  opt.epochs = cfg.train.epochs;
  opt.batch = cfg.train.batch;
  opt.lr = cfg.train.lr;
  opt.seed = *cfg.train.seed;
  if (cfg.dataset.augment != "none") {
    const std::string policy = cfg.dataset.augment;
    opt.augment = [policy](const Tensor& images, Rng& rng) {
      return augment_batch(images, policy, rng);
    };
  }
  train_loop(model, split.train_images, split.train_labels, split.val_images,
             split.val_labels, opt,
             [](const std::string& line) { std::printf("%s\n", line.c_str()); });
  save_checkpoint(out_path, model.config, model.params, *cfg.train.seed);
  std::printf("saved checkpoint %s\n", out_path.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& model_path,
             const std::string& split_name) {
  RunConfig cfg = resolve_config(args);
  Cascade model = load_model(model_path);
  DatasetHandle data = load_dataset(
      cfg.dataset.name, resolve_dataset_dir(cfg.dataset), split_name);
  std::vector<double> acc =
      evaluate_exit_accuracy(model, data.images, data.labels);
  for (std::size_t e = 0; e < acc.size(); ++e) {
    std::printf("exit %zu accuracy %.6f flops %.6g\n", e, acc[e],
                cumulative_flops(model.config, static_cast<int>(e)));
  }
  return 0;
}

int cmd_trace(const CommonArgs& args, const std::string& model_path,
              const std::string& split_name, const std::string& out_path) {
  RunConfig cfg = resolve_config(args);
  Cascade model = load_model(model_path);
  ExitTrace trace;
  if (split_name == "val") {
    DatasetHandle data = load_dataset(
        cfg.dataset.name, resolve_dataset_dir(cfg.dataset), "train");
    TrainValSplit split = split_dataset(data, cfg.train.val_fraction);
    if (split.val_labels.empty()) {
      throw UsageError("val split is empty; raise train.val_fraction");
    }
    trace = record_trace(model, split.val_images, split.val_labels, 256);
  } else {
    DatasetHandle data = load_dataset(
        cfg.dataset.name, resolve_dataset_dir(cfg.dataset), split_name);
    trace = record_trace(model, data.images, data.labels, 256);
  }
  save_trace(out_path, trace);
  std::printf("saved trace %s (%lld samples, %d exits)\n", out_path.c_str(),
              static_cast<long long>(trace.size()), trace.num_exits);
  return 0;
}

int cmd_solve(const CommonArgs& args, const std::string& trace_path,
              std::optional<double> budget_flag,
              std::optional<double> budget_fraction_flag) {
  RunConfig cfg = resolve_config(args);
  if (budget_flag) cfg.solve.budget = budget_flag;
  if (budget_fraction_flag) cfg.solve.budget_fraction = budget_fraction_flag;
  ExitTrace trace = load_trace(trace_path);

  double budget = 0.0;
  if (cfg.solve.budget && cfg.solve.budget_fraction) {
    throw UsageError("give either --budget or --budget-fraction, not both");
  } else if (cfg.solve.budget) {
    budget = *cfg.solve.budget;
  } else if (cfg.solve.budget_fraction) {
    budget = *cfg.solve.budget_fraction * trace.exit_flops.back();
  } else {
    throw UsageError("--budget or --budget-fraction is required");
  }

  SolveResult r;
  if (cfg.solve.method == "grid") {
    r = solve_grid(trace, budget, cfg.solve.grid_resolution);
  } else if (cfg.solve.method == "ga") {
    r = solve_ga(trace, budget, cfg.build_ga_options());
  } else {
    throw UsageError("solve.method must be 'grid' or 'ga'");
  }
  std::printf("budget %.6g\n", budget);
  print_solution(r);
  return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& trace_path,
              const std::vector<double>& fractions, const std::string& out_csv) {
  RunConfig cfg = resolve_config(args);
  ExitTrace trace = load_trace(trace_path);
  if (fractions.empty()) throw UsageError("at least one --budget-fraction");
  std::vector<double> budgets;
  for (double f : fractions) budgets.push_back(f * trace.exit_flops.back());
  SolveMethod method;
  if (cfg.solve.method == "grid") {
    method = SolveMethod::kGrid;
  } else if (cfg.solve.method == "ga") {
    method = SolveMethod::kGa;
  } else {
    throw UsageError("solve.method must be 'grid' or 'ga'");
  }
  GaOptions ga;
  if (method == SolveMethod::kGa) ga = cfg.build_ga_options();
  auto points =
      budget_sweep(trace, budgets, method, cfg.solve.grid_resolution, ga);
  write_sweep_csv(out_csv, points, trace.num_exits);
  for (const SweepPoint& p : points) {
    std::printf("budget %.6g accuracy %.6f mean_flops %.6g feasible %s\n",
                p.budget, p.result.accuracy, p.result.mean_flops,
                p.result.feasible ? "yes" : "no");
  }
  std::printf("saved sweep %s\n", out_csv.c_str());
  return 0;
}

int cmd_infer(const CommonArgs& args, const std::string& model_path,
              const std::string& split_name,
              const std::vector<double>& thresholds) {
  RunConfig cfg = resolve_config(args);
  Cascade model = load_model(model_path);
  DatasetHandle data = load_dataset(
      cfg.dataset.name, resolve_dataset_dir(cfg.dataset), split_name);
  const int n = data.images.dim(0);
  const int k = model.config.num_exits();
  std::vector<std::int64_t> exit_counts(k, 0);
  std::int64_t correct = 0;
  double flops_sum = 0.0;
  const int batch = 256;
  for (int start = 0; start < n; start += batch) {
    const int len = std::min(batch, n - start);
    std::vector<int> idx(len);
    for (int i = 0; i < len; ++i) idx[i] = start + i;
    auto res = model.infer_adaptive(take_rows(data.images, idx), thresholds);
    for (int i = 0; i < len; ++i) {
      exit_counts[res.exit_index[i]] += 1;
      if (res.label[i] == data.labels[start + i]) correct += 1;
      flops_sum += res.flops[i];
    }
  }
  std::printf("samples %d accuracy %.6f mean_flops %.6g\n", n,
              static_cast<double>(correct) / n, flops_sum / n);
  for (int e = 0; e < k; ++e) {
    std::printf("exit %d share %.4f\n", e,
                static_cast<double>(exit_counts[e]) / n);
  }
  return 0;
}

int cmd_flops(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  CascadeConfig model_cfg = cfg.build_cascade_config();
  for (int s = 0; s < model_cfg.num_exits(); ++s) {
    FlopsBreakdown fb = flops_estimate(model_cfg, s);
    std::printf(
        "stage %d total %.6g patch %.6g linear %.6g attention %.6g head %.6g "
        "feature %.6g relationship %.6g widening %.6g cumulative %.6g\n",
        s, fb.total(), fb.patch_proj, fb.encoder_linear, fb.encoder_attention,
        fb.head, fb.feature_mlp, fb.relationship_mlp, fb.mlp_widening,
        cumulative_flops(model_cfg, s));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-exit vision transformer cascade"};
  app.require_subcommand(1);

  CommonArgs args;

  auto* train = app.add_subcommand("train", "Train a cascade and save it");
  std::string train_out = "model.ckpt";
  add_common_flags(train, args);
  train->add_option("--out", train_out, "checkpoint output path");

  auto* eval = app.add_subcommand("eval", "Per-exit accuracy of a checkpoint");
  std::string eval_model, eval_split = "test";
  add_common_flags(eval, args);
  eval->add_option("--model", eval_model)->required();
  eval->add_option("--split", eval_split, "train | test | val");

  auto* trace = app.add_subcommand("trace", "Record per-exit probabilities");
  std::string trace_model, trace_split = "val", trace_out = "run.trace";
  add_common_flags(trace, args);
  trace->add_option("--model", trace_model)->required();
  trace->add_option("--split", trace_split, "train | test | val");
  trace->add_option("--out", trace_out);

  auto* solve = app.add_subcommand("solve", "Solve thresholds for a budget");
  std::string solve_trace;
  std::optional<double> solve_budget, solve_budget_fraction;
  add_common_flags(solve, args);
  solve->add_option("--trace", solve_trace)->required();
  solve->add_option("--budget", solve_budget, "mean per-image FLOPs budget");
  solve->add_option("--budget-fraction", solve_budget_fraction,
                    "budget as a fraction of the final exit's cost");

  auto* sweep = app.add_subcommand("sweep", "Solve across several budgets");
  std::string sweep_trace, sweep_out = "sweep.csv";
  std::vector<double> sweep_fractions;
  add_common_flags(sweep, args);
  sweep->add_option("--trace", sweep_trace)->required();
  sweep->add_option("--budget-fraction", sweep_fractions,
                    "fractions of the final exit's cost");
  sweep->add_option("--out", sweep_out);

  auto* infer = app.add_subcommand("infer", "Adaptive inference on a split");
  std::string infer_model, infer_split = "test";
  std::vector<double> infer_thresholds;
  add_common_flags(infer, args);
  infer->add_option("--model", infer_model)->required();
  infer->add_option("--split", infer_split);
  infer->add_option("--thresholds", infer_thresholds,
                    "confidence threshold per non-final exit");

  auto* flops = app.add_subcommand("flops", "Print the per-stage FLOPs model");
  add_common_flags(flops, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints the message or help text
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(args, train_out);
    if (eval->parsed()) return cmd_eval(args, eval_model, eval_split);
    if (trace->parsed()) return cmd_trace(args, trace_model, trace_split, trace_out);
    if (solve->parsed()) {
      return cmd_solve(args, solve_trace, solve_budget, solve_budget_fraction);
    }
    if (sweep->parsed()) return cmd_sweep(args, sweep_trace, sweep_fractions, sweep_out);
    if (infer->parsed()) return cmd_infer(args, infer_model, infer_split, infer_thresholds);
    if (flops->parsed()) return cmd_flops(args);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 1;
}
