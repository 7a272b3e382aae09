#pragma once

#include <optional>
#include <string>

#include "dvt/cascade.hpp"
#include "dvt/solver.hpp"

namespace dvt {

// JSON run configuration. Every key is optional and falls back to the
// defaults below; unknown keys are rejected. Seeds have no default: train
// needs train.seed and GA solves need solve.ga.seed.
struct DatasetSection {
  std::string name = "mnist";  // mnist | cifar10
  std::string dir;             // empty: $DVT_DATA_DIR/<name>
  std::string augment = "none";  // none | crop-flip
};

struct CascadeSection {
  std::vector<TokenGridSpec> stages;  // empty: dataset-specific default
  int layers = 4;
  int width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int context_width = 16;
  bool feature_reuse = true;
  bool relationship_reuse = true;
};

struct TrainSection {
  int epochs = 3;
  int batch = 128;
  double lr = 1e-3;
  double val_fraction = 0.1;  // held-out tail of the training set
  std::optional<std::uint64_t> seed;
};

struct GaSection {
  int population = 50;
  int generations = 100;
  int tournament = 4;
  double mutation_std = 0.05;
  double crossover_prob = 0.9;
  int elitism = 2;
  std::optional<std::uint64_t> seed;
};

struct SolveSection {
  std::optional<double> budget;           // absolute FLOPs per image
  std::optional<double> budget_fraction;  // of the final exit's cost
  std::string method = "grid";            // grid | ga
  double grid_resolution = 0.01;
  GaSection ga;
};

struct RunConfig {
  DatasetSection dataset;
  CascadeSection cascade;
  TrainSection train;
  SolveSection solve;

  // Derives the model configuration; image dimensions and class count come
  // from the dataset name, stages default per dataset when unset.
  CascadeConfig build_cascade_config() const;
  GaOptions build_ga_options() const;  // requires solve.ga.seed
};

RunConfig parse_run_config_text(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Serialized model configuration embedded in checkpoints.
std::string cascade_config_to_json(const CascadeConfig& cfg);
CascadeConfig cascade_config_from_json(const std::string& text);

// Dataset directory resolution: explicit dir, else $DVT_DATA_DIR/<name>.
std::string resolve_dataset_dir(const DatasetSection& dataset);

// Compact stage syntax for CLI overrides: "2x2:14,4x4:7".
std::vector<TokenGridSpec> parse_stage_list(const std::string& text);

}  // namespace dvt
