#include "dvt/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dvt {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const std::string& section,
                 std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw UsageError("config: '" + section + "' must be an object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw UsageError("config: unknown key '" + item.key() + "' in '" +
                       section + "'");
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("config: bad value for '") + key + "'");
  }
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  T v;
  read_field(j, key, v);
  out = v;
}

TokenGridSpec parse_stage_object(const json& j, const std::string& where) {
  expect_keys(j, where, {"grid_h", "grid_w", "patch_px"});
  TokenGridSpec g;
  read_field(j, "grid_h", g.grid_h);
  read_field(j, "grid_w", g.grid_w);
  read_field(j, "patch_px", g.patch_px);
  if (g.grid_h < 1 || g.grid_w < 1 || g.patch_px < 1) {
    throw UsageError("config: " + where + " needs positive grid_h/grid_w/patch_px");
  }
  return g;
}

void parse_dataset(const json& j, DatasetSection& out) {
  expect_keys(j, "dataset", {"name", "dir", "augment"});
  read_field(j, "name", out.name);
  read_field(j, "dir", out.dir);
  read_field(j, "augment", out.augment);
  if (out.name != "mnist" && out.name != "cifar10") {
    throw UsageError("config: dataset.name must be 'mnist' or 'cifar10'");
  }
  if (out.augment != "none" && out.augment != "crop-flip") {
    throw UsageError("config: dataset.augment must be 'none' or 'crop-flip'");
  }
}

void parse_cascade(const json& j, CascadeSection& out) {
  expect_keys(j, "cascade",
              {"stages", "layers", "width", "heads", "mlp_ratio",
               "context_width", "feature_reuse", "relationship_reuse"});
  if (j.contains("stages")) {
    const json& st = j.at("stages");
    if (!st.is_array() || st.empty()) {
      throw UsageError("config: cascade.stages must be a non-empty array");
    }
    out.stages.clear();
    for (std::size_t i = 0; i < st.size(); ++i) {
      out.stages.push_back(
          parse_stage_object(st[i], "cascade.stages[" + std::to_string(i) + "]"));
    }
  }
  read_field(j, "layers", out.layers);
  read_field(j, "width", out.width);
  read_field(j, "heads", out.heads);
  read_field(j, "mlp_ratio", out.mlp_ratio);
  read_field(j, "context_width", out.context_width);
  read_field(j, "feature_reuse", out.feature_reuse);
  read_field(j, "relationship_reuse", out.relationship_reuse);
}

void parse_train(const json& j, TrainSection& out) {
  expect_keys(j, "train", {"epochs", "batch", "lr", "val_fraction", "seed"});
  read_field(j, "epochs", out.epochs);
  read_field(j, "batch", out.batch);
  read_field(j, "lr", out.lr);
  read_field(j, "val_fraction", out.val_fraction);
  read_optional(j, "seed", out.seed);
}

void parse_ga(const json& j, GaSection& out) {
  expect_keys(j, "solve.ga",
              {"population", "generations", "tournament", "mutation_std",
               "crossover_prob", "elitism", "seed"});
  read_field(j, "population", out.population);
  read_field(j, "generations", out.generations);
  read_field(j, "tournament", out.tournament);
  read_field(j, "mutation_std", out.mutation_std);
  read_field(j, "crossover_prob", out.crossover_prob);
  read_field(j, "elitism", out.elitism);
  read_optional(j, "seed", out.seed);
}

void parse_solve(const json& j, SolveSection& out) {
  expect_keys(j, "solve",
              {"budget", "budget_fraction", "method", "grid_resolution", "ga"});
  read_optional(j, "budget", out.budget);
  read_optional(j, "budget_fraction", out.budget_fraction);
  read_field(j, "method", out.method);
  read_field(j, "grid_resolution", out.grid_resolution);
  if (out.method != "grid" && out.method != "ga") {
    throw UsageError("config: solve.method must be 'grid' or 'ga'");
  }
  if (j.contains("ga")) parse_ga(j.at("ga"), out.ga);
}

struct DatasetDims {
  int classes, channels, height, width;
};

DatasetDims dims_for(const std::string& name) {
  if (name == "mnist") return {10, 1, 28, 28};
  if (name == "cifar10") return {10, 3, 32, 32};
  throw UsageError("unknown dataset '" + name + "'");
}

std::vector<TokenGridSpec> default_stages(const std::string& name) {
  if (name == "mnist") return {{2, 2, 14}, {4, 4, 7}};
  return {{4, 4, 8}, {8, 8, 4}};  // cifar10
}

}  // namespace

RunConfig parse_run_config_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: invalid JSON: ") + e.what());
  }
  expect_keys(j, "(root)", {"dataset", "cascade", "train", "solve"});
  RunConfig cfg;
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg.dataset);
  if (j.contains("cascade")) parse_cascade(j.at("cascade"), cfg.cascade);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("solve")) parse_solve(j.at("solve"), cfg.solve);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str());
}

CascadeConfig RunConfig::build_cascade_config() const {
  const DatasetDims dims = dims_for(dataset.name);
  CascadeConfig c;
  c.grids = cascade.stages.empty() ? default_stages(dataset.name) : cascade.stages;
  c.layers = cascade.layers;
  c.width = cascade.width;
  c.heads = cascade.heads;
  c.mlp_ratio = cascade.mlp_ratio;
  c.context_width = cascade.context_width;
  c.feature_reuse = cascade.feature_reuse;
  c.relationship_reuse = cascade.relationship_reuse;
  c.classes = dims.classes;
  c.in_channels = dims.channels;
  c.image_h = dims.height;
  c.image_w = dims.width;
  c.validate();
  return c;
}

GaOptions RunConfig::build_ga_options() const {
  if (!solve.ga.seed.has_value()) {
    throw UsageError("solve.ga.seed is required for the ga method");
  }
  GaOptions o;
  o.population = solve.ga.population;
  o.generations = solve.ga.generations;
  o.tournament = solve.ga.tournament;
  o.mutation_std = solve.ga.mutation_std;
  o.crossover_prob = solve.ga.crossover_prob;
  o.elitism = solve.ga.elitism;
  o.seed = *solve.ga.seed;
  return o;
}

std::string cascade_config_to_json(const CascadeConfig& cfg) {
  json stages = json::array();
  for (const TokenGridSpec& g : cfg.grids) {
    stages.push_back(
        {{"grid_h", g.grid_h}, {"grid_w", g.grid_w}, {"patch_px", g.patch_px}});
  }
  json j = {{"stages", stages},
            {"layers", cfg.layers},
            {"width", cfg.width},
            {"heads", cfg.heads},
            {"mlp_ratio", cfg.mlp_ratio},
            {"context_width", cfg.context_width},
            {"feature_hidden", cfg.feature_hidden},
            {"feature_reuse", cfg.feature_reuse},
            {"relationship_reuse", cfg.relationship_reuse},
            {"classes", cfg.classes},
            {"in_channels", cfg.in_channels},
            {"image_h", cfg.image_h},
            {"image_w", cfg.image_w}};
  return j.dump();
}

CascadeConfig cascade_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: invalid JSON: ") + e.what());
  }
  expect_keys(j, "model config",
              {"stages", "layers", "width", "heads", "mlp_ratio",
               "context_width", "feature_hidden", "feature_reuse",
               "relationship_reuse", "classes", "in_channels", "image_h",
               "image_w"});
  CascadeConfig c;
  if (!j.contains("stages")) throw DataError("model config: missing stages");
  c.grids.clear();
  for (std::size_t i = 0; i < j.at("stages").size(); ++i) {
    c.grids.push_back(parse_stage_object(j.at("stages")[i],
                                         "stages[" + std::to_string(i) + "]"));
  }
  read_field(j, "layers", c.layers);
  read_field(j, "width", c.width);
  read_field(j, "heads", c.heads);
  read_field(j, "mlp_ratio", c.mlp_ratio);
  read_field(j, "context_width", c.context_width);
  read_field(j, "feature_hidden", c.feature_hidden);
  read_field(j, "feature_reuse", c.feature_reuse);
  read_field(j, "relationship_reuse", c.relationship_reuse);
  read_field(j, "classes", c.classes);
  read_field(j, "in_channels", c.in_channels);
  read_field(j, "image_h", c.image_h);
  read_field(j, "image_w", c.image_w);
  c.validate();
  return c;
}

std::string resolve_dataset_dir(const DatasetSection& dataset) {
  if (!dataset.dir.empty()) return dataset.dir;
  const char* env = std::getenv("DVT_DATA_DIR");
  if (env == nullptr || *env == '\0') {
    throw UsageError(
        "dataset.dir not set and DVT_DATA_DIR is undefined; point one of them "
        "at the dataset directory");
  }
  return std::string(env) + "/" + dataset.name;
}

std::vector<TokenGridSpec> parse_stage_list(const std::string& text) {
  std::vector<TokenGridSpec> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    TokenGridSpec g;
    char x = 0, colon = 0;
    std::istringstream is(item);
    if (!(is >> g.grid_h >> x >> g.grid_w >> colon >> g.patch_px) || x != 'x' ||
        colon != ':' || g.grid_h < 1 || g.grid_w < 1 || g.patch_px < 1) {
      throw UsageError("bad stage syntax '" + item + "', expected HxW:P");
    }
    out.push_back(g);
  }
  if (out.empty()) throw UsageError("empty stage list");
  return out;
}

}  // namespace dvt
