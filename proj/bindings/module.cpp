// Python bindings (dvt._core). Arrays cross the boundary as copies in both
// directions: float64 C-contiguous numpy in, fresh numpy out.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "dvt/cascade.hpp"
#include "dvt/data_io.hpp"
#include "dvt/run_config.hpp"
#include "dvt/solver.hpp"

namespace py = pybind11;
using namespace dvt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<int>(a.shape(i));
  }
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.data().data(),
              static_cast<std::size_t>(t.numel()) * sizeof(double));
  return out;
}

py::array_t<int> to_numpy_int(const std::vector<int>& v) {
  py::array_t<int> out(static_cast<py::ssize_t>(v.size()));
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(int));
  return out;
}

py::array_t<double> to_numpy_vec(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(double));
  return out;
}

TokenGridSpec grid_from_tuple(const std::tuple<int, int, int>& t) {
  return TokenGridSpec{std::get<0>(t), std::get<1>(t), std::get<2>(t)};
}

py::dict solve_result_to_dict(const SolveResult& r) {
  py::dict d;
  d["thresholds"] = r.thresholds.values;
  d["accuracy"] = r.accuracy;
  d["mean_flops"] = r.mean_flops;
  d["feasible"] = r.feasible;
  return d;
}

// Owns the optimizer state next to the model so train_step can be called
// repeatedly from python without threading AdamState through.
class Model {
 public:
  Model(const CascadeConfig& cfg, std::uint64_t seed)
      : model_(cfg, seed), seed_(seed) {}
  Model(Cascade model, std::uint64_t seed)
      : model_(std::move(model)), seed_(seed) {}

  double train_step(const Array& images, const std::vector<int>& labels,
                    double lr) {
    return model_.train_step(to_tensor(images), labels, adam_, lr);
  }

  py::tuple infer_all_exits(const Array& images) const {
    auto out = model_.infer_all_exits(to_tensor(images));
    py::list probs;
    for (const Tensor& p : out.probs) probs.append(to_numpy(p));
    return py::make_tuple(probs, out.flops);
  }

  py::dict infer_adaptive(const Array& images,
                          const std::vector<double>& thresholds) const {
    auto res = model_.infer_adaptive(to_tensor(images), thresholds);
    py::dict d;
    d["label"] = to_numpy_int(res.label);
    d["exit_index"] = to_numpy_int(res.exit_index);
    d["flops"] = to_numpy_vec(res.flops);
    d["mean_flops"] = res.mean_flops;
    return d;
  }

  std::int64_t num_params() { return model_.num_params(); }
  const CascadeConfig& config() const { return model_.config; }
  std::uint64_t seed() const { return seed_; }

  void save(const std::string& path) {
    save_checkpoint(path, model_.config, model_.params, seed_);
  }

  static Model load(const std::string& path) {
    CascadeParams loaded;
    CheckpointInfo info = load_checkpoint(path, loaded);
    Cascade model(info.config, info.seed);
    model.params = std::move(loaded);
    return Model(std::move(model), info.seed);
  }

 private:
  Cascade model_;
  AdamState adam_;
  std::uint64_t seed_ = 0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Early-exit vision transformer cascade";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError",
                                       PyExc_FloatingPointError);

  py::class_<CascadeConfig>(m, "CascadeConfig")
      .def(py::init<>())
      .def_property(
          "grids",
          [](const CascadeConfig& c) {
            std::vector<std::tuple<int, int, int>> out;
            for (const TokenGridSpec& g : c.grids) {
              out.emplace_back(g.grid_h, g.grid_w, g.patch_px);
            }
            return out;
          },
          [](CascadeConfig& c, const std::vector<std::tuple<int, int, int>>& v) {
            c.grids.clear();
            for (const auto& t : v) c.grids.push_back(grid_from_tuple(t));
          },
          "list of (grid_h, grid_w, patch_px) per exit")
      .def_readwrite("layers", &CascadeConfig::layers)
      .def_readwrite("width", &CascadeConfig::width)
      .def_readwrite("heads", &CascadeConfig::heads)
      .def_readwrite("mlp_ratio", &CascadeConfig::mlp_ratio)
      .def_readwrite("context_width", &CascadeConfig::context_width)
      .def_readwrite("feature_hidden", &CascadeConfig::feature_hidden)
      .def_readwrite("feature_reuse", &CascadeConfig::feature_reuse)
      .def_readwrite("relationship_reuse", &CascadeConfig::relationship_reuse)
      .def_readwrite("classes", &CascadeConfig::classes)
      .def_readwrite("in_channels", &CascadeConfig::in_channels)
      .def_readwrite("image_h", &CascadeConfig::image_h)
      .def_readwrite("image_w", &CascadeConfig::image_w)
      .def("num_exits", &CascadeConfig::num_exits)
      .def("validate", &CascadeConfig::validate)
      .def("to_json", &cascade_config_to_json);
  m.def("config_from_json", &cascade_config_from_json, py::arg("text"));

  py::class_<Model>(m, "Cascade")
      .def(py::init<const CascadeConfig&, std::uint64_t>(), py::arg("config"),
           py::arg("seed"))
      .def("train_step", &Model::train_step, py::arg("images"),
           py::arg("labels"), py::arg("lr") = 1e-3,
           "One Adam step on the summed per-exit cross-entropy; returns the loss")
      .def("infer_all_exits", &Model::infer_all_exits, py::arg("images"),
           "(per-exit probability arrays, per-exit cumulative flops)")
      .def("infer_adaptive", &Model::infer_adaptive, py::arg("images"),
           py::arg("thresholds"),
           "Early-exit inference; dict with label/exit_index/flops/mean_flops")
      .def("num_params", &Model::num_params)
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("seed", &Model::seed);
  m.def("load", &Model::load, py::arg("path"),
        "Load a checkpoint saved by Cascade.save or the CLI");

  m.def(
      "flops_estimate",
      [](const CascadeConfig& cfg, int stage) {
        FlopsBreakdown f = flops_estimate(cfg, stage);
        py::dict d;
        d["patch_proj"] = f.patch_proj;
        d["encoder_linear"] = f.encoder_linear;
        d["encoder_attention"] = f.encoder_attention;
        d["head"] = f.head;
        d["feature_mlp"] = f.feature_mlp;
        d["relationship_mlp"] = f.relationship_mlp;
        d["mlp_widening"] = f.mlp_widening;
        d["total"] = f.total();
        return d;
      },
      py::arg("config"), py::arg("stage"));
  m.def("cumulative_flops", &cumulative_flops, py::arg("config"),
        py::arg("exit_index"));

  // elementwise / structural ops
  m.def(
      "softmax",
      [](const Array& x, int axis) {
        Tensor t = to_tensor(x);
        if (axis < 0) axis += t.ndim();
        return to_numpy(softmax(t, axis));
      },
      py::arg("x"), py::arg("axis") = -1);
  m.def(
      "gelu", [](const Array& x) { return to_numpy(gelu(to_tensor(x))); },
      py::arg("x"));
  m.def(
      "layer_norm",
      [](const Array& x, const Array& gain, const Array& bias, double eps) {
        return to_numpy(layer_norm(to_tensor(x), to_tensor(gain),
                                   to_tensor(bias), eps));
      },
      py::arg("x"), py::arg("gain"), py::arg("bias"), py::arg("eps") = 1e-6);
  m.def(
      "cross_entropy",
      [](const Array& logits, const std::vector<int>& labels) {
        return cross_entropy(to_tensor(logits), labels).item();
      },
      py::arg("logits"), py::arg("labels"));
  m.def(
      "bilinear_upsample_grid",
      [](const Array& x, int out_h, int out_w) {
        return to_numpy(bilinear_upsample_grid(to_tensor(x), out_h, out_w));
      },
      py::arg("x"), py::arg("out_h"), py::arg("out_w"),
      "Corner-aligned bilinear resize of [h,w,c] or [b,h,w,c]");
  m.def(
      "attention_grid_upsample",
      [](const Array& x, const std::tuple<int, int, int>& up,
         const std::tuple<int, int, int>& down) {
        return to_numpy(attention_grid_upsample(to_tensor(x),
                                                grid_from_tuple(up),
                                                grid_from_tuple(down)));
      },
      py::arg("x"), py::arg("up"), py::arg("down"),
      "Token-pair map resize between grids; class entries pass through");

  py::class_<ExitTrace>(m, "ExitTrace")
      .def(py::init<>())
      .def_readwrite("num_exits", &ExitTrace::num_exits)
      .def_readwrite("num_classes", &ExitTrace::num_classes)
      .def_readwrite("exit_flops", &ExitTrace::exit_flops)
      .def_readwrite("labels", &ExitTrace::labels)
      .def_readwrite("probs", &ExitTrace::probs)
      .def("size", &ExitTrace::size)
      .def("validate", &ExitTrace::validate);
  m.def("save_trace", &save_trace, py::arg("path"), py::arg("trace"));
  m.def("load_trace", &load_trace, py::arg("path"));

  m.def(
      "evaluate_policy",
      [](const ExitTrace& t, const std::vector<double>& thresholds) {
        PolicyResult r = evaluate_policy(t, ThresholdVector{thresholds});
        return py::make_tuple(r.accuracy, r.mean_flops);
      },
      py::arg("trace"), py::arg("thresholds"),
      "(accuracy, mean_flops) of a confidence-threshold policy");
  m.def(
      "entropy_policy",
      [](const ExitTrace& t, const std::vector<double>& thresholds) {
        PolicyResult r = entropy_policy_evaluate(t, thresholds);
        return py::make_tuple(r.accuracy, r.mean_flops);
      },
      py::arg("trace"), py::arg("thresholds"));
  m.def(
      "solve_grid",
      [](const ExitTrace& t, double budget, double resolution) {
        return solve_result_to_dict(solve_grid(t, budget, resolution));
      },
      py::arg("trace"), py::arg("budget"), py::arg("resolution") = 0.01);
  m.def(
      "solve_ga",
      [](const ExitTrace& t, double budget, std::uint64_t seed, int population,
         int generations, int tournament, double mutation_std,
         double crossover_prob, int elitism) {
        GaOptions o;
        o.seed = seed;
        o.population = population;
        o.generations = generations;
        o.tournament = tournament;
        o.mutation_std = mutation_std;
        o.crossover_prob = crossover_prob;
        o.elitism = elitism;
        return solve_result_to_dict(solve_ga(t, budget, o));
      },
      py::arg("trace"), py::arg("budget"), py::arg("seed"),
      py::arg("population") = 50, py::arg("generations") = 100,
      py::arg("tournament") = 4, py::arg("mutation_std") = 0.05,
      py::arg("crossover_prob") = 0.9, py::arg("elitism") = 2);

  m.def(
      "load_dataset",
      [](const std::string& name, const std::string& dir,
         const std::string& split) {
        DatasetHandle d = load_dataset(name, dir, split);
        return py::make_tuple(to_numpy(d.images), to_numpy_int(d.labels));
      },
      py::arg("name"), py::arg("dir"), py::arg("split"),
      "(images [n,c,h,w] in [0,1], labels) for mnist or cifar10");

  m.attr("__version__") = "0.1.0";
}
