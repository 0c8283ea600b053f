#include <filesystem>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gepd/harness.hpp"
#include "gepd/nn/optim.hpp"

namespace py = pybind11;
using namespace gepd;
using namespace gepd::harness;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::vector<double> as_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw std::invalid_argument("expected a one-dimensional array");
  return {a.data(), a.data() + a.size()};
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict epochs_to_python(const EpochSet& e) {
  py::dict d;
  d["data"] = to_numpy(e.epochs);
  std::vector<int> labels = e.label_ints();
  std::vector<std::string> provenance;
  for (auto p : e.provenance) provenance.push_back(to_string(p));
  d["labels"] = labels;
  d["provenance"] = provenance;
  d["subjects"] = e.subjects;
  d["channels"] = e.layout.names;
  d["sampling_rate"] = e.sampling_rate;
  d["epoch_length_s"] = e.epoch_length_s;
  return d;
}

ExperimentConfig make_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides) {
  return path ? load_config(*path, overrides) : apply_overrides(ExperimentConfig{}, overrides);
}

RunOptions options(const std::optional<std::filesystem::path>& output_root, bool verbose) {
  RunOptions o;
  o.output_root = output_root;
  if (verbose) {
    o.log = [](const std::string& line) {
      py::gil_scoped_acquire gil;
      py::print(line);
    };
  }
  return o;
}

}  // namespace

PYBIND11_MODULE(_gepd, m) {
  m.doc() = "EEG Parkinson's disease pipeline: augmentation, channel pruning, quality scoring and classification";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  auto stage_error = py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
  py::register_exception<QualityGateError>(m, "QualityGateError", stage_error.ptr());

  m.def("kl", [](py::array_t<double> p, py::array_t<double> q) { return pruning::kl(as_vector(p), as_vector(q)); },
        py::arg("p"), py::arg("q"), "Kullback-Leibler divergence in bits.");
  m.def("js", [](py::array_t<double> p, py::array_t<double> q) { return pruning::js(as_vector(p), as_vector(q)); },
        py::arg("p"), py::arg("q"), "Jensen-Shannon divergence in bits, bounded by [0, 1].");
  m.def("cosine_lr", &nn::cosine_annealing_lr, py::arg("t"), py::arg("total"), py::arg("lr_start") = 1e-3,
        py::arg("lr_end") = 1e-4, "Cosine-annealed learning rate at step t of total.");
  m.def("stage_seed", &stage_seed, py::arg("master"), py::arg("stage"));

  m.def(
      "config",
      [](std::optional<std::filesystem::path> path, std::vector<std::string> overrides) {
        return to_python(to_json(make_config(path, overrides)));
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Resolved configuration as a nested dict of strings.");
  m.def(
      "format_config",
      [](std::optional<std::filesystem::path> path, std::vector<std::string> overrides) {
        return format_config(make_config(path, overrides));
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "synth",
      [](const std::filesystem::path& out_dir, std::uint64_t seed, std::optional<std::filesystem::path> config,
         std::vector<std::string> overrides, bool csv) {
        const auto cfg = make_config(config, overrides);
        return dataio::write_dataset(out_dir, "synthetic", dataio::synth_dataset(cfg.synth, seed), csv);
      },
      py::arg("out_dir"), py::arg("seed") = 0, py::arg("config") = py::none(),
      py::arg("overrides") = std::vector<std::string>{}, py::arg("csv") = false,
      "Writes a synthetic dataset from the [synth] section and returns the manifest path.");

  m.def(
      "preprocess",
      [](const std::filesystem::path& manifest, std::optional<std::filesystem::path> config,
         std::vector<std::string> overrides) {
        const auto cfg = make_config(config, overrides);
        dataio::LoadOptions opts;
        opts.target_rate_hz = cfg.preprocess.target_rate_hz;
        return epochs_to_python(dataio::preprocess(dataio::load_dataset(manifest, opts), cfg.preprocess));
      },
      py::arg("manifest"), py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Loads and preprocesses a dataset; returns a dict with a (N, C, T) array.");
  m.def(
      "load_epochs", [](const std::filesystem::path& path) { return epochs_to_python(load_epochs(path)); },
      py::arg("path"));

  m.def(
      "run_experiment",
      [](std::optional<std::filesystem::path> config, std::vector<std::string> overrides,
         std::optional<std::filesystem::path> output_root, bool verbose) {
        const auto cfg = make_config(config, overrides);
        ExperimentReport r;
        {
          py::gil_scoped_release release;
          r = run_experiment(cfg, options(output_root, verbose));
        }
        py::dict out = to_python(to_json(r));
        out["run_dir"] = r.run_dir.string();
        out["timings_s"] = r.timings_s;
        return out;
      },
      py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      py::arg("output_root") = py::none(), py::arg("verbose") = false,
      "Runs the full pipeline; returns the report body plus run_dir and timings.");
  m.def(
      "sweep_delta",
      [](std::optional<std::filesystem::path> config, std::vector<double> deltas, std::vector<std::string> overrides,
         std::optional<std::filesystem::path> output_root, bool verbose) {
        const auto cfg = make_config(config, overrides);
        SweepReport r;
        {
          py::gil_scoped_release release;
          r = sweep_delta(cfg, deltas, options(output_root, verbose));
        }
        py::dict out = to_python(to_json(r));
        out["run_dir"] = r.run_dir.string();
        return out;
      },
      py::arg("config") = py::none(), py::arg("deltas") = std::vector<double>{1.0, 1.7, 2.0, 3.0},
      py::arg("overrides") = std::vector<std::string>{}, py::arg("output_root") = py::none(),
      py::arg("verbose") = false, "Fusion-scale sweep; returns the report body plus run_dir.");
}
