#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "crosskd/checkpoint.hpp"
#include "crosskd/cli.hpp"
#include "crosskd/config.hpp"
#include "crosskd/data.hpp"
#include "crosskd/errors.hpp"
#include "crosskd/grad_suite.hpp"
#include "crosskd/metrics.hpp"
#include "crosskd/projectors.hpp"

namespace py = pybind11;
using namespace crosskd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  const auto& shape = t.shape();
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  Array out(dims);
  const auto v = t.values();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::object parse_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_crosskd, m) {
  m.doc() = "Cross-architecture distillation core";

  auto& error = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<DataError>(m, "DataError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());
  py::register_exception<IoError>(m, "IoError", error.ptr());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command in-process; returns (exit_code, stdout, stderr).");

  m.def(
      "default_config", [] { return RunConfig{}.to_toml(); }, "Default run configuration as TOML text.");
  m.def(
      "resolve_config", [](const std::string& text) { return RunConfig::from_toml(text).to_toml(); },
      py::arg("toml"), "Parses, validates and re-serializes a configuration.");

  m.def(
      "synth_dataset",
      [](std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t size, const std::string& split) {
        const auto d = synth_dataset(seed, classes, per_class, size, size, split);
        Array images({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.channels),
                      static_cast<py::ssize_t>(d.height), static_cast<py::ssize_t>(d.width)});
        std::copy(d.pixels.begin(), d.pixels.end(), images.mutable_data());
        return py::make_tuple(images, d.labels);
      },
      py::arg("seed"), py::arg("classes") = 4, py::arg("per_class") = 10, py::arg("size") = 32,
      py::arg("split") = "train", "Procedural dataset; returns (images [n, 3, size, size], labels).");

  m.def(
      "attention",
      [](const Array& q, const Array& k, const Array& v, double d) {
        return to_array(attention(to_tensor(q), to_tensor(k), to_tensor(v), d));
      },
      py::arg("query"), py::arg("key"), py::arg("value"), py::arg("d"));

  m.def(
      "transferability",
      [](const Array& student, const Array& teacher, double fit_fraction) {
        return parse_json(transferability_from_features(to_tensor(student), to_tensor(teacher), fit_fraction).to_json());
      },
      py::arg("student"), py::arg("teacher"), py::arg("fit_fraction") = 0.8,
      "Aligned cosine similarity of two feature matrices.");

  m.def(
      "grad_suite",
      [](const std::vector<std::uint64_t>& seeds, double tol) {
        GradSuiteResult r;
        {
          py::gil_scoped_release release;
          r = run_grad_suite(seeds, tol);
        }
        py::dict out;
        out["passed"] = r.passed;
        out["worst"] = r.worst;
        out["checks"] = r.reports.size();
        out["seconds"] = r.seconds;
        return out;
      },
      py::arg("seeds") = std::vector<std::uint64_t>{0}, py::arg("tol") = 1e-4);

  m.def(
      "checkpoint_info",
      [](const std::string& path) {
        const auto ck = load_checkpoint(path);
        py::dict out;
        out["meta"] = parse_json(ck.meta);
        py::dict tensors;
        for (const auto& t : ck.tensors) tensors[py::str(t.name)] = t.shape;
        out["tensors"] = tensors;
        return out;
      },
      py::arg("path"), "Metadata and tensor shapes of a checkpoint file.");
}
