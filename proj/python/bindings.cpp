#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cpmlho/csv.hpp"
#include "cpmlho/cutting_plane.hpp"
#include "cpmlho/data.hpp"
#include "cpmlho/errors.hpp"
#include "cpmlho/experiment.hpp"
#include "cpmlho/gradcheck_suite.hpp"

namespace py = pybind11;
using namespace cpmlho;
namespace ex = cpmlho::experiment;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data().begin());
  return t;
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::tuple dataset_arrays(const data::ImageDataset& d) {
  py::array_t<std::uint8_t> pixels({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.rows),
                                    static_cast<py::ssize_t>(d.cols)});
  std::copy(d.pixels.begin(), d.pixels.end(), pixels.mutable_data());
  py::array_t<std::uint8_t> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.size())});
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  return py::make_tuple(pixels, labels);
}

std::optional<std::filesystem::path> opt_path(const std::optional<std::string>& s) {
  if (!s) return std::nullopt;
  return std::filesystem::path(*s);
}

template <class F>
py::tuple captured(F&& body) {
  std::ostringstream log;
  int status = 0;
  {
    py::gil_scoped_release release;
    status = body(log);
  }
  return py::make_tuple(status, log.str());
}

}  // namespace

PYBIND11_MODULE(_cpmlho, m) {
  m.doc() = "Bilevel hyperparameter optimization with cutting-plane constrained inner training";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<TruncationError>(m, "TruncationError", base.ptr());
  py::register_exception<PairingError>(m, "PairingError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());

  m.def(
      "train",
      [](const std::string& config, std::optional<std::string> out, std::optional<std::uint64_t> seed) {
        return captured([&](std::ostream& log) {
          return ex::cmd_train(config, {opt_path(out), seed, std::nullopt, 0}, log);
        });
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      "Runs one training from a JSON config file. Returns (exit_status, log).");
  m.def(
      "baseline",
      [](const std::string& config, std::optional<std::string> out, std::optional<std::uint64_t> seed,
         std::optional<std::size_t> trials) {
        return captured(
            [&](std::ostream& log) { return ex::cmd_baseline(config, {opt_path(out), seed, trials, 0}, log); });
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(), py::arg("trials") = py::none());
  m.def(
      "sweep",
      [](const std::string& config, const std::string& param, const std::vector<double>& values,
         std::optional<std::string> out, std::optional<std::uint64_t> seed, std::size_t jobs) {
        return captured([&](std::ostream& log) {
          return ex::cmd_sweep(config, param, values, {opt_path(out), seed, std::nullopt, jobs}, log);
        });
      },
      py::arg("config"), py::arg("param"), py::arg("values"), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      py::arg("jobs") = 0);
  m.def(
      "gradcheck",
      [](std::uint64_t seed, const std::string& out) {
        return captured([&](std::ostream& log) { return ex::cmd_gradcheck(seed, out, log); });
      },
      py::arg("seed") = 0, py::arg("out") = ".");

  m.def(
      "gradcheck_report",
      [](std::uint64_t seed) {
        py::list rows;
        for (const auto& l : check::run_suite(seed).lines) {
          rows.append(py::dict(py::arg("check") = l.name, py::arg("kind") = l.kind,
                               py::arg("max_rel_error") = l.max_rel_error, py::arg("passed") = l.passed));
        }
        return rows;
      },
      py::arg("seed") = 0, "Every op and hypergradient check as a list of dicts.");

  m.def(
      "resolve_config", [](const std::string& text) { return ex::dump_config(ex::parse_config(text)); },
      py::arg("text"), "Parses a JSON config and returns it with every default filled in.");
  m.def(
      "sweepable_keys", [](const std::string& text) { return ex::sweepable_keys(ex::parse_config(text)); },
      py::arg("text"));

  m.def(
      "load_idx",
      [](const std::string& images, const std::string& labels) { return dataset_arrays(data::load_idx(images, labels)); },
      py::arg("images"), py::arg("labels"), "Returns (pixels [n, rows, cols] uint8, labels [n] uint8).");
  m.def(
      "make_synthetic",
      [](std::size_t count, std::size_t side, std::uint64_t seed) {
        return dataset_arrays(data::make_synthetic(count, side, seed));
      },
      py::arg("count"), py::arg("side") = 28, py::arg("seed") = 0);
  m.def(
      "sha256_hex", [](const py::bytes& b) {
        const std::string s = b;
        return data::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
      },
      py::arg("data"));

  m.def(
      "response_gap",
      [](const std::vector<std::tuple<F64, F64, F64>>& layers, const F64& lambda_raw) {
        std::vector<nn::HyperLayerParams> params;
        for (const auto& [w_e, w_h1, w_h2] : layers) {
          nn::HyperLayerParams p;
          p.w_e = to_tensor(w_e);
          p.w_h1 = to_tensor(w_h1);
          p.w_h2 = to_tensor(w_h2);
          p.bias = Tensor({p.w_e.dim(0)});
          params.push_back(std::move(p));
        }
        const cp::ResponseGap g = cp::response_gap(params, to_tensor(lambda_raw));
        py::list subs;
        for (const auto& s : g.subgradients) subs.append(py::make_tuple(to_array(s.w_e), to_array(s.w_h1), to_array(s.w_h2)));
        return py::make_tuple(g.value, subs);
      },
      py::arg("layers"), py::arg("lambda_raw"),
      "L1 gap between direct and hyper weights over (w_e, w_h1, w_h2) triples, with its subgradients.");

  m.def("format_number", &csv::format_number, py::arg("value"));
  m.def("parse_number", &csv::parse_number, py::arg("cell"));
}
