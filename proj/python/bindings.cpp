#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "aatn/cli.hpp"
#include "aatn/config.hpp"
#include "aatn/sinkhorn.hpp"
#include "aatn/trainer.hpp"

namespace py = pybind11;
using namespace aatn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<std::size_t> shape_of(const Array& a) { return {a.shape(), a.shape() + a.ndim()}; }

std::span<const double> view(const Array& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

Array to_array(const Tensor<double>& t) {
  Array out(t.shape());
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<PredictionRecord> records(const std::vector<double>& confidence, const std::vector<std::int32_t>& predicted,
                                      const std::vector<std::int32_t>& labels) {
  if (confidence.size() != predicted.size() || predicted.size() != labels.size()) {
    throw DimensionError("confidence, predicted and labels must have the same length");
  }
  std::vector<PredictionRecord> out(labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {confidence[i], predicted[i], labels[i]};
  return out;
}

py::dict sinkhorn_py(const Array& cost, double epsilon, int max_iters, double tol) {
  if (cost.ndim() != 2) throw DimensionError("cost must be a 2-d array");
  const auto rows = static_cast<std::size_t>(cost.shape(0)), cols = static_cast<std::size_t>(cost.shape(1));
  const auto res = sinkhorn(view(cost), rows, cols, {epsilon, max_iters, tol});
  Array plan({rows, cols});
  std::copy(res.plan.begin(), res.plan.end(), plan.mutable_data());
  py::dict d;
  d["plan"] = plan;
  d["converged"] = res.converged;
  d["iterations"] = res.iterations;
  d["marginal_error"] = res.marginal_error;
  return d;
}

double mmd_py(const Array& x, const Array& y, double bandwidth) {
  if (x.ndim() != 2 || y.ndim() != 2 || x.shape(1) != y.shape(1)) {
    throw DimensionError("x and y must be 2-d arrays with the same number of columns");
  }
  return mmd_gaussian(view(x), x.shape(0), view(y), y.shape(0), x.shape(1), bandwidth);
}

Array attention_weights_py(const Array& q, const Array& k, std::optional<std::vector<std::vector<std::uint8_t>>> mask) {
  if (q.ndim() != 4) throw DimensionError("q must be [B, H, w, d]");
  const auto B = static_cast<std::size_t>(q.shape(0)), w = static_cast<std::size_t>(q.shape(2));
  TokenMask tm = TokenMask::all(B, w);
  if (mask) {
    if (mask->size() != B) throw DimensionError("mask needs one row per sample");
    std::vector<std::uint8_t> flat;
    for (const auto& row : *mask) {
      if (row.size() != w) throw DimensionError("mask rows must have q.shape[2] entries");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    tm = TokenMask(B, w, std::move(flat));
  }
  Tape<double> tape;
  auto qv = tape.constant(Tensor<double>(shape_of(q), std::vector<double>(q.data(), q.data() + q.size())));
  auto kv = tape.constant(Tensor<double>(shape_of(k), std::vector<double>(k.data(), k.data() + k.size())));
  return to_array(attention_weights(qv, kv, tm).value());
}

std::string train_py(const std::string& config_json, const std::optional<std::string>& checkpoint) {
  const auto config = parse_run_config(config_json);
  const auto splits = load_splits(config);
  std::optional<std::filesystem::path> path;
  if (checkpoint) path = *checkpoint;
  py::gil_scoped_release release;
  const auto result = fit(splits.train, splits.val, config.model, config.train, path);
  return run_report_json(result.report, config.data);
}

py::tuple run_cli_py(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = run_cli(args, out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Transformer encoder with query/key alignment losses";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("sinkhorn", &sinkhorn_py, py::arg("cost"), py::arg("epsilon") = 0.01, py::arg("max_iters") = 200,
        py::arg("tol") = 1e-6, "Entropic OT plan between uniform marginals.");
  m.def("mmd_gaussian", &mmd_py, py::arg("x"), py::arg("y"), py::arg("bandwidth") = 1.0,
        "Biased Gaussian-kernel MMD^2 between the rows of x and y.");
  m.def(
      "ece",
      [](const std::vector<double>& c, const std::vector<std::int32_t>& p, const std::vector<std::int32_t>& l,
         std::size_t n_bins) { return ece(records(c, p, l), n_bins); },
      py::arg("confidence"), py::arg("predicted"), py::arg("labels"), py::arg("n_bins") = 10);
  m.def(
      "accuracy",
      [](const std::vector<std::int32_t>& p, const std::vector<std::int32_t>& l) {
        return accuracy(records(std::vector<double>(p.size(), 1.0), p, l));
      },
      py::arg("predicted"), py::arg("labels"));
  m.def(
      "gen_pair_matching",
      [](std::uint64_t seed, std::size_t n, std::size_t width, std::size_t vocab) {
        const auto data = gen_pair_matching(seed, n, width, vocab);
        std::vector<std::vector<std::int32_t>> tokens;
        std::vector<std::int32_t> labels;
        for (const auto& ex : data) {
          tokens.push_back(ex.tokens);
          labels.push_back(ex.label);
        }
        return py::make_tuple(tokens, labels);
      },
      py::arg("seed"), py::arg("n"), py::arg("width") = 16, py::arg("vocab") = 64,
      "Returns (tokens, labels); label 1 iff some token repeats.");
  m.def("attention_weights", &attention_weights_py, py::arg("q"), py::arg("k"), py::arg("mask") = py::none(),
        "Masked softmax(q k^T / sqrt(d)) for q, k of shape [B, H, w, d].");
  m.def("train", &train_py, py::arg("config_json") = "{}", py::arg("checkpoint") = py::none(),
        "Trains from a JSON run config; returns the run report as JSON text.");
  m.def("run_cli", &run_cli_py, py::arg("args"), "Runs the command line tool; returns (exit_code, stdout, stderr).");
}
