#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mapchange/config.hpp"
#include "mapchange/dataset.hpp"
#include "mapchange/driver.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/metrics.hpp"
#include "mapchange/optim.hpp"
#include "mapchange/train.hpp"

namespace py = pybind11;
using namespace mapchange;

namespace {

RunConfig config_from(const std::string& path, std::optional<uint64_t> seed) {
  RunConfig cfg = load_run_config(path);
  if (seed) {
    cfg.seed = *seed;
    cfg.finalize();
  }
  return cfg;
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["oa"] = r.oa;
  d["iou_change"] = r.iou_change;
  d["f1_change"] = r.f1_change;
  d["kappa"] = r.kappa;
  d["sek"] = r.sek;
  d["sek_degenerate"] = r.sek_degenerate;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semantic change detection core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "gen_dataset",
      [](const std::string& config, const std::string& out, std::optional<uint64_t> seed,
         int threads) {
        RunConfig cfg = config_from(config, seed);
        generate_dataset(cfg.gen, out, threads);
        return cfg.gen.n_train + cfg.gen.n_val + cfg.gen.n_test;
      },
      py::arg("config"), py::arg("out"), py::arg("seed") = py::none(), py::arg("threads") = 1,
      "Generate the synthetic dataset; returns the number of samples written.");

  m.def(
      "train",
      [](const std::string& config, const std::string& data, const std::string& out,
         const std::string& mode, const std::string& resume, std::optional<uint64_t> seed) {
        RunConfig cfg = config_from(config, seed);
        TrainRunSummary s = run_training(cfg, data, out, mode, resume);
        py::dict d;
        d["iterations"] = s.iterations;
        d["total_loss"] = s.last_loss.total;
        d["checkpoint"] = s.checkpoint;
        return d;
      },
      py::arg("config"), py::arg("data"), py::arg("out"), py::arg("mode") = "mapchange",
      py::arg("resume") = "", py::arg("seed") = py::none(),
      "Train from a config file; returns {iterations, total_loss, checkpoint}.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& data, const std::string& split,
         const std::string& mode, int threads) {
        return report_dict(run_evaluation(checkpoint, data, split, mode, threads));
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test", py::arg("mode") = "",
      py::arg("threads") = 1,
      "Evaluate a checkpoint on a dataset split; returns the metric report as a dict.");

  m.def("predict",
        [](const std::string& checkpoint, const std::string& t1, const std::string& t2,
           const std::string& map_path, const std::string& out_prefix) {
          run_prediction(checkpoint, t1, t2, map_path, out_prefix);
        },
        py::arg("checkpoint"), py::arg("t1"), py::arg("t2"), py::arg("map"),
        py::arg("out_prefix"),
        "Run inference on one PPM/PPM/PGM triplet; writes <prefix>.trans.pgm and "
        "<prefix>.prob.pgm.");

  m.def(
      "poly_lr",
      [](int iter, double base_lr, int total_iters, double power) {
        OptimConfig cfg;
        cfg.base_lr = base_lr;
        cfg.total_iters = total_iters;
        cfg.poly_power = power;
        return poly_lr(iter, cfg);
      },
      py::arg("iter"), py::arg("base_lr") = 0.03, py::arg("total_iters") = 1500,
      py::arg("power") = 0.9, "Polynomial learning-rate schedule.");

  m.def(
      "metric_report",
      [](const std::vector<std::vector<uint64_t>>& counts) {
        const int n = static_cast<int>(counts.size());
        ConfusionMatrix cm(n);
        for (int i = 0; i < n; ++i) {
          if (static_cast<int>(counts[i].size()) != n)
            throw ConfigError("confusion matrix rows must all have length " + std::to_string(n));
          for (int j = 0; j < n; ++j) cm.add(i, j, counts[i][j]);
        }
        return report_dict(compute_report(cm));
      },
      py::arg("counts"),
      "Metric report (OA, IoU, F1, kappa, SeK) from a square confusion-count matrix; "
      "rows are ground truth.");

  py::class_<TransitionScheme>(m, "TransitionScheme")
      .def(py::init<int>(), py::arg("num_classes"))
      .def_property_readonly("num_classes", &TransitionScheme::num_classes)
      .def_property_readonly("size", &TransitionScheme::size)
      .def("encode", &TransitionScheme::encode, py::arg("from_cls"), py::arg("to_cls"))
      .def("decode", &TransitionScheme::decode, py::arg("category"));
}
