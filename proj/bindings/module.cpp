#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "smelab/errors.hpp"
#include "smelab/ops.hpp"
#include "smelab/pipeline.hpp"
#include "smelab/synth_data.hpp"

namespace py = pybind11;
using namespace smelab;
using json = nlohmann::ordered_json;

namespace {

RunConfig config_of(const std::string& text) { return RunConfig::from_json(json::parse(text)); }

}  // namespace

PYBIND11_MODULE(_smelab, m) {
  m.doc() = "Sequential model editing with transformer patches";

  static py::exception<ConfigMismatch> config_mismatch(m, "ConfigMismatch", PyExc_RuntimeError);
  static py::exception<VersionMismatch> version_mismatch(m, "VersionMismatch", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const MissingInput& e) {
      PyErr_SetString(PyExc_FileNotFoundError, e.what());
    } catch (const ConfigMismatch& e) {
      config_mismatch(e.what());
    } catch (const VersionMismatch& e) {
      version_mismatch(e.what());
    } catch (const ParameterError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  // Configs and manifests cross the boundary as JSON text.
  m.def("default_config", [] { return RunConfig{}.to_json().dump(); });
  m.def("normalize_config", [](const std::string& cfg) {
    RunConfig c = config_of(cfg);
    c.validate();
    return c.to_json().dump();
  });
  m.def("config_hashes", [](const std::string& cfg) {
    RunConfig c = config_of(cfg);
    return py::dict(py::arg("data") = c.data_hash(), py::arg("model") = c.model_hash(), py::arg("run") = c.hash());
  });

  m.def(
      "gen", [](const std::string& cfg, const std::filesystem::path& out) { return cmd_gen(config_of(cfg), out).dump(); },
      py::arg("config"), py::arg("out"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "train",
      [](const std::string& cfg, const std::filesystem::path& data, const std::filesystem::path& out) {
        return cmd_train(config_of(cfg), data, out).dump();
      },
      py::arg("config"), py::arg("data"), py::arg("out"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "edit",
      [](const std::string& cfg, const std::filesystem::path& model, const std::filesystem::path& out) {
        return cmd_edit(config_of(cfg), model, out).dump();
      },
      py::arg("config"), py::arg("model"), py::arg("out"), py::call_guard<py::gil_scoped_release>());
  m.def("report", &cmd_report, py::arg("edit_dirs"), py::arg("out"));
  m.def(
      "replay",
      [](const std::filesystem::path& dir, std::size_t fold) {
        ReplayResult r = cmd_replay(dir, fold);
        return py::dict(py::arg("decisions") = r.decisions, py::arg("decision_mismatches") = r.decision_mismatches,
                        py::arg("predictions_checked") = r.predictions_checked,
                        py::arg("prediction_mismatches") = r.prediction_mismatches);
      },
      py::arg("edit_dir"), py::arg("fold"));

  m.def(
      "generate",
      [](const std::string& task, std::size_t n, std::uint64_t seed, double test_fraction) {
        RunConfig c;
        c.task = task;
        c.validate();
        const Dataset d = c.synth_kind() == SynthKind::kFactCheck ? gen_fact_check(n, seed, test_fraction)
                                                                  : gen_kv_qa(n, seed, test_fraction);
        return to_jsonl(d);
      },
      py::arg("task"), py::arg("n"), py::arg("seed") = 1, py::arg("test_fraction") = 0.0);

  m.def(
      "smooth_max",
      [](std::vector<double> values, std::size_t k) {
        if (values.empty() || k == 0) throw ParameterError("smooth_max: need values and k >= 1");
        Tape tape(GradMode::kDisabled);
        const std::size_t n = values.size();
        return topk_mean_exp(tape.constant(Tensor({n}, std::move(values))), k).item();
      },
      py::arg("values"), py::arg("k"));

  m.attr("__version__") = "0.1.0";
}
