#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dsqp/dgp.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/gibbs.hpp"
#include "dsqp/io.hpp"
#include "dsqp/panel.hpp"
#include "dsqp/posterior.hpp"
#include "dsqp/runner.hpp"
#include "dsqp/spatial.hpp"

namespace py = pybind11;
using namespace dsqp;

namespace {

// JSON crosses the boundary as text; the Python wrapper handles dicts.
nlohmann::json parse(const std::string& s) { return s.empty() ? nlohmann::json::object() : nlohmann::json::parse(s); }

PanelData make_panel(const Eigen::MatrixXd& y, const std::vector<Eigen::MatrixXd>& x, bool has_intercept) {
  PanelData d;
  d.y = y;
  d.x = x;
  d.has_intercept = has_intercept;
  d.validate();
  return d;
}

py::dict panel_dict(const PanelData& d) {
  py::dict out;
  out["y"] = d.y;
  out["x"] = d.x;
  out["has_intercept"] = d.has_intercept;
  out["unit_ids"] = d.unit_ids;
  out["time_ids"] = d.time_ids;
  out["covariate_names"] = d.covariate_names;
  return out;
}

py::dict sample(const Eigen::MatrixXd& y, const std::vector<Eigen::MatrixXd>& x, const SpatialWeights& w, double tau,
                const std::string& sampler_json, const std::string& prior_json, bool enable_is) {
  const PanelData data = make_panel(y, x, true);
  const GibbsEngine engine(data, w, PriorConfig::from_json(parse(prior_json)),
                           SamplerConfig::from_json(parse(sampler_json)));
  QuantileRun run;
  {
    py::gil_scoped_release release;
    run = run_quantile(engine, tau, enable_is);
  }
  py::dict means, sds;
  for (const auto& b : run.accumulator.layout().blocks()) {
    means[b.name.c_str()] = run.accumulator.block_mean(b.name);
    sds[b.name.c_str()] = run.accumulator.block_sd(b.name);
  }
  means["lambda_rotated"] = run.accumulator.rotated_mean(true);
  means["f_rotated"] = run.accumulator.rotated_mean(false);
  py::dict out;
  out["mean"] = means;
  out["sd"] = sds;
  out["factor_count"] = Eigen::VectorXd(run.accumulator.factor_count_distribution());
  out["diagnostics"] = diagnostics_document(run.accumulator, run.record).dump();
  if (run.record.has_is) {
    out["is_mean"] = run.record.is.mean;
    out["ess"] = run.record.is.weights.ess;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_dsqp, m) {
  m.doc() = "Dynamic spatial panel quantile sampler";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<SpatialWeights>(m, "SpatialWeights")
      .def(py::init([](const Eigen::MatrixXd& dense, bool row_normalized) {
             return bfs_blockalize(SpatialWeights::from_dense(dense, row_normalized));
           }),
           py::arg("dense"), py::arg("row_normalized") = false)
      .def_property_readonly("n", &SpatialWeights::n)
      .def_property_readonly("nnz", &SpatialWeights::nnz)
      .def_property_readonly("row_normalized", &SpatialWeights::row_normalized)
      .def_property_readonly("n_blocks", &SpatialWeights::n_blocks)
      .def_property_readonly("blocks", &SpatialWeights::blocks)
      .def("to_dense", &SpatialWeights::to_dense)
      .def("max_row_sum_deviation", &SpatialWeights::max_row_sum_deviation)
      .def("normalize_rows", [](const SpatialWeights& w) { return bfs_blockalize(normalize_rows(w)); });

  m.def("read_weights", [](const std::string& p) { return bfs_blockalize(read_weights(std::filesystem::path(p))); });
  m.def("write_weights", [](const SpatialWeights& w, const std::string& p) { write_weights(w, p); });
  m.def("clustered_weights", &clustered_weights, py::arg("n"), py::arg("min_size"), py::arg("max_size"),
        py::arg("neighbors"), py::arg("seed"));

  m.def(
      "check_stationarity",
      [](const Eigen::VectorXd& rho, const Eigen::VectorXd& delta, const Eigen::VectorXd& gamma,
         const SpatialWeights& w) {
        const auto r = check_stationarity(rho, delta, gamma, w);
        py::dict out;
        out["spectral_radius"] = r.spectral_radius;
        out["stationary"] = r.stationary;
        out["converged"] = r.converged;
        return out;
      },
      py::arg("rho"), py::arg("delta"), py::arg("gamma"), py::arg("w"));
  m.def("log_det", &log_det, py::arg("rho"), py::arg("w"));
  m.def("solve_system", &solve_system, py::arg("rho"), py::arg("w"), py::arg("rhs"));
  m.def("quantile_loss", py::overload_cast<const Eigen::MatrixXd&, const Eigen::MatrixXd&, double>(&quantile_loss),
        py::arg("y"), py::arg("q"), py::arg("tau"));

  m.def(
      "simulate",
      [](const std::string& config_json, const SpatialWeights& w) {
        const auto sim = simulate_dgp(dgp_config_from_json(parse(config_json)), w);
        py::dict out = panel_dict(sim.data);
        out["truth"] = sim.truth.to_json().dump();
        return out;
      },
      py::arg("config_json"), py::arg("w"));

  m.def(
      "ingest_panel",
      [](const std::string& path, const std::string& schema_json) {
        const auto j = parse(schema_json);
        PanelSchema s;
        s.unit = j.value("unit", s.unit);
        s.time = j.value("time", s.time);
        s.y = j.value("y", s.y);
        s.numeric = j.value("numeric", s.numeric);
        s.categorical = j.value("categorical", s.categorical);
        s.intercept = j.value("intercept", s.intercept);
        return panel_dict(ingest_panel(std::filesystem::path(path), s));
      },
      py::arg("path"), py::arg("schema_json") = "");

  m.def("sample", &sample, py::arg("y"), py::arg("x"), py::arg("w"), py::arg("tau"), py::arg("sampler_json") = "",
        py::arg("prior_json") = "", py::arg("enable_is") = false);

  m.def(
      "run",
      [](const std::string& config_json, const std::string& base_dir) {
        const RunConfig cfg = RunConfig::from_json(parse(config_json), base_dir);
        py::gil_scoped_release release;
        return run_all(cfg);
      },
      py::arg("config_json"), py::arg("base_dir") = "");
  m.def("load_config", [](const std::string& p) { return load_config_document(p).dump(); });
  m.def("tracked_values", [](int n, int t, int p1, int r) { return ParamLayout{n, t, p1, r}.tracked_values(); });
}
