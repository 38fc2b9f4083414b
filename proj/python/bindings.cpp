#include <optional>
#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rsmcert/config.hpp"
#include "rsmcert/error.hpp"
#include "rsmcert/experiment.hpp"
#include "rsmcert/learner.hpp"
#include "rsmcert/nn.hpp"
#include "rsmcert/ppo.hpp"
#include "rsmcert/system.hpp"
#include "rsmcert/verifier.hpp"

namespace py = pybind11;
using namespace rsmcert;

namespace {

void check_layer(const MlpNetwork& net, std::size_t i) {
  if (i >= net.num_layers()) throw py::index_error("layer index out of range");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Learner-verifier for reach-avoid certificates of neural network policies";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ResourceError>(m, "ResourceError", PyExc_MemoryError);

  py::enum_<Activation>(m, "Activation")
      .value("identity", Activation::identity)
      .value("relu", Activation::relu)
      .value("softplus", Activation::softplus);

  py::enum_<Outcome>(m, "Outcome")
      .value("stable", Outcome::stable)
      .value("unknown", Outcome::unknown)
      .value("precondition_failed", Outcome::precondition_failed);

  py::class_<IntervalBox>(m, "IntervalBox")
      .def(py::init([](Eigen::VectorXd lo, Eigen::VectorXd hi) {
             if (lo.size() != hi.size()) throw py::value_error("bound sizes differ");
             if ((lo.array() > hi.array()).any()) throw py::value_error("lower bound above upper bound");
             IntervalBox b;
             b.lower = std::move(lo);
             b.upper = std::move(hi);
             return b;
           }),
           py::arg("lower"), py::arg("upper"))
      .def_readonly("lower", &IntervalBox::lower)
      .def_readonly("upper", &IntervalBox::upper)
      .def("contains", py::overload_cast<const Eigen::VectorXd&, double>(&IntervalBox::contains, py::const_),
           py::arg("x"), py::arg("slack") = 0.0)
      .def("__repr__", [](const IntervalBox& b) {
        std::ostringstream s;
        s << "IntervalBox(" << b.lower.transpose() << " | " << b.upper.transpose() << ")";
        return s.str();
      });

  py::class_<MlpNetwork>(m, "MlpNetwork")
      .def(py::init<std::vector<int>, Activation>(), py::arg("layer_dims"),
           py::arg("output_activation") = Activation::identity)
      .def_static("random", &MlpNetwork::random, py::arg("layer_dims"), py::arg("output_activation"),
                  py::arg("seed"))
      .def_property_readonly("layer_dims", &MlpNetwork::layer_dims)
      .def_property_readonly("num_layers", &MlpNetwork::num_layers)
      .def_property_readonly("output_activation", &MlpNetwork::output_activation)
      .def("weight", [](const MlpNetwork& n, std::size_t i) { check_layer(n, i); return n.layer(i).weight; })
      .def("bias", [](const MlpNetwork& n, std::size_t i) { check_layer(n, i); return n.layer(i).bias; })
      .def("set_weight",
           [](MlpNetwork& n, std::size_t i, const Eigen::MatrixXd& w) {
             check_layer(n, i);
             if (w.rows() != n.layer(i).weight.rows() || w.cols() != n.layer(i).weight.cols())
               throw py::value_error("weight shape mismatch");
             n.layer(i).weight = w;
           })
      .def("set_bias",
           [](MlpNetwork& n, std::size_t i, const Eigen::VectorXd& b) {
             check_layer(n, i);
             if (b.size() != n.layer(i).bias.size()) throw py::value_error("bias shape mismatch");
             n.layer(i).bias = b;
           })
      .def("parameter_hash", &MlpNetwork::parameter_hash)
      .def("__call__", [](const MlpNetwork& n, const Eigen::VectorXd& x) { return forward(n, x); })
      .def("forward_batch", [](const MlpNetwork& n, const Eigen::MatrixXd& xs) { return forward_batch(n, xs); },
           "Columns are inputs.")
      .def("interval_forward", [](const MlpNetwork& n, const IntervalBox& b) { return interval_forward(n, b); })
      .def("to_bytes", [](const MlpNetwork& n) { return py::bytes(serialize_network(n)); })
      .def_static("from_bytes", [](const py::bytes& b) { return deserialize_network(std::string(b)); });

  m.def("lipschitz_constant", &lipschitz_constant, py::arg("net"));
  m.def("save_network", &save_network, py::arg("net"), py::arg("path"));
  m.def("load_network", &load_network, py::arg("path"));

  py::class_<SystemSpec>(m, "SystemSpec")
      .def(py::init([](IntervalBox x, IntervalBox xs, Eigen::MatrixXd a, Eigen::MatrixXd b, IntervalBox w,
                       std::optional<double> lf) {
             return SystemSpec::make(std::move(x), std::move(xs), std::move(a), std::move(b), std::move(w), lf);
           }),
           py::arg("state_space"), py::arg("safe_set"), py::arg("A"), py::arg("B"), py::arg("noise"),
           py::arg("lipschitz") = py::none())
      .def_readonly("state_space", &SystemSpec::state_space)
      .def_readonly("safe_set", &SystemSpec::safe_set)
      .def_property_readonly("A", [](const SystemSpec& s) { return s.dynamics.A; })
      .def_property_readonly("B", [](const SystemSpec& s) { return s.dynamics.B; })
      .def_property_readonly("noise", [](const SystemSpec& s) { return s.noise.support; })
      .def_property_readonly("lipschitz", [](const SystemSpec& s) { return s.dynamics.lipschitz; })
      .def_property_readonly("state_dim", &SystemSpec::state_dim)
      .def_property_readonly("action_dim", &SystemSpec::action_dim);

  m.def("default_benchmark", &default_benchmark);
  m.def("step", &step, py::arg("sys"), py::arg("policy"), py::arg("x"), py::arg("w"));
  m.def(
      "rollout",
      [](const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x0, int horizon,
         double exploration_std, std::uint64_t seed) {
        const Trajectory t = rollout(sys, policy, x0, horizon, exploration_std, seed);
        Eigen::MatrixXd states(sys.state_dim(), static_cast<Eigen::Index>(t.states.size()));
        for (std::size_t i = 0; i < t.states.size(); ++i) states.col(static_cast<Eigen::Index>(i)) = t.states[i];
        return py::make_tuple(states, t.rewards);
      },
      py::arg("sys"), py::arg("policy"), py::arg("x0"), py::arg("horizon"), py::arg("exploration_std") = 0.0,
      py::arg("seed") = 0, "Returns (states as columns, rewards).");

  py::class_<ClosednessResult>(m, "ClosednessResult")
      .def_readonly("closed", &ClosednessResult::closed)
      .def_readonly("source", &ClosednessResult::source)
      .def_readonly("witness", &ClosednessResult::witness);
  m.def("check_closed_under_dynamics", &check_closed_under_dynamics, py::arg("sys"), py::arg("policy"),
        py::arg("splits_per_axis") = 1);

  py::class_<Discretization>(m, "Discretization")
      .def_readonly("points", &Discretization::points)
      .def_readonly("mesh", &Discretization::mesh)
      .def("__len__", &Discretization::size);
  m.def("build_discretization", &build_discretization, py::arg("state_space"), py::arg("safe_set"), py::arg("tau"),
        py::arg("max_points") = 1'000'000);

  m.def("compute_K", py::overload_cast<double, double, double>(&compute_K), py::arg("lipschitz_f"),
        py::arg("lipschitz_policy"), py::arg("lipschitz_rsm"));
  m.def("bound_expectation_upper", &bound_expectation_upper, py::arg("sys"), py::arg("policy"), py::arg("rsm"),
        py::arg("x"), py::arg("cells_per_axis") = 8);

  py::class_<Counterexample>(m, "Counterexample")
      .def_readonly("index", &Counterexample::index)
      .def_readonly("point", &Counterexample::point)
      .def_readonly("expectation_bound", &Counterexample::expectation_bound)
      .def_readonly("value", &Counterexample::value)
      .def_readonly("margin", &Counterexample::margin);

  py::class_<VerifierReport>(m, "VerifierReport")
      .def_readonly("certified", &VerifierReport::certified)
      .def_readonly("K", &VerifierReport::K)
      .def_readonly("lipschitz_rsm", &VerifierReport::lipschitz_rsm)
      .def_readonly("lipschitz_policy", &VerifierReport::lipschitz_policy)
      .def_readonly("lipschitz_dynamics", &VerifierReport::lipschitz_dynamics)
      .def_readonly("tau", &VerifierReport::tau)
      .def_readonly("counterexamples", &VerifierReport::counterexamples)
      .def_readonly("checked_points", &VerifierReport::checked_points)
      .def("to_json", [](const VerifierReport& r) { return format_report(r); });

  m.def(
      "check_all",
      [](const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm, const Discretization& disc,
         int cells_per_axis, int threads) {
        py::gil_scoped_release release;
        return check_all(sys, policy, rsm, disc, VerifierOptions{cells_per_axis, threads});
      },
      py::arg("sys"), py::arg("policy"), py::arg("rsm"), py::arg("disc"), py::arg("cells_per_axis") = 8,
      py::arg("threads") = 0);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def("set", [](ExperimentConfig& c, const std::string& key, const std::string& value) {
        apply_setting(c, key, value);
        c.validate();
      })
      .def_readonly("system", &ExperimentConfig::system)
      .def_property_readonly("seeds", [](const ExperimentConfig& c) { return c.seeds; })
      .def("render", &render_config);
  m.def("parse_config", &parse_config, py::arg("text"));
  m.def("load_config", &load_config, py::arg("path"));

  m.def("exploration_std", [](int iter, const ExperimentConfig& c) { return exploration_std(iter, c.algorithm.ppo); },
        py::arg("iteration"), py::arg("config"));

  m.def(
      "pretrain_policy",
      [](const ExperimentConfig& c, std::uint64_t seed, std::optional<int> iterations) {
        AlgorithmConfig a = c.algorithm;
        if (iterations) a.ppo_iterations = *iterations;
        PretrainResult r;
        {
          py::gil_scoped_release release;
          r = pretrain_policy(c.system, a, seed);
        }
        return py::make_tuple(r.policy, training_curve_csv(r.log));
      },
      py::arg("config"), py::arg("seed"), py::arg("iterations") = py::none(),
      "Returns (policy, training curve CSV).");

  py::class_<RunVerdict>(m, "RunVerdict")
      .def_readonly("outcome", &RunVerdict::outcome)
      .def_readonly("iterations", &RunVerdict::iterations)
      .def_readonly("final_report", &RunVerdict::final_report)
      .def_readonly("seconds", &RunVerdict::seconds)
      .def_readonly("policy", &RunVerdict::policy)
      .def_readonly("rsm", &RunVerdict::rsm)
      .def_readonly("message", &RunVerdict::message);

  m.def(
      "learn_certificate",
      [](const ExperimentConfig& c, const MlpNetwork& policy, std::uint64_t seed, bool policy_trainable,
         std::optional<std::filesystem::path> run_dir) {
        LearnerConfig lc = c.algorithm.learner;
        lc.policy_trainable = policy_trainable;
        py::gil_scoped_release release;
        return learn_certificate(c.system, policy, lc, seed, run_dir);
      },
      py::arg("config"), py::arg("policy"), py::arg("seed") = 0, py::arg("policy_trainable") = false,
      py::arg("run_dir") = py::none());

  py::class_<VerifyResult>(m, "VerifyResult")
      .def_readonly("exit_code", &VerifyResult::exit_code)
      .def_readonly("closedness", &VerifyResult::closedness)
      .def_readonly("report", &VerifyResult::report)
      .def("to_json", [](const VerifyResult& r) { return format_verify_result(r); });

  m.def(
      "verify_only",
      [](const ExperimentConfig& c, const MlpNetwork& policy, const MlpNetwork& rsm) {
        py::gil_scoped_release release;
        return verify_only(c.system, policy, rsm, c.algorithm.learner);
      },
      py::arg("config"), py::arg("policy"), py::arg("rsm"));

  m.def("export_trajectories", &export_trajectories, py::arg("sys"), py::arg("policy"), py::arg("count"),
        py::arg("horizon"), py::arg("seed") = 0);
}
