#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "rsmcert/error.hpp"
#include "rsmcert/experiment.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace rsmcert;
using test::square;

namespace {

// Contraction system with small networks; every stage finishes in seconds.
const char* kTinyConfig = R"(
system.state_space = [[-1.0, 1.0], [-1.0, 1.0]]
system.safe_set = [[-0.2, 0.2], [-0.2, 0.2]]
system.A = [[0.5, 0.0], [0.0, 0.5]]
system.B = [[0.1, 0.0], [0.0, 0.1]]
system.noise = [[-0.01, 0.01], [-0.01, 0.01]]
verifier.tau = 0.05
verifier.closedness_splits = 4
verifier.threads = 1
learner.samples_per_point = 8
learner.pretrain_epochs = 40
learner.epochs_per_call = 10
learner.max_loop_iters = 5
learner.minibatch_size = 64
network.policy_hidden = [8]
network.value_hidden = [8]
network.rsm_hidden = [16, 16]
network.rsm_learning_rate = 0.005
ppo.episodes_per_iter = 2
ppo.horizon = 10
ppo.policy_epochs_first = 2
ppo.policy_epochs = 1
ppo.value_epochs_first = 1
ppo.value_epochs = 1
experiment.ppo_iterations = [50]
experiment.modes = ["fixed"]
experiment.seeds = [0, 1, 2]
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rsmcert_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("run_matrix: a 1 x 1 x 3 grid gives three records, a summary and resumes without work") {
  const ExperimentConfig cfg = parse_config(kTinyConfig);
  const fs::path root = fresh_dir("matrix");
  const MatrixResult first = run_matrix(cfg, root);
  REQUIRE(first.records.size() == 3);
  CHECK(first.executed == 3);
  int stable = 0;
  for (const auto& r : first.records) {
    CHECK(r.ppo_iters == 50);
    CHECK(r.mode == PolicyMode::fixed);
    CHECK(r.policy_hash_constant);
    CHECK(fs::exists(r.policy_checkpoint));
    CHECK(fs::exists(r.rsm_checkpoint));
    if (r.verdict == Outcome::stable) ++stable;
  }
  CHECK(first.summary.find(std::to_string(stable) + "/3") != std::string::npos);
  CHECK(slurp(root / "summary.txt") == first.summary);

  const MatrixResult again = run_matrix(cfg, root);
  CHECK(again.executed == 0);
  REQUIRE(again.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(record_to_json(again.records[i]) == record_to_json(first.records[i]));

  // Stable verdicts re-verify from the saved checkpoints.
  for (const auto& r : first.records)
    if (r.verdict == Outcome::stable)
      CHECK(verify_only(cfg.system, load_network(r.policy_checkpoint), load_network(r.rsm_checkpoint),
                        cfg.algorithm.learner)
                .exit_code == 0);

  ExperimentConfig other = cfg;
  other.algorithm.learner.tau = 0.1;
  CHECK_THROWS_AS(run_matrix(other, root), ConfigError);
  fs::remove_all(root);
}

TEST_CASE("run_matrix: an empty seed list is a configuration error") {
  ExperimentConfig cfg = parse_config(kTinyConfig);
  cfg.seeds.clear();
  CHECK_THROWS_AS(run_matrix(cfg, fresh_dir("empty")), ConfigError);
}

TEST_CASE("summary_table counts stable records per cell") {
  ExperimentConfig cfg;
  cfg.ppo_iteration_grid = {0, 50};
  std::vector<RunRecord> records(4);
  records[0].ppo_iters = 0;
  records[1].ppo_iters = 50;
  records[1].verdict = Outcome::stable;
  records[2].ppo_iters = 50;
  records[3].ppo_iters = 50;
  records[3].mode = PolicyMode::learnable;
  const std::string s = summary_table(records, cfg);
  CHECK(s.find("0/1") != std::string::npos);
  CHECK(s.find("1/2") != std::string::npos);
  CHECK(s.find("0/0") != std::string::npos);  // learnable at 0 iterations: no records
}

TEST_CASE("RunRecord JSON round trip") {
  RunRecord r;
  r.ppo_iters = 20;
  r.mode = PolicyMode::learnable;
  r.seed = 7;
  r.verdict = Outcome::precondition_failed;
  r.loop_iterations = 3;
  r.seconds = 1.5;
  r.run_dir = "a/b";
  r.policy_checkpoint = "a/b/policy.net";
  r.rsm_checkpoint = "a/b/rsm.net";
  r.initial_policy_hash = 0xffffffffffffffffULL;
  r.final_policy_hash = 12;
  r.policy_hash_constant = false;
  r.message = "x";
  CHECK(record_to_json(record_from_json(record_to_json(r))) == record_to_json(r));
  CHECK(cell_name(20, PolicyMode::learnable, 7) == "ppo20_learnable_seed7");
}

TEST_CASE("export_trajectories: shape, determinism and certified contraction") {
  const SystemSpec sys = test::contraction_system();
  const MlpNetwork pi = test::zero_policy(2, 2);
  const std::string one = export_trajectories(sys, pi, 1, 0, 3);
  std::istringstream lines(one);
  std::string header, row, extra;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header == "trajectory,t,x0,x1,terminal");
  CHECK(row.rfind("0,0,", 0) == 0);
  CHECK(row.back() == '1');
  CHECK_FALSE(std::getline(lines, extra));

  const std::string a = export_trajectories(sys, pi, 20, 200, 9);
  CHECK(a == export_trajectories(sys, pi, 20, 200, 9));
  CHECK(a != export_trajectories(sys, pi, 20, 200, 10));

  // The contraction instance is certified (see the verifier tests): every terminal state lies in X_s.
  std::istringstream in(a);
  std::getline(in, header);
  int terminals = 0;
  while (std::getline(in, row)) {
    std::vector<double> v;
    std::stringstream ss(row);
    for (std::string cell; std::getline(ss, cell, ',');) v.push_back(std::stod(cell));
    if (v[4] == 1.0) {
      ++terminals;
      CHECK(sys.safe_set.contains(Eigen::Vector2d(v[2], v[3])));
    }
  }
  CHECK(terminals == 20);
  CHECK(plot_script("t.csv").find("t.csv") != std::string::npos);
}

TEST_CASE("verify_only: exit codes 0, 1 and 2") {
  const LearnerConfig cfg = [] {
    LearnerConfig c;
    c.tau = 0.025;
    c.threads = 1;
    c.closedness_splits = 1;
    return c;
  }();
  const MlpNetwork V = test::l1_norm_network(2);
  const VerifyResult ok = verify_only(test::contraction_system(), test::zero_policy(2, 2), V, cfg);
  CHECK(ok.exit_code == 0);
  CHECK(ok.report.certified);

  const VerifyResult open = verify_only(test::contraction_system(1.0), test::zero_policy(2, 2), V, cfg);
  CHECK(open.exit_code == 2);
  CHECK_FALSE(open.report.counterexamples.empty());
  CHECK(format_verify_result(open).find("\"exit_code\": 2") != std::string::npos);

  // Default benchmark: a dead-beat linear policy u = -A x keeps X_s closed, but a random
  // certificate does not satisfy the decrease condition.
  LearnerConfig bench = cfg;
  bench.tau = 0.05;
  bench.closedness_splits = 16;
  const SystemSpec sys = default_benchmark();
  const MlpNetwork deadbeat = test::linear_policy_network(-sys.dynamics.A);
  const VerifyResult random_rsm =
      verify_only(sys, deadbeat, MlpNetwork::random({2, 16, 16, 1}, Activation::softplus, 1), bench);
  CHECK(random_rsm.closedness.closed);
  CHECK(random_rsm.exit_code == 1);

  // A random untrained pair already fails the closedness precondition there.
  const VerifyResult random_pair = verify_only(sys, MlpNetwork::random({2, 16, 16, 2}, Activation::identity, 2),
                                               MlpNetwork::random({2, 16, 16, 1}, Activation::softplus, 1), bench);
  CHECK(random_pair.exit_code == 2);
}
