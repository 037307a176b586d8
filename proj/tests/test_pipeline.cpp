#include "mad/pipeline.hpp"

#include <doctest.h>

#include "oracles.hpp"

#include <fstream>
#include <sstream>

using namespace mad;

namespace {

ExperimentConfig tiny(const std::string& name) {
  ExperimentConfig c;
  c.dataset.synthetic.n_train = 400;
  c.dataset.synthetic.n_test = 100;
  c.arch = ArchId::mlp2;
  c.train.epochs = 2;
  c.train.lr_milestones.clear();
  c.train.attack = AttackSpec::pgd(0.1, 3);
  c.finetune = c.train;
  c.finetune.epochs = 1;
  c.saliency.n_samples = 4;
  c.saliency.mask.iterations = 3;
  c.eval_attacks = {AttackSpec::fgsm(0.1), AttackSpec::pgd(0.1, 5)};
  c.out_dir = std::filesystem::temp_directory_path() / ("mad_pipeline_" + name);
  std::filesystem::remove_all(c.out_dir);
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  const ExperimentConfig c = tiny("cfg");
  const nlohmann::json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);
  CHECK_THROWS_AS(config_from_json({{"prune_ratio", 100}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"saliency", {{"n_samples", 0}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"saliency", {{"method", "hydra"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"arch", "vgg16"}}), ConfigError);
  const ExperimentConfig d = config_from_json({{"eval_attacks", {{{"kind", "pgd"}, {"steps", 30}}}}});
  CHECK(d.eval_attacks.size() == 1);
  CHECK(d.eval_attacks[0].step_size == doctest::Approx(0.25 / 30));
  CHECK(d.saliency.n_samples == 256);
  CHECK(d.prune_ratio == 90);
}

TEST_CASE("p = 0 passes the trained model through") {
  ExperimentConfig c = tiny("p0");
  c.prune_ratio = 0;
  const ReportBundle b = run_experiment(c);
  REQUIRE(b.ok);
  const DatasetSplits data = load_dataset(c.dataset, c.seed);
  const Network net = stage_train(c, data).net;
  const Metrics m = stage_eval(c, net, data.test);
  CHECK(b.final_metrics.clean_accuracy == m.clean_accuracy);
  for (std::size_t k = 0; k < m.robust.size(); ++k) CHECK(b.final_metrics.robust[k].accuracy == m.robust[k].accuracy);
  CHECK(b.nonzero_weights == b.trained_nonzero);
  CHECK_FALSE(std::filesystem::exists(c.out_dir / "saliency.csv"));
}

TEST_CASE("pipeline writes every artifact, hits the sparsity target and is deterministic") {
  ExperimentConfig c = tiny("full");
  const ReportBundle a = run_experiment(c);
  REQUIRE(a.ok);
  for (const char* f : {"model_trained.ckpt", "model_pruned.ckpt", "model_finetuned.ckpt", "saliency.csv",
                        "profile.csv", "results.json", "results.csv", "history.csv", "config.json"}) {
    CHECK(std::filesystem::exists(c.out_dir / f));
  }
  CHECK(a.nonzero_weights == a.d_w - a.d_w * 9 / 10);
  const std::string first = slurp(c.out_dir / "results.json");
  const std::string first_ckpt = slurp(c.out_dir / "model_finetuned.ckpt");
  const ReportBundle b = run_experiment(c);
  REQUIRE(b.ok);
  CHECK(slurp(c.out_dir / "results.json") == first);
  CHECK(slurp(c.out_dir / "model_finetuned.ckpt") == first_ckpt);

  const Checkpoint ft = load_checkpoint(c.out_dir / "model_finetuned.ckpt");
  REQUIRE(ft.prune_keep);
  for (std::size_t w = 0; w < ft.prune_keep->size(); ++w)
    if (!(*ft.prune_keep)[w]) CHECK(ft.net.params()[ft.net.weight_flat_index(w)] == 0.0);
}

TEST_CASE("every saliency method runs through the pipeline") {
  for (auto m : {SaliencyMethod::obd, SaliencyMethod::obs, SaliencyMethod::lwm, SaliencyMethod::random,
                 SaliencyMethod::mad_reverse}) {
    ExperimentConfig c = tiny("m_" + to_string(m));
    c.saliency.method = m;
    c.train.epochs = 1;
    const ReportBundle b = run_experiment(c);
    CAPTURE(to_string(m));
    CHECK(b.ok);
    CHECK(b.results["saliency"]["method"] == to_string(m));
  }
}

TEST_CASE("failures are marked with the stage name") {
  ExperimentConfig c = tiny("fail");
  c.dataset.kind = "idx_dir";
  c.dataset.dir = "/nonexistent/mnist";
  const ReportBundle b = run_experiment(c);
  CHECK_FALSE(b.ok);
  CHECK(b.failed_stage == "dataset");
  const auto j = nlohmann::json::parse(slurp(c.out_dir / "results.json"));
  CHECK(j["status"] == "failed");
  CHECK(j["failed_stage"] == "dataset");
}

TEST_CASE("percentages carry one decimal") {
  CHECK(percent(0.51849) == doctest::Approx(51.8));
  CHECK(percent(0.4355) == doctest::Approx(43.6));
  CHECK(percent(1) == 100);
}

TEST_CASE("untrained network is at chance level") {
  SyntheticOptions o;
  o.n_train = 10;
  o.n_test = 1000;
  const Dataset test = make_synthetic10(o).test;
  std::vector<Real> acc;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, seed);
    const Metrics m = evaluate(net, test, {}, 0);
    CHECK(m.n_samples == 1000);
    acc.push_back(m.clean_accuracy);
  }
  CHECK(std::abs(oracle::median(acc) - 0.1) <= 0.05);
}

TEST_CASE("a linear classifier learns synthetic10") {
  SyntheticOptions o;
  const DatasetSplits data = make_synthetic10(o);
  Network net(ArchId::mlp2, {1, 16, 16}, 10, 0, {FlattenSpec{}, FcSpec{256, 10}});
  TrainConfig c;
  c.epochs = 5;
  c.lr = 0.05;
  c.lr_milestones.clear();
  c.attack = AttackSpec::fgsm(1e-6);  // effectively clean training
  const Network trained = adv_train(net, data.train, c).net;
  const Real acc = accuracy(trained, data.test, std::nullopt, 0);
  MESSAGE("linear clean accuracy " << acc);
  CHECK(acc >= 0.95);
}

TEST_CASE("evaluation is deterministic and the stronger attack is not weaker") {
  ExperimentConfig c = tiny("eval");
  const DatasetSplits data = load_dataset(c.dataset, 0);
  const Network net = stage_train(c, data).net;
  const std::vector<AttackSpec> attacks{AttackSpec::pgd(0.1, 7), AttackSpec::pgd(0.1, 30), AttackSpec::cw(0.1, 30)};
  const Metrics a = evaluate(net, data.test, attacks, 3), b = evaluate(net, data.test, attacks, 3);
  CHECK(a.clean_accuracy == b.clean_accuracy);
  for (std::size_t k = 0; k < 3; ++k) CHECK(a.robust[k].accuracy == b.robust[k].accuracy);
  CHECK(a.robust[1].accuracy <= a.robust[0].accuracy + 0.01);
  CHECK(a.robust[2].accuracy <= a.clean_accuracy);
  CHECK(a.find("PGD-30") != nullptr);
}
