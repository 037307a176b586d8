#pragma once

#include "mad/attack.hpp"
#include "mad/checkpoint.hpp"
#include "mad/dataset.hpp"
#include "mad/evaluate.hpp"
#include "mad/mask_opt.hpp"
#include "mad/model.hpp"
#include "mad/prune.hpp"
#include "mad/saliency.hpp"
#include "mad/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SaliencyMethod { mad, obd, obs, lwm, random, mad_reverse };

std::string to_string(SaliencyMethod m);
SaliencyMethod parse_saliency_method(const std::string& name);

struct DatasetSource {
  std::string kind = "synthetic10";  // or "idx_dir"
  std::filesystem::path dir;
  SyntheticOptions synthetic;
};

struct SaliencyConfig {
  SaliencyMethod method = SaliencyMethod::mad;
  std::size_t n_samples = 256;
  MaskOptConfig mask;
  AttackSpec attack = AttackSpec::pgd(0.1, 7);
  bool adversarial_fisher = true;  // obd/obs: Fisher on attacked inputs
  PruneScope scope = PruneScope::global;
};

struct ExperimentConfig {
  DatasetSource dataset;
  ArchId arch = ArchId::convnet4;
  TrainConfig train;
  SaliencyConfig saliency;
  Real prune_ratio = 90;  // percent
  TrainConfig finetune = default_finetune();
  std::vector<AttackSpec> eval_attacks = default_eval_attacks();
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  /// Skip training and start from this checkpoint.
  std::optional<std::filesystem::path> init_checkpoint;

  void validate() const;

  static TrainConfig default_finetune();
  static std::vector<AttackSpec> default_eval_attacks();
};

/// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const AttackSpec& spec);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
AttackSpec attack_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

DatasetSplits load_dataset(const DatasetSource& source, std::uint64_t seed);

/// Deterministic subset of `n` training samples for saliency estimation.
Dataset saliency_subset(const Dataset& train, std::size_t n, std::uint64_t seed);

/// Percent with one decimal.
Real percent(Real fraction);

nlohmann::json metrics_json(const Metrics& m);

// Individual stages; each is a pure function of its inputs and the seed.
TrainResult stage_train(const ExperimentConfig& cfg, const DatasetSplits& data);
SaliencyVector stage_saliency(const ExperimentConfig& cfg, const Network& net, const DatasetSplits& data);
PruneMask stage_prune(const ExperimentConfig& cfg, const SaliencyVector& s);
TrainResult stage_finetune(const ExperimentConfig& cfg, Network net, const DatasetSplits& data,
                           const std::vector<std::uint8_t>& keep);
Metrics stage_eval(const ExperimentConfig& cfg, const Network& net, const Dataset& test);

/// Stores the network in single precision and returns it as reloaded, so
/// later stages see exactly what the checkpoint holds.
Network round_trip(const Network& net);

struct ReportBundle {
  bool ok = false;
  std::string failed_stage;
  std::string error;
  nlohmann::json results;  // also written to results.json
  Metrics trained;
  Metrics final_metrics;
  std::size_t d_w = 0;
  std::size_t nonzero_weights = 0;
  std::size_t trained_nonzero = 0;
};

/// train -> saliency -> prune -> adversarial fine-tune -> evaluate, writing
/// model_{stage}.ckpt, saliency.csv, profile.csv, history.csv, results.json,
/// results.csv and config.json to cfg.out_dir.
ReportBundle run_experiment(const ExperimentConfig& cfg);

void write_results_csv(const ReportBundle& b, const std::filesystem::path& path);

}  // namespace mad
