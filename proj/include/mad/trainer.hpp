#pragma once

#include "mad/attack.hpp"
#include "mad/dataset.hpp"
#include "mad/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mad {

struct LrMilestone {
  int epoch;    // zero-based epoch from which the factor applies
  Real factor;
};

struct TrainConfig {
  int epochs = 20;
  Real lr = 0.01;
  Real momentum = 0.9;
  Real weight_decay = 2e-4;
  std::vector<LrMilestone> lr_milestones = {{10, 0.1}, {15, 0.1}};
  std::size_t batch_size = 128;
  AttackSpec attack = AttackSpec::pgd(0.1, 7);
  bool fast_mode = false;
  int early_stop_patience = 0;  // 0 disables stopping; the best epoch is still returned
  std::uint64_t seed = 0;

  void validate() const;
  /// Step schedule, right-continuous: milestone factors apply from their epoch on.
  Real lr_at(int epoch) const;
  /// Attack actually used for the inner maximization (FGSM-RS in fast mode).
  AttackSpec train_attack() const;
};

struct EpochRecord {
  int epoch = 0;
  Real lr = 0;
  Real clean_acc = 0;   // held-out split
  Real robust_acc = 0;  // held-out split, under the training attack
  Real loss = 0;        // mean adversarial training loss
};

struct TrainResult {
  Network net;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(int epoch, std::size_t step, const std::string& what)
      : std::runtime_error(what), epoch_(epoch), step_(step) {}
  int epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  int epoch_;
  std::size_t step_;
};

/// Adversarial training (inner attack, outer SGD). The last 10% of `data` by
/// index is held out for per-epoch evaluation and checkpoint selection.
/// With `prune_keep`, pruned weights receive no update and stay exactly zero.
TrainResult adv_train(Network net, const Dataset& data, const TrainConfig& cfg,
                      const std::vector<std::uint8_t>* prune_keep = nullptr);

/// Single-step FGSM from a random start with step 1.25*epsilon.
TrainResult fast_adv_train(Network net, const Dataset& data, const TrainConfig& cfg);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace mad
