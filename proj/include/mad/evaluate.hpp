#pragma once

#include "mad/attack.hpp"
#include "mad/dataset.hpp"
#include "mad/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mad {

struct AttackResult {
  std::string label;
  AttackSpec spec;
  Real accuracy = 0;  // fraction in [0, 1]
};

struct Metrics {
  Real clean_accuracy = 0;
  std::vector<AttackResult> robust;
  std::size_t n_samples = 0;

  const AttackResult* find(const std::string& label) const;
};

/// Fraction of samples classified correctly, optionally after attacking each
/// batch with `attack` (per-sample RNG streams derived from `seed`).
Real accuracy(const Network& net, const Dataset& data, const std::optional<AttackSpec>& attack,
              std::uint64_t seed, std::size_t batch_size = 250);

/// Clean accuracy plus robust accuracy under every attack in `attacks`.
Metrics evaluate(const Network& net, const Dataset& data, const std::vector<AttackSpec>& attacks,
                 std::uint64_t seed, std::size_t batch_size = 250);

std::vector<int> predict(const Network& net, const Tensor& x);

}  // namespace mad
