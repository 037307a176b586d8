#pragma once

#include "mad/model.hpp"

#include <functional>
#include <span>
#include <vector>

namespace mad {

/// Adam settings for per-sample mask optimization. Adam's first-moment
/// coefficient plays the role of momentum.
struct MaskOptConfig {
  int iterations = 20;
  Real lr = 0.1;
  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.999;
  Real adam_eps = 1e-8;

  void validate() const;
};

struct MaskOptResult {
  MaskVector mask;                 // best iterate
  Real initial_loss = 0;           // loss at m = 1
  Real best_loss = 0;
  int best_iteration = 0;          // 0 means the all-ones start was never beaten
  std::vector<Real> loss_trace;    // loss at every iterate, including the start
  bool excluded = false;           // a non-finite loss aborted optimization
};

/// Objective evaluated at a mask: returns the loss and writes its gradient.
using MaskObjective = std::function<Real(std::span<const Real> mask, std::span<Real> grad)>;

/// Adam on `objective` from `start`, clamping to [0,1] after every step.
/// Coordinates with trainable[k] == 0 never move. Returns the lowest-loss iterate.
MaskOptResult minimize_mask(const MaskObjective& objective, std::vector<Real> start,
                            const std::vector<std::uint8_t>& trainable, const MaskOptConfig& cfg);

/// m* = argmin_m CE(f_{w*m}(x_adv), y), starting from all ones with bias
/// entries held at one. `x_adv` is [n, ...]; the loss is the mean over n.
MaskOptResult optimize_mask(const Network& net, const Tensor& x_adv, const std::vector<int>& y,
                            const MaskOptConfig& cfg);

/// Parameter variation that removes w*(1-m): dw = -w * (1 - m).
std::vector<Real> variation_from_mask(std::span<const Real> w, std::span<const Real> m);

}  // namespace mad
