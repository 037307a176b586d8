#pragma once

#include "mad/dataset.hpp"
#include "mad/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mad {

enum class AttackKind { fgsm, pgd, cw_inf };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);

/// l-infinity attack configuration. `epsilon` is the budget, pixels live in [0, 1].
struct AttackSpec {
  AttackKind kind = AttackKind::pgd;
  Real epsilon = 0.1;
  int steps = 7;
  Real step_size = 0.25 / 7;
  int restarts = 1;
  Real kappa = 0;
  bool random_start = true;

  void validate() const;
  /// Short label such as "PGD-30" or "FGSM".
  std::string label() const;

  static AttackSpec fgsm(Real epsilon);
  /// Multi-step attack with the 2.5*epsilon/steps step size.
  static AttackSpec pgd(Real epsilon, int steps, int restarts = 1);
  static AttackSpec cw(Real epsilon, int steps, Real kappa = 0);
};

/// Per-sample attack objective: cross-entropy for fgsm/pgd, clipped CW margin for cw_inf.
std::vector<Real> attack_objective(const Network& net, const Tensor& x, const std::vector<int>& y,
                                   AttackKind kind, Real kappa = 0);

Tensor fgsm(const Network& net, const Batch& batch, const AttackSpec& spec);
/// Projected sign-gradient ascent. Restart r of sample i starts from a point
/// drawn from the stream (seed, i, r); the restart with the largest final
/// objective wins per sample.
Tensor pgd(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed);
Tensor cw_inf(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed);

/// Dispatches on spec.kind.
Tensor attack(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed);

}  // namespace mad
