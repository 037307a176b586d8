#include "mad/attack.hpp"

#include "mad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mad {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw_inf: return "cw_inf";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "fgsm") return AttackKind::fgsm;
  if (name == "pgd") return AttackKind::pgd;
  if (name == "cw_inf" || name == "cw") return AttackKind::cw_inf;
  throw std::invalid_argument("unknown attack kind '" + name + "'");
}

void AttackSpec::validate() const {
  if (!(epsilon > 0)) throw std::invalid_argument("attack epsilon must be > 0");
  if (steps < 1) throw std::invalid_argument("attack steps must be >= 1");
  if (restarts < 1) throw std::invalid_argument("attack restarts must be >= 1");
  if (kind != AttackKind::fgsm && !(step_size > 0)) {
    throw std::invalid_argument("attack step_size must be > 0 for multi-step attacks");
  }
}

std::string AttackSpec::label() const {
  std::ostringstream os;
  switch (kind) {
    case AttackKind::fgsm: os << "FGSM"; break;
    case AttackKind::pgd: os << "PGD-" << steps; break;
    case AttackKind::cw_inf: os << "CW-" << steps; break;
  }
  return os.str();
}

AttackSpec AttackSpec::fgsm(Real epsilon) {
  AttackSpec s;
  s.kind = AttackKind::fgsm;
  s.epsilon = epsilon;
  s.steps = 1;
  s.step_size = epsilon;
  s.random_start = false;
  return s;
}

AttackSpec AttackSpec::pgd(Real epsilon, int steps, int restarts) {
  AttackSpec s;
  s.kind = AttackKind::pgd;
  s.epsilon = epsilon;
  s.steps = steps;
  s.step_size = 2.5 * epsilon / steps;
  s.restarts = restarts;
  return s;
}

AttackSpec AttackSpec::cw(Real epsilon, int steps, Real kappa) {
  AttackSpec s = pgd(epsilon, steps);
  s.kind = AttackKind::cw_inf;
  s.kappa = kappa;
  return s;
}

namespace {

Real sign(Real v) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); }

Var objective(Tape& tape, Var logits, const std::vector<int>& y, AttackKind kind, Real kappa) {
  return kind == AttackKind::cw_inf ? tape.cw_loss(logits, y, kappa) : tape.cross_entropy(logits, y);
}

/// Gradient of the summed per-sample objective with respect to the input.
Tensor input_grad(const Network& net, const Tensor& x, const std::vector<int>& y, AttackKind kind,
                  Real kappa) {
  Tape tape;
  BindOptions opts;
  opts.input_requires_grad = true;
  Trace t = net.forward(tape, x, opts);
  Var total = tape.sum(objective(tape, t.logits, y, kind, kappa));
  tape.backward(total);
  return tape.grad(t.input);
}

Tensor projected_ascent(const Network& net, const Batch& batch, const AttackSpec& spec,
                        std::uint64_t seed) {
  spec.validate();
  const Tensor& x0 = batch.x;
  const std::size_t n = batch.size();
  const std::size_t isz = x0.numel() / n;
  std::vector<Real> lo(x0.numel()), hi(x0.numel());
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    lo[i] = std::max(x0[i] - spec.epsilon, Real(0));
    hi[i] = std::min(x0[i] + spec.epsilon, Real(1));
  }
  Tensor best = x0;
  std::vector<Real> best_loss(n, -std::numeric_limits<Real>::infinity());
  for (int r = 0; r < spec.restarts; ++r) {
    Tensor x = x0;
    if (spec.random_start) {
      for (std::size_t s = 0; s < n; ++s) {
        Rng rng(derive_seed(seed, {batch.ids[s], static_cast<std::uint64_t>(r)}));
        for (std::size_t p = 0; p < isz; ++p) {
          const std::size_t i = s * isz + p;
          x[i] = std::clamp(x0[i] + rng.uniform(-spec.epsilon, spec.epsilon), lo[i], hi[i]);
        }
      }
    }
    for (int step = 0; step < spec.steps; ++step) {
      const Tensor g = input_grad(net, x, batch.y, spec.kind, spec.kappa);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        x[i] = std::min(std::max(x[i] + spec.step_size * sign(g[i]), lo[i]), hi[i]);
      }
    }
    if (spec.restarts == 1) return x;
    const auto loss = attack_objective(net, x, batch.y, spec.kind, spec.kappa);
    for (std::size_t s = 0; s < n; ++s) {
      if (loss[s] > best_loss[s]) {
        best_loss[s] = loss[s];
        std::copy_n(x.data().begin() + s * isz, isz, best.data().begin() + s * isz);
      }
    }
  }
  return best;
}

}  // namespace

std::vector<Real> attack_objective(const Network& net, const Tensor& x, const std::vector<int>& y,
                                   AttackKind kind, Real kappa) {
  Tape tape;
  Trace t = net.forward(tape, x);
  const Tensor& v = tape.value(objective(tape, t.logits, y, kind, kappa));
  return {v.data().begin(), v.data().end()};
}

Tensor fgsm(const Network& net, const Batch& batch, const AttackSpec& spec) {
  spec.validate();
  const Tensor g = input_grad(net, batch.x, batch.y, AttackKind::fgsm, 0);
  Tensor x = batch.x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    x[i] = std::clamp(x[i] + spec.epsilon * sign(g[i]), Real(0), Real(1));
  }
  return x;
}

Tensor pgd(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed) {
  AttackSpec s = spec;
  s.kind = AttackKind::pgd;
  return projected_ascent(net, batch, s, seed);
}

Tensor cw_inf(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed) {
  AttackSpec s = spec;
  s.kind = AttackKind::cw_inf;
  return projected_ascent(net, batch, s, seed);
}

Tensor attack(const Network& net, const Batch& batch, const AttackSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case AttackKind::fgsm: return fgsm(net, batch, spec);
    case AttackKind::pgd: return pgd(net, batch, spec, seed);
    case AttackKind::cw_inf: return cw_inf(net, batch, spec, seed);
  }
  throw std::logic_error("unreachable");
}

}  // namespace mad
