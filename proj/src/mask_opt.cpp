#include "mad/mask_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mad {

void MaskOptConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("mask iterations must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("mask lr must be > 0");
}

MaskOptResult minimize_mask(const MaskObjective& objective, std::vector<Real> start,
                            const std::vector<std::uint8_t>& trainable, const MaskOptConfig& cfg) {
  cfg.validate();
  const std::size_t d = start.size();
  if (trainable.size() != d) throw ShapeError("trainable flags do not match mask dimension");
  std::vector<Real> m = std::move(start);
  std::vector<Real> grad(d), first(d, 0), second(d, 0);
  MaskOptResult res;
  res.best_loss = std::numeric_limits<Real>::infinity();
  Real b1_pow = 1, b2_pow = 1;
  for (int it = 0; it <= cfg.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), Real(0));
    const Real loss = objective(m, grad);
    if (!std::isfinite(loss)) {
      res.excluded = true;
      break;
    }
    res.loss_trace.push_back(loss);
    if (it == 0) res.initial_loss = loss;
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_iteration = it;
      res.mask.values = m;
    }
    if (it == cfg.iterations) break;
    b1_pow *= cfg.adam_beta1;
    b2_pow *= cfg.adam_beta2;
    for (std::size_t k = 0; k < d; ++k) {
      if (!trainable[k]) continue;
      first[k] = cfg.adam_beta1 * first[k] + (1 - cfg.adam_beta1) * grad[k];
      second[k] = cfg.adam_beta2 * second[k] + (1 - cfg.adam_beta2) * grad[k] * grad[k];
      const Real mhat = first[k] / (1 - b1_pow);
      const Real vhat = second[k] / (1 - b2_pow);
      m[k] = std::clamp(m[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps), Real(0), Real(1));
    }
  }
  return res;
}

MaskOptResult optimize_mask(const Network& net, const Tensor& x_adv, const std::vector<int>& y,
                            const MaskOptConfig& cfg) {
  std::vector<std::uint8_t> trainable(net.num_params(), 0);
  for (const auto& p : net.param_layers())
    std::fill(trainable.begin() + p.weight.begin, trainable.begin() + p.weight.end, 1);

  MaskVector mask;
  auto objective = [&](std::span<const Real> m, std::span<Real> grad) -> Real {
    mask.values.assign(m.begin(), m.end());
    Tape tape;
    BindOptions opts;
    opts.mask = &mask;
    opts.mask_requires_grad = true;
    Trace t;
    try {
      t = net.forward(tape, x_adv, opts);
    } catch (const NonFiniteError&) {
      return std::numeric_limits<Real>::quiet_NaN();
    }
    Var loss = tape.mean(tape.cross_entropy(t.logits, y));
    const Real value = tape.value(loss).item();
    if (!std::isfinite(value)) return value;
    tape.backward(loss);
    const auto g = net.mask_grad(tape, t);
    std::copy(g.begin(), g.end(), grad.begin());
    return value;
  };
  return minimize_mask(objective, net.ones_mask().values, trainable, cfg);
}

std::vector<Real> variation_from_mask(std::span<const Real> w, std::span<const Real> m) {
  if (w.size() != m.size()) {
    throw ShapeError("variation_from_mask: dim(w)=" + std::to_string(w.size()) +
                     " != dim(m)=" + std::to_string(m.size()));
  }
  std::vector<Real> dw(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) dw[k] = -w[k] * (1 - m[k]);
  return dw;
}

}  // namespace mad
