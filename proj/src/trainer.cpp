#include "mad/trainer.hpp"

#include "mad/evaluate.hpp"
#include "mad/rng.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace mad {

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw std::invalid_argument("lr must be non-negative");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  for (std::size_t i = 1; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i].epoch <= lr_milestones[i - 1].epoch) {
      throw std::invalid_argument("lr milestones must be strictly increasing in epoch");
    }
  }
  attack.validate();
}

Real TrainConfig::lr_at(int epoch) const {
  Real out = lr;
  for (const auto& m : lr_milestones)
    if (epoch >= m.epoch) out *= m.factor;
  return out;
}

AttackSpec TrainConfig::train_attack() const {
  if (!fast_mode) return attack;
  AttackSpec s;
  s.kind = AttackKind::pgd;
  s.epsilon = attack.epsilon;
  s.steps = 1;
  s.step_size = 1.25 * attack.epsilon;
  s.restarts = 1;
  s.random_start = true;
  return s;
}

TrainResult adv_train(Network net, const Dataset& data, const TrainConfig& cfg,
                      const std::vector<std::uint8_t>* prune_keep) {
  cfg.validate();
  if (data.size() < 2) throw std::invalid_argument("adv_train: dataset needs at least two samples");
  const std::size_t d = net.num_params();

  // Which flat coordinates receive weight decay, and which are frozen.
  std::vector<std::uint8_t> decay(d, 0), frozen(d, 0);
  for (const auto& p : net.param_layers())
    for (std::size_t i = p.weight.begin; i < p.weight.end; ++i) decay[i] = 1;
  if (prune_keep) {
    if (prune_keep->size() != net.num_weights()) {
      throw std::invalid_argument("prune mask length does not match weight count");
    }
    for (std::size_t w = 0; w < prune_keep->size(); ++w) {
      if ((*prune_keep)[w]) continue;
      const std::size_t flat = net.weight_flat_index(w);
      if (net.params()[flat] != 0) {
        throw std::invalid_argument("adv_train: pruned weight " + std::to_string(w) +
                                    " is not zero");
      }
      frozen[flat] = 1;
    }
  }

  const std::size_t n_hold = std::max<std::size_t>(1, data.size() / 10);
  const std::size_t n_train = data.size() - n_hold;
  const Dataset holdout = data.slice(n_train, data.size());
  const AttackSpec attack = cfg.train_attack();

  std::vector<Real> velocity(d, 0);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result{net, {}, -1};
  Real best_robust = -1;
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Real lr = cfg.lr_at(epoch);
    Rng shuffler(derive_seed(cfg.seed, {0x5bu, static_cast<std::uint64_t>(epoch)}));
    shuffler.shuffle(order.begin(), order.end());
    Real loss_sum = 0;
    std::size_t step = 0;
    for (std::size_t begin = 0; begin < n_train; begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n_train, begin + cfg.batch_size);
      const Batch batch = data.batch({order.data() + begin, end - begin});
      const std::uint64_t attack_seed =
          derive_seed(cfg.seed, {0xa7u, static_cast<std::uint64_t>(epoch), step});
      Tape tape;
      BindOptions opts;
      opts.params_require_grad = true;
      Trace t;
      try {
        const Tensor x_adv = mad::attack(net, batch, attack, attack_seed);
        t = net.forward(tape, x_adv, opts);
      } catch (const NonFiniteError& e) {
        throw TrainingError(epoch, step, "epoch " + std::to_string(epoch) + ", step " +
                                             std::to_string(step) + ": " + e.what());
      }
      Var loss = tape.mean(tape.cross_entropy(t.logits, batch.y));
      const Real loss_value = tape.value(loss).item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError(epoch, step, "non-finite training loss at epoch " +
                                             std::to_string(epoch) + ", step " +
                                             std::to_string(step));
      }
      loss_sum += loss_value * static_cast<Real>(batch.size());
      tape.backward(loss);
      const std::vector<Real> grad = net.param_grad(tape, t);
      auto& w = net.params();
      for (std::size_t i = 0; i < d; ++i) {
        if (frozen[i]) continue;
        const Real g = grad[i] + (decay[i] ? cfg.weight_decay * w[i] : Real(0));
        velocity[i] = cfg.momentum * velocity[i] + g;
        w[i] -= lr * velocity[i];
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<Real>(n_train);
    const std::uint64_t eval_seed = derive_seed(cfg.seed, {0xe0u, static_cast<std::uint64_t>(epoch)});
    rec.clean_acc = accuracy(net, holdout, std::nullopt, eval_seed);
    rec.robust_acc = accuracy(net, holdout, attack, eval_seed);
    result.history.push_back(rec);
    if (rec.robust_acc > best_robust) {
      best_robust = rec.robust_acc;
      result.net.params() = net.params();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  return result;
}

TrainResult fast_adv_train(Network net, const Dataset& data, const TrainConfig& cfg) {
  if (!cfg.fast_mode) throw std::invalid_argument("fast_adv_train requires cfg.fast_mode");
  return adv_train(std::move(net), data, cfg);
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,clean_acc,robust_acc,loss\n";
  out << std::setprecision(10);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.lr << ',' << r.clean_acc << ',' << r.robust_acc << ',' << r.loss
        << '\n';
  }
}

}  // namespace mad
