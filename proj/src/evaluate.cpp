#include "mad/evaluate.hpp"

#include "mad/rng.hpp"

#include <algorithm>

namespace mad {

const AttackResult* Metrics::find(const std::string& label) const {
  for (const auto& r : robust)
    if (r.label == label) return &r;
  return nullptr;
}

std::vector<int> predict(const Network& net, const Tensor& x) {
  const Tensor z = net.logits(x);
  const std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<int> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const Real* row = z.data().data() + s * c;
    out[s] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

Real accuracy(const Network& net, const Dataset& data, const std::optional<AttackSpec>& attack,
              std::uint64_t seed, std::size_t batch_size) {
  if (data.size() == 0) return 0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const Batch b = data.range(begin, std::min(data.size(), begin + batch_size));
    const Tensor x = attack ? mad::attack(net, b, *attack, seed) : b.x;
    const auto pred = predict(net, x);
    for (std::size_t s = 0; s < b.size(); ++s) correct += pred[s] == b.y[s];
  }
  return static_cast<Real>(correct) / static_cast<Real>(data.size());
}

Metrics evaluate(const Network& net, const Dataset& data, const std::vector<AttackSpec>& attacks,
                 std::uint64_t seed, std::size_t batch_size) {
  Metrics m;
  m.n_samples = data.size();
  m.clean_accuracy = accuracy(net, data, std::nullopt, seed, batch_size);
  for (std::size_t k = 0; k < attacks.size(); ++k) {
    const auto& spec = attacks[k];
    m.robust.push_back({spec.label(), spec,
                        accuracy(net, data, spec, derive_seed(seed, {0xe7a1, k}), batch_size)});
  }
  return m;
}

}  // namespace mad
