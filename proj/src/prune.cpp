#include "mad/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mad {

std::string to_string(PruneOrder order) {
  return order == PruneOrder::ascending ? "ascending" : "descending";
}

std::string to_string(PruneScope scope) {
  return scope == PruneScope::global ? "global" : "per_layer";
}

PruneOrder parse_prune_order(const std::string& name) {
  if (name == "ascending") return PruneOrder::ascending;
  if (name == "descending") return PruneOrder::descending;
  throw PruneError("unknown prune order '" + name + "'");
}

PruneScope parse_prune_scope(const std::string& name) {
  if (name == "global") return PruneScope::global;
  if (name == "per_layer") return PruneScope::per_layer;
  throw PruneError("unknown prune scope '" + name + "'");
}

std::size_t prune_count(Real p, std::size_t d_w) {
  if (!(p >= 0 && p < 100)) throw PruneError("prune ratio must lie in [0, 100), got " + std::to_string(p));
  return static_cast<std::size_t>(std::floor(p * static_cast<Real>(d_w) / 100));
}

namespace {

/// Positions [begin, end) in removal order.
std::vector<std::size_t> removal_order(const std::vector<Real>& scores, std::size_t begin,
                                       std::size_t end, PruneOrder order) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return order == PruneOrder::ascending ? scores[a] < scores[b] : scores[a] > scores[b];
  });
  return idx;
}

}  // namespace

PruneMask prune_by_saliency(const SaliencyVector& saliency, Real p, PruneOrder order, PruneScope scope) {
  const auto& scores = saliency.scores;
  const std::size_t d_w = scores.size();
  for (std::size_t w = 0; w < d_w; ++w) {
    if (!std::isfinite(scores[w])) throw PruneError("non-finite saliency at weight " + std::to_string(w));
  }
  PruneMask m;
  m.keep.assign(d_w, 1);

  if (scope == PruneScope::per_layer) {
    for (const auto& l : saliency.layers) {
      const std::size_t size = l.rows * l.cols;
      const std::size_t n = std::min(prune_count(p, size), size - 1);
      const auto ord = removal_order(scores, l.weight_offset, l.weight_offset + size, order);
      for (std::size_t k = 0; k < n; ++k) m.keep[ord[k]] = 0;
      m.pruned_count += n;
    }
  } else {
    const std::size_t n = prune_count(p, d_w);
    if (n > d_w - saliency.layers.size()) {
      throw PruneError("cannot prune " + std::to_string(n) + " of " + std::to_string(d_w) +
                       " weights while keeping one weight per layer");
    }
    const auto ord = removal_order(scores, 0, d_w, order);
    // The last weight of each layer in removal order is the one kept.
    std::vector<std::uint8_t> is_protected(d_w, 0);
    std::vector<std::uint8_t> layer_done(saliency.layers.size(), 0);
    for (std::size_t k = d_w; k-- > 0;) {
      const std::size_t li = saliency.layer_of(ord[k]);
      if (!layer_done[li]) {
        layer_done[li] = 1;
        is_protected[ord[k]] = 1;
      }
    }
    for (std::size_t k = 0; k < d_w && m.pruned_count < n; ++k) {
      if (is_protected[ord[k]]) continue;
      m.keep[ord[k]] = 0;
      ++m.pruned_count;
    }
  }
  m.sparsity = d_w ? static_cast<Real>(m.pruned_count) / static_cast<Real>(d_w) : 0;
  return m;
}

void apply_prune(Network& net, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != net.num_weights()) {
    throw PruneError("prune mask has " + std::to_string(keep.size()) + " entries, network has " +
                     std::to_string(net.num_weights()) + " weights");
  }
  auto& params = net.params();
  for (const auto& p : net.param_layers())
    for (std::size_t k = 0; k < p.weight.size(); ++k) {
      if (!keep[p.weight_offset + k]) params[p.weight.begin + k] = 0;
    }
}

std::size_t count_nonzero_weights(const Network& net) {
  std::size_t n = 0;
  for (const auto& p : net.param_layers())
    for (std::size_t k = p.weight.begin; k < p.weight.end; ++k) n += net.params()[k] != 0;
  return n;
}

}  // namespace mad
