#pragma once

#include "mad/model.hpp"
#include "mad/saliency.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

class PruneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PruneOrder { ascending, descending };
enum class PruneScope { global, per_layer };

std::string to_string(PruneOrder order);
std::string to_string(PruneScope scope);
PruneOrder parse_prune_order(const std::string& name);
PruneScope parse_prune_scope(const std::string& name);

struct PruneMask {
  std::vector<std::uint8_t> keep;  // one entry per weight position; biases are never pruned
  Real sparsity = 0;               // fraction of weights removed
  std::size_t pruned_count = 0;
};

/// Number of weights removed for ratio p (percent) out of d_w.
std::size_t prune_count(Real p, std::size_t d_w);

/// Removes floor(p% * d_w) weights in score order (lowest first for ascending),
/// ties broken by ascending position. The highest-ranked weight of every layer
/// is always kept; its place in the removal quota goes to the next candidate.
PruneMask prune_by_saliency(const SaliencyVector& saliency, Real p,
                            PruneOrder order = PruneOrder::ascending,
                            PruneScope scope = PruneScope::global);

/// Zeroes the weights marked as pruned.
void apply_prune(Network& net, const std::vector<std::uint8_t>& keep);

std::size_t count_nonzero_weights(const Network& net);

}  // namespace mad
