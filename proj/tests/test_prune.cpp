#include "mad/prune.hpp"

#include <doctest.h>

using namespace mad;

namespace {

SaliencyVector one_layer(std::vector<Real> scores) {
  SaliencyVector s;
  s.layers.push_back({0, 0, 1, scores.size(), false});
  s.scores = std::move(scores);
  return s;
}

}  // namespace

TEST_CASE("p = 0 keeps everything") {
  const PruneMask m = prune_by_saliency(one_layer({3, 1, 2, 4}), 0);
  CHECK(m.pruned_count == 0);
  CHECK(m.sparsity == 0);
  for (auto k : m.keep) CHECK(k == 1);
}

TEST_CASE("ascending and descending orders") {
  const PruneMask a = prune_by_saliency(one_layer({3, 1, 2, 4}), 50);
  CHECK(a.keep == std::vector<std::uint8_t>{1, 0, 0, 1});
  const PruneMask d = prune_by_saliency(one_layer({3, 1, 2, 4}), 50, PruneOrder::descending);
  CHECK(d.keep == std::vector<std::uint8_t>{0, 1, 1, 0});
  CHECK(a.sparsity == 0.5);
}

TEST_CASE("ties break by ascending position") {
  const PruneMask m = prune_by_saliency(one_layer({1, 1, 1, 1, 1}), 40);
  CHECK(m.keep == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  const PruneMask d = prune_by_saliency(one_layer({1, 1, 1, 1, 1}), 40, PruneOrder::descending);
  CHECK(d.keep == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
}

TEST_CASE("lowest magnitude weight goes first") {
  const PruneMask m = prune_by_saliency(one_layer({0.1, 0.5, 0.3}), 34);
  CHECK(m.keep == std::vector<std::uint8_t>{0, 1, 1});
}

TEST_CASE("convnet4 at 90 percent removes exactly floor(0.9 d_w)") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 0);
  const PruneMask m = prune_by_saliency(random_saliency(net, 4), 90);
  std::size_t zeros = 0;
  for (auto k : m.keep) zeros += k == 0;
  const std::size_t want = net.num_weights() * 9 / 10;
  CHECK(zeros == want);
  CHECK(m.pruned_count == want);
  CHECK(std::abs(m.sparsity - static_cast<Real>(want) / net.num_weights()) < 1e-9);
  Network pruned = net;
  apply_prune(pruned, m.keep);
  CHECK(count_nonzero_weights(pruned) == net.num_weights() - want);
  for (const auto& p : net.param_layers())
    for (std::size_t k = p.bias.begin; k < p.bias.end; ++k) CHECK(pruned.params()[k] == net.params()[k]);
}

TEST_CASE("a layer is never emptied") {
  SaliencyVector s;
  s.layers = {{0, 0, 1, 3, false}, {1, 3, 1, 5, false}};
  s.scores = {0.01, 0.02, 0.03, 1, 2, 3, 4, 5};
  const PruneMask m = prune_by_saliency(s, 50);  // removes 4
  CHECK(m.keep == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 1, 1, 1});
  const PruneMask big = prune_by_saliency(s, 75);  // removes 6 of 8
  CHECK(big.keep == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 0, 0, 1});
  SaliencyVector tiny;
  tiny.layers = {{0, 0, 1, 1, false}, {1, 1, 1, 1, false}};
  tiny.scores = {1, 2};
  CHECK_THROWS_AS(prune_by_saliency(tiny, 50), PruneError);
}

TEST_CASE("per-layer scope prunes each layer by the ratio") {
  SaliencyVector s;
  s.layers = {{0, 0, 1, 4, false}, {1, 4, 1, 6, false}};
  s.scores = {4, 3, 2, 1, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const PruneMask m = prune_by_saliency(s, 50, PruneOrder::ascending, PruneScope::per_layer);
  CHECK(m.keep == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0, 1, 1, 1});
  CHECK(m.pruned_count == 5);
}

TEST_CASE("invalid inputs") {
  CHECK_THROWS_AS(prune_by_saliency(one_layer({1, 2}), 100), PruneError);
  CHECK_THROWS_AS(prune_by_saliency(one_layer({1, 2}), -1), PruneError);
  CHECK_THROWS_AS(prune_by_saliency(one_layer({1, std::nan("")}), 10), PruneError);
  CHECK_THROWS_AS(parse_prune_order("sideways"), PruneError);
  Network net = make_net(ArchId::mlp2, {1, 4, 4}, 3, 0);
  CHECK_THROWS_AS(apply_prune(net, std::vector<std::uint8_t>(3, 1)), PruneError);
}
