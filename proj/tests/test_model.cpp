#include "oracles.hpp"

#include "mad/model.hpp"

#include <doctest.h>

#include <numeric>

using namespace mad;

TEST_CASE("mlp2 parameter count") {
  const Network net = make_net(ArchId::mlp2, {1, 16, 16}, 10, 0);
  CHECK(net.num_params() == 256 * 256 + 256 + 256 * 10 + 10);
  CHECK(net.num_params() == 68362);
  CHECK(net.num_weights() == 256 * 256 + 256 * 10);
}

TEST_CASE("convnet4 layer output shapes") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 0);
  const auto shapes = net.layer_output_shapes();
  REQUIRE(shapes.size() == 8);
  CHECK(shapes[0] == Shape{16, 14, 14});
  CHECK(shapes[2] == Shape{32, 6, 6});
  CHECK(shapes[4] == Shape{1152});
  CHECK(shapes[5] == Shape{128});
  CHECK(shapes[7] == Shape{10});
}

TEST_CASE("offsets are disjoint and cover the flat vector") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 0);
  std::vector<int> hits(net.num_params(), 0);
  std::size_t weights = 0;
  for (const auto& p : net.param_layers()) {
    for (std::size_t k = p.weight.begin; k < p.weight.end; ++k) ++hits[k];
    for (std::size_t k = p.bias.begin; k < p.bias.end; ++k) ++hits[k];
    CHECK(p.weight_offset == weights);
    CHECK(p.weight.size() == p.rows * p.cols);
    weights += p.weight.size();
  }
  CHECK(weights == net.num_weights());
  for (int h : hits) CHECK(h == 1);
  for (std::size_t w = 0; w < net.num_weights(); ++w) CHECK_FALSE(net.is_bias(net.weight_flat_index(w)));
}

TEST_CASE("initialization is deterministic, seeded and fan-in scaled") {
  const Network a = make_net(ArchId::convnet4, {1, 16, 16}, 10, 7);
  const Network b = make_net(ArchId::convnet4, {1, 16, 16}, 10, 7);
  const Network c = make_net(ArchId::convnet4, {1, 16, 16}, 10, 8);
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());
  for (const auto& p : a.param_layers()) {
    const Real bound = std::sqrt(6.0 / static_cast<Real>(p.cols));
    for (std::size_t k = p.weight.begin; k < p.weight.end; ++k) CHECK(std::abs(a.params()[k]) <= bound);
    for (std::size_t k = p.bias.begin; k < p.bias.end; ++k) CHECK(a.params()[k] == 0);
  }
}

TEST_CASE("unknown architecture names are rejected") { CHECK_THROWS(parse_arch("resnet18")); }

TEST_CASE("all-ones mask leaves logits bitwise unchanged") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 1);
  const Tensor x = oracle::random_tensor({3, 1, 16, 16}, 2, 0, 1);
  const MaskVector ones = net.ones_mask();
  CHECK(net.logits(x, &ones) == net.logits(x));
}

TEST_CASE("zero weight mask equals a zero-weight network") {
  Network net = make_net(ArchId::mlp2, {1, 16, 16}, 10, 1);
  for (const auto& p : net.param_layers())
    for (std::size_t k = p.bias.begin; k < p.bias.end; ++k) net.params()[k] = 0.1 * static_cast<Real>(k % 7);
  const Tensor x = oracle::random_tensor({2, 1, 16, 16}, 3, 0, 1);
  MaskVector m = net.ones_mask();
  Network zeroed = net;
  for (const auto& p : net.param_layers())
    for (std::size_t k = p.weight.begin; k < p.weight.end; ++k) {
      m.values[k] = 0;
      zeroed.params()[k] = 0;
    }
  CHECK(net.logits(x, &m) == zeroed.logits(x));
}

TEST_CASE("half mask on one weight equals halving that weight") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 4);
  const Tensor x = oracle::random_tensor({2, 1, 16, 16}, 5, 0, 1);
  for (std::size_t w : {std::size_t{3}, std::size_t{200}, std::size_t{5000}, net.num_weights() - 1}) {
    const std::size_t k = net.weight_flat_index(w);
    MaskVector m = net.ones_mask();
    m.values[k] = 0.5;
    Network halved = net;
    halved.params()[k] *= 0.5;
    CHECK(net.logits(x, &m) == halved.logits(x));
  }
}

TEST_CASE("non-finite activations report the layer") {
  Network net = make_net(ArchId::mlp2, {1, 16, 16}, 10, 0);
  net.params()[net.param_layers()[1].weight.begin] = std::numeric_limits<Real>::infinity();
  const Tensor x = oracle::random_tensor({1, 1, 16, 16}, 1, 0.5, 1);
  try {
    net.logits(x);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.layer() == 3);
  }
}

TEST_CASE("input shape mismatch is rejected") {
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 0);
  CHECK_THROWS_AS(net.logits(Tensor({1, 1, 15, 16})), ShapeError);
}
