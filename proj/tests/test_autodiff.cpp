#include "oracles.hpp"

#include "mad/autodiff.hpp"

#include <doctest.h>

using namespace mad;

TEST_CASE("gradient of sum(w*w)/2 is w") {
  Tape tape;
  const Tensor w = oracle::random_tensor({7}, 4);
  const Var v = tape.leaf(w);
  tape.backward(tape.scale(tape.sum(tape.mul(v, v)), 0.5));
  CHECK(tape.grad(v) == w);
}

TEST_CASE("non-scalar root and reuse are rejected") {
  Tape tape;
  const Var v = tape.leaf(Tensor({3}, 1.0));
  CHECK_THROWS(tape.backward(tape.relu(v)));
  Tape t2;
  const Var s = t2.sum(t2.leaf(Tensor({3}, 1.0)));
  t2.backward(s);
  CHECK_THROWS(t2.backward(s));
}

TEST_CASE("unreached leaves get zero gradients of matching shape") {
  Tape tape;
  const Var a = tape.leaf(Tensor({2, 3}, 1.0));
  const Var b = tape.leaf(Tensor({4}, 2.0));
  tape.backward(tape.sum(b));
  CHECK(tape.grad(a) == Tensor({2, 3}));
  CHECK(tape.grad(b) == Tensor({4}, 1.0));
}

TEST_CASE("constants receive no gradient") {
  Tape tape;
  const Var c = tape.constant(Tensor({2}, 3.0));
  const Var w = tape.leaf(Tensor({2}, 2.0));
  tape.backward(tape.sum(tape.mul(c, w)));
  CHECK_FALSE(tape.requires_grad(c));
  CHECK(tape.grad(w) == Tensor({2}, 3.0));
}

TEST_CASE("finite-difference gradient check over every layer type") {
  for (std::uint64_t seed : {0, 1, 2}) {
    CAPTURE(seed);
    const Network net = oracle::gradcheck_net(seed);
    const Tensor x = oracle::random_tensor({2, 2, 6, 6}, seed + 100, 0, 1);
    const oracle::GradCheck r = oracle::grad_check(net, x, {0, 2});
    CHECK(r.checked > net.num_params());
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("cw loss gradient matches finite differences") {
  const Tensor z0 = oracle::random_tensor({3, 4}, 21);
  const std::vector<int> y{0, 3, 1};
  auto loss = [&](const Tensor& z) {
    Tape t;
    return t.value(t.sum(t.cw_loss(t.constant(z), y, 0.5))).item();
  };
  Tape tape;
  const Var z = tape.leaf(z0);
  tape.backward(tape.sum(tape.cw_loss(z, y, 0.5)));
  const Tensor g = tape.grad(z);
  Tensor zz = z0;
  for (std::size_t k = 0; k < zz.numel(); ++k) {
    const Real keep = zz[k];
    zz[k] = keep + 1e-6;
    const Real lp = loss(zz);
    zz[k] = keep - 1e-6;
    const Real lm = loss(zz);
    zz[k] = keep;
    CHECK(std::abs(g[k] - (lp - lm) / 2e-6) < 1e-6);
  }
}

TEST_CASE("backward is linear in the loss") {
  const Network net = oracle::gradcheck_net(5);
  const Tensor x = oracle::random_tensor({2, 2, 6, 6}, 6, 0, 1);
  const std::vector<int> y{1, 2};
  auto grads = [&](Real alpha, Real beta) {
    Tape tape;
    BindOptions o;
    o.params_require_grad = true;
    const Trace t = net.forward(tape, x, o);
    const Var l1 = tape.sum(tape.cross_entropy(t.logits, y));
    const Var l2 = tape.sum(tape.cw_loss(t.logits, y, 0));
    tape.backward(tape.add(tape.scale(l1, alpha), tape.scale(l2, beta)));
    return net.param_grad(tape, t);
  };
  const auto g1 = grads(1, 0), g2 = grads(0, 1), g = grads(0.7, -1.3);
  for (std::size_t k = 0; k < g.size(); ++k) CHECK(std::abs(g[k] - (0.7 * g1[k] - 1.3 * g2[k])) < 1e-10);
}

TEST_CASE("conv weight gradient equals the sum over spatial positions of g a^T") {
  const Tensor x = oracle::random_tensor({1, 2, 5, 5}, 31);
  const Tensor k = oracle::random_tensor({3, 2, 3, 3}, 32);
  const Tensor gout = oracle::random_tensor({1, 3, 3, 3}, 33);
  Tape tape;
  const Var xv = tape.constant(x), kv = tape.leaf(k), bv = tape.leaf(Tensor({3}));
  const Var z = tape.conv2d(xv, kv, bv, 1, 0);
  tape.backward(tape.sum(tape.mul(z, tape.constant(gout))));
  const Tensor cols = im2col(x.reshaped({2, 5, 5}), 3, 1, 0);  // [18, 9]
  const Tensor want = matmul(gout.reshaped({3, 9}), transpose(cols));
  const Tensor got = tape.grad(kv);
  for (std::size_t i = 0; i < want.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}
