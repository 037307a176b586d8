#include "oracles.hpp"

#include "mad/tensor.hpp"

#include <doctest.h>

using namespace mad;

TEST_CASE("shape mismatch is rejected with both shapes named") {
  Tensor a({2, 3}), b({3, 2});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  try {
    add(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2, 3]") != std::string::npos);
  }
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS(Tensor({2, 0}));
  CHECK_THROWS(Tensor({2, 2}, std::vector<Real>{1, 2, 3}));
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(sum(t) == doctest::Approx(9));
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("per-channel bias and scalar broadcasting") {
  Tensor x({1, 2, 2, 2}, 1.0);
  Tensor b({2}, std::vector<Real>{10, 20});
  const Tensor y = add_channel_bias(x, b);
  CHECK(y[0] == 11);
  CHECK(y[3] == 11);
  CHECK(y[4] == 21);
  CHECK(add_scalar(x, 2)[5] == 3);
}

TEST_CASE("conv of ones with a 2x2 ones kernel gives 4") {
  const Tensor out = conv2d_forward(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 2, 2}, 1.0), Tensor({1}), 1, 0);
  CHECK(out.shape() == Shape{1, 2, 2});
  for (Real v : out.data()) CHECK(v == 4.0);
}

TEST_CASE("1x1 identity kernel reproduces the input") {
  const Tensor x = oracle::random_tensor({1, 4, 5}, 3);
  CHECK(conv2d_forward(x, Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), 1, 0) == x);
}

TEST_CASE("conv matches the nested-loop reference") {
  struct Case {
    std::size_t k, stride, pad;
  };
  for (const Case c : {Case{3, 1, 0}, Case{3, 2, 1}, Case{2, 1, 1}, Case{1, 1, 0}, Case{5, 2, 2}}) {
    const Tensor x = oracle::random_tensor({2, 5, 5}, 11);
    const Tensor k = oracle::random_tensor({3, 2, c.k, c.k}, 12);
    const Tensor b = oracle::random_tensor({3}, 13);
    const Tensor got = conv2d_forward(x, k, b, c.stride, c.pad);
    const Tensor want = oracle::naive_conv(x, k, b, c.stride, c.pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) CHECK(oracle::rel_error(got[i], want[i]) < 1e-6);

    // Same output through the explicit kernel-matrix product.
    const Tensor cols = im2col(x, c.k, c.stride, c.pad);
    const Tensor prod = matmul(k.reshaped({3, 2 * c.k * c.k}), cols);
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t s = 0; s < cols.dim(1); ++s)
        CHECK(oracle::rel_error(prod[o * cols.dim(1) + s] + b[o], want[o * cols.dim(1) + s]) < 1e-6);
  }
}

TEST_CASE("batched conv equals per-image conv") {
  const Tensor x = oracle::random_tensor({3, 2, 6, 6}, 1);
  const Tensor k = oracle::random_tensor({4, 2, 3, 3}, 2);
  const Tensor b = oracle::random_tensor({4}, 3);
  const Tensor out = conv2d_forward(x, k, b, 2, 1);
  CHECK(out.shape() == Shape{3, 4, 3, 3});
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor xi({2, 6, 6}, std::vector<Real>(x.data().begin() + n * 72, x.data().begin() + (n + 1) * 72));
    const Tensor want = oracle::naive_conv(xi, k, b, 2, 1);
    for (std::size_t i = 0; i < want.numel(); ++i) CHECK(oracle::rel_error(out[n * 36 + i], want[i]) < 1e-9);
  }
}

TEST_CASE("im2col examples") {
  const Tensor x({1, 2, 2}, std::vector<Real>{1, 2, 3, 4});
  const Tensor c = im2col(x, 2, 1, 0);
  CHECK(c.shape() == Shape{4, 1});
  CHECK(c.storage() == std::vector<Real>{1, 2, 3, 4});

  const Tensor y = oracle::random_tensor({3, 2, 4}, 5);
  const Tensor c1 = im2col(y, 1, 1, 0);
  CHECK(c1.shape() == Shape{3, 8});
  CHECK(c1.storage() == y.storage());
}

TEST_CASE("col2im is the adjoint of im2col") {
  ConvGeometry g{2, 5, 4, 3, 2, 1};
  const Tensor x = oracle::random_tensor({2, 5, 4}, 8);
  std::vector<Real> cols(g.patch_size() * g.out_spatial());
  im2col(x.data(), g, cols);
  const Tensor c = oracle::random_tensor({g.patch_size(), g.out_spatial()}, 9);
  std::vector<Real> back(x.numel(), 0);
  col2im(c.data(), g, back);
  Real lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cols.size(); ++i) lhs += cols[i] * c[i];
  for (std::size_t i = 0; i < back.size(); ++i) rhs += back[i] * x[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv geometry errors") {
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d_forward(Tensor({2, 3, 3}), Tensor({1, 1, 2, 2}), Tensor({1}), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 3, 3}), Tensor({1, 1, 2, 2}), Tensor({1}), 0, 0), ShapeError);
}

TEST_CASE("gemm transposes agree with matmul") {
  const Tensor a = oracle::random_tensor({3, 4}, 1), b = oracle::random_tensor({4, 5}, 2);
  const Tensor want = matmul(a, b);
  Tensor got({3, 5});
  const Tensor at = transpose(a), bt = transpose(b);
  gemm(at.data(), true, bt.data(), true, got.data(), 3, 5, 4, false);
  for (std::size_t i = 0; i < 15; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}
