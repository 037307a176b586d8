#include "mad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mad {

Var Tape::push(Tensor value, bool requires_grad, std::function<void(const Tensor&)> backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad,
                        requires_grad ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty())
    n.grad = g;
  else
    n.grad.axpy(1, g);
}

void Tape::accumulate(Var v, Tensor&& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty())
    n.grad = std::move(g);
  else
    n.grad.axpy(1, g);
}

void Tape::backward(Var root, Real seed) {
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  const Node& r = node(root);
  if (r.value.numel() != 1) {
    throw std::logic_error("backward: root must be scalar, got shape " + shape_str(r.value.shape()));
  }
  consumed_ = true;
  if (!r.requires_grad) return;
  accumulate(root, Tensor(r.value.shape(), seed));
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    // The callback may push into other nodes' grads but never into its own.
    const Tensor g = n.grad;
    n.backward(g);
  }
}

Var Tape::add(Var a, Var b) {
  Tensor out = mad::add(value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [this, a, b](const Tensor& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Var Tape::mul(Var a, Var b) {
  Tensor out = mad::mul(value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [this, a, b](const Tensor& g) {
    if (requires_grad(a)) accumulate(a, mad::mul(g, value(b)));
    if (requires_grad(b)) accumulate(b, mad::mul(g, value(a)));
  });
}

Var Tape::scale(Var a, Real s) {
  Tensor out = mad::scale(value(a), s);
  return push(std::move(out), requires_grad(a),
              [this, a, s](const Tensor& g) { accumulate(a, mad::scale(g, s)); });
}

Var Tape::sum(Var a) {
  Tensor out = Tensor::scalar(mad::sum(value(a)));
  return push(std::move(out), requires_grad(a), [this, a](const Tensor& g) {
    accumulate(a, Tensor(value(a).shape(), g[0]));
  });
}

Var Tape::mean(Var a) {
  const Real n = static_cast<Real>(value(a).numel());
  Tensor out = Tensor::scalar(mad::sum(value(a)) / n);
  return push(std::move(out), requires_grad(a), [this, a, n](const Tensor& g) {
    accumulate(a, Tensor(value(a).shape(), g[0] / n));
  });
}

Var Tape::relu(Var a) {
  Tensor out = value(a);
  for (auto& v : out.data()) v = v > 0 ? v : Real(0);
  return push(std::move(out), requires_grad(a), [this, a](const Tensor& g) {
    Tensor ga = g;
    const Tensor& x = value(a);
    for (std::size_t i = 0; i < ga.numel(); ++i)
      if (!(x[i] > 0)) ga[i] = 0;
    accumulate(a, std::move(ga));
  });
}

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  return push(std::move(out), requires_grad(a), [this, a](const Tensor& g) {
    accumulate(a, g.reshaped(value(a).shape()));
  });
}

Var Tape::linear(Var input, Var weight, Var bias) {
  const Tensor& x = value(input);
  const Tensor& w = value(weight);
  const Tensor& b = value(bias);
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " axis 1 must equal weight " +
                     shape_str(w.shape()) + " axis 1");
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " must equal weight axis 0");
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  Tensor out({n, out_dim});
  gemm(x.data(), false, w.data(), true, out.data(), n, out_dim, in, false);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < out_dim; ++o) out[s * out_dim + o] += b[o];
  const bool rg = requires_grad(input) || requires_grad(weight) || requires_grad(bias);
  return push(std::move(out), rg, [this, input, weight, bias, n, in, out_dim](const Tensor& g) {
    if (requires_grad(input)) {
      Tensor gx({n, in});
      gemm(g.data(), false, value(weight).data(), false, gx.data(), n, in, out_dim, false);
      accumulate(input, std::move(gx));
    }
    if (requires_grad(weight)) {
      Tensor gw({out_dim, in});
      gemm(g.data(), true, value(input).data(), false, gw.data(), out_dim, in, n, false);
      accumulate(weight, std::move(gw));
    }
    if (requires_grad(bias)) {
      Tensor gb({out_dim});
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[s * out_dim + o];
      accumulate(bias, std::move(gb));
    }
  });
}

Var Tape::conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  const Tensor& x = value(input);
  const Tensor& k = value(kernel);
  if (x.rank() != 4) throw ShapeError("conv2d op expects [n, c, h, w], got " + shape_str(x.shape()));
  Tensor out = conv2d_forward(x, k, value(bias), stride, padding);
  const bool rg = requires_grad(input) || requires_grad(kernel) || requires_grad(bias);
  ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), k.dim(2), stride, padding};
  return push(std::move(out), rg, [this, input, kernel, bias, geo](const Tensor& g) {
    const Tensor& x = value(input);
    const Tensor& k = value(kernel);
    const std::size_t n = x.dim(0), c_out = k.dim(0);
    const std::size_t spatial = geo.out_spatial(), patch = geo.patch_size();
    const std::size_t in_size = geo.channels * geo.height * geo.width;
    const bool need_x = requires_grad(input), need_k = requires_grad(kernel);
    Tensor gk, gx;
    if (need_k) gk = Tensor(k.shape());
    if (need_x) gx = Tensor(x.shape());
    std::vector<Real> cols(patch * spatial);
    for (std::size_t s = 0; s < n; ++s) {
      std::span<const Real> gs = g.data().subspan(s * c_out * spatial, c_out * spatial);
      if (need_k) {
        im2col(x.data().subspan(s * in_size, in_size), geo, cols);
        // dK += dZ_s [c_out, spatial] * cols^T [spatial, patch]
        gemm(gs, false, cols, true, gk.data(), c_out, patch, spatial, true);
      }
      if (need_x) {
        gemm(k.data(), true, gs, false, cols, patch, spatial, c_out, false);
        col2im(cols, geo, gx.data().subspan(s * in_size, in_size));
      }
    }
    if (need_k) accumulate(kernel, std::move(gk));
    if (need_x) accumulate(input, std::move(gx));
    if (requires_grad(bias)) {
      Tensor gb({c_out});
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t c = 0; c < c_out; ++c)
          for (std::size_t i = 0; i < spatial; ++i) gb[c] += g[(s * c_out + c) * spatial + i];
      accumulate(bias, std::move(gb));
    }
  });
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) +
                     " axis 0 must equal label count " + std::to_string(labels.size()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1)) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

}  // namespace

Var Tape::cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = value(logits);
  check_labels(z, labels, "cross_entropy");
  const std::size_t n = z.dim(0), c = z.dim(1);
  Tensor out({n});
  Tensor probs({n, c});
  for (std::size_t s = 0; s < n; ++s) {
    const Real* row = z.data().data() + s * c;
    const Real mx = *std::max_element(row, row + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[s * c + j] = std::exp(row[j] - mx);
      total += probs[s * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[s * c + j] /= total;
    out[s] = std::log(total) + mx - row[labels[s]];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return push(std::move(out), requires_grad(logits),
              [this, logits, probs = std::move(probs), ys = std::move(ys), c](const Tensor& g) {
                Tensor gz = probs;
                for (std::size_t s = 0; s < ys.size(); ++s) {
                  gz[s * c + ys[s]] -= 1;
                  for (std::size_t j = 0; j < c; ++j) gz[s * c + j] *= g[s];
                }
                accumulate(logits, std::move(gz));
              });
}

Var Tape::cw_loss(Var logits, std::span<const int> labels, Real kappa) {
  const Tensor& z = value(logits);
  check_labels(z, labels, "cw_loss");
  const std::size_t n = z.dim(0), c = z.dim(1);
  if (c < 2) throw ShapeError("cw_loss needs at least two classes");
  Tensor out({n});
  // Per sample: the runner-up index, or npos when the clip is active.
  std::vector<std::size_t> runner(n);
  std::vector<int> ys(labels.begin(), labels.end());
  constexpr auto npos = static_cast<std::size_t>(-1);
  for (std::size_t s = 0; s < n; ++s) {
    const Real* row = z.data().data() + s * c;
    std::size_t best = npos;
    for (std::size_t j = 0; j < c; ++j) {
      if (static_cast<int>(j) == ys[s]) continue;
      if (best == npos || row[j] > row[best]) best = j;
    }
    const Real margin = row[ys[s]] - row[best];
    if (margin > -kappa) {
      out[s] = -margin;
      runner[s] = best;
    } else {
      out[s] = kappa;
      runner[s] = npos;
    }
  }
  return push(std::move(out), requires_grad(logits),
              [this, logits, runner = std::move(runner), ys = std::move(ys), c](const Tensor& g) {
                Tensor gz(value(logits).shape());
                for (std::size_t s = 0; s < ys.size(); ++s) {
                  if (runner[s] == static_cast<std::size_t>(-1)) continue;
                  gz[s * c + ys[s]] -= g[s];
                  gz[s * c + runner[s]] += g[s];
                }
                accumulate(logits, std::move(gz));
              });
}

}  // namespace mad
