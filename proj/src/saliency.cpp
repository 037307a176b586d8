#include "mad/saliency.hpp"

#include "mad/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mad {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::size_t param_index_of(const Network& net, std::size_t layer_id) {
  const auto& pls = net.param_layers();
  for (std::size_t i = 0; i < pls.size(); ++i)
    if (pls[i].layer_index == layer_id) return i;
  throw SaliencyError("layer " + std::to_string(layer_id) + " has no weights");
}

Tensor outer_self(std::span<const Real> m, std::size_t rows, std::size_t cols) {
  // [rows, cols] -> m m^T [rows, rows]
  Tensor out({rows, rows});
  gemm(m, false, m, true, out.data(), rows, rows, cols, false);
  return out;
}

}  // namespace

std::size_t SaliencyVector::layer_of(std::size_t w) const {
  for (std::size_t i = layers.size(); i-- > 0;)
    if (w >= layers[i].weight_offset) return i;
  throw std::out_of_range("weight position out of range");
}

SaliencyVector empty_saliency(const Network& net, std::string method) {
  SaliencyVector s;
  s.method = std::move(method);
  s.scores.assign(net.num_weights(), Real(0));
  for (const auto& p : net.param_layers()) {
    s.layers.push_back({p.layer_index, p.weight_offset, p.rows, p.cols, p.is_conv});
  }
  return s;
}

KfacFactorPair factors_from_trace(const Network& net, const Tape& tape, const Trace& trace,
                                  std::size_t param_index, std::size_t s) {
  const ParamLayer& p = net.param_layers().at(param_index);
  const LayerVars& lv = trace.layers.at(param_index);
  const Tensor& a = tape.value(lv.input);
  const Tensor g = tape.grad(lv.output);
  const std::size_t n = a.dim(0);
  if (s >= n) throw std::out_of_range("sample index out of range for trace");
  KfacFactorPair f;
  f.layer_id = p.layer_index;
  const std::size_t a_size = a.numel() / n, g_size = g.numel() / n;
  std::span<const Real> a_s = a.data().subspan(s * a_size, a_size);
  std::span<const Real> g_s = g.data().subspan(s * g_size, g_size);
  if (p.is_conv) {
    ConvGeometry geo{p.input_shape[0], p.input_shape[1], p.input_shape[2],
                     p.weight_shape[2], 1, 0};
    const auto& conv = std::get<ConvSpec>(net.layers()[p.layer_index]);
    geo.stride = conv.stride;
    geo.padding = conv.padding;
    const std::size_t spatial = geo.out_spatial();
    std::vector<Real> cols(geo.patch_size() * spatial);
    im2col(a_s, geo, cols);
    // A = sum_i a_i a_i^T over spatial positions; Z likewise over dL/dz_i.
    f.A = outer_self(cols, geo.patch_size(), spatial);
    f.Z = outer_self(g_s, p.rows, spatial);
  } else {
    f.A = outer_self(a_s, p.cols, 1);
    f.Z = outer_self(g_s, p.rows, 1);
  }
  return f;
}

std::vector<KfacFactorPair> kfac_factors_all(const Network& net, const Tensor& x_adv, int y) {
  if (x_adv.dim(0) != 1) throw ShapeError("kfac factors are per sample; batch axis must be 1");
  Tape tape;
  BindOptions opts;
  opts.params_require_grad = true;
  Trace t = net.forward(tape, x_adv, opts);
  const std::vector<int> labels{y};
  tape.backward(tape.sum(tape.cross_entropy(t.logits, labels)));
  std::vector<KfacFactorPair> out;
  for (std::size_t i = 0; i < net.param_layers().size(); ++i) {
    out.push_back(factors_from_trace(net, tape, t, i));
  }
  return out;
}

KfacFactorPair kfac_factors(const Network& net, const Tensor& x_adv, int y, std::size_t layer_id) {
  const std::size_t pi = param_index_of(net, layer_id);
  return kfac_factors_all(net, x_adv, y).at(pi);
}

void blockwise_scores(std::span<const Real> z_diag, const Tensor& A, std::span<const Real> dW,
                      std::size_t rows, std::size_t cols, std::span<Real> out, OpCounter* ops) {
  if (z_diag.size() != rows || A.rank() != 2 || A.dim(0) != cols || A.dim(1) != cols ||
      dW.size() != rows * cols || out.size() != rows * cols) {
    throw SaliencyError("factor/layer shape mismatch: Z diag " + std::to_string(z_diag.size()) +
                        ", A " + shape_str(A.shape()) + ", layer " + std::to_string(rows) + "x" +
                        std::to_string(cols));
  }
  // Row i of P is (A dW_i)^T; A is symmetric so P = dW A.
  std::vector<Real> P(rows * cols);
  gemm(dW, false, A.data(), false, P, rows, cols, cols, false);
  for (std::size_t i = 0; i < rows; ++i) {
    const Real half_z = z_diag[i] / 2;
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = half_z * dW[i * cols + j] * P[i * cols + j];
    }
    if (ops) ops->macs += cols * cols + cols;
  }
}

Real full_kfac_quadratic(const Tensor& Z, const Tensor& A, std::span<const Real> dW, OpCounter* ops) {
  const std::size_t rows = Z.dim(0), cols = A.dim(0);
  if (dW.size() != rows * cols) throw SaliencyError("factor/layer shape mismatch");
  Real total = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const Real u = dW[i * cols + j];
      Real acc = 0;
      for (std::size_t i2 = 0; i2 < rows; ++i2) {
        const Real z = Z[i * rows + i2];
        for (std::size_t j2 = 0; j2 < cols; ++j2) acc += z * A[j * cols + j2] * dW[i2 * cols + j2];
      }
      total += u * acc;
    }
  if (ops) ops->macs += rows * rows * cols * cols;
  return total / 2;
}

SaliencyVector mad_saliency_per_sample(const Network& net, std::span<const Real> mask,
                                       const std::vector<KfacFactorPair>& factors, OpCounter* ops) {
  if (mask.size() != net.num_params()) throw SaliencyError("mask dimension mismatch");
  if (factors.size() != net.param_layers().size()) {
    throw SaliencyError("expected one factor pair per parametric layer");
  }
  SaliencyVector s = empty_saliency(net, "mad");
  s.n_samples_averaged = 1;
  const auto& w = net.params();
  for (std::size_t li = 0; li < factors.size(); ++li) {
    const ParamLayer& p = net.param_layers()[li];
    const KfacFactorPair& f = factors[li];
    if (f.Z.rank() != 2 || f.Z.dim(0) != p.rows || f.Z.dim(1) != p.rows) {
      throw SaliencyError("factor/layer shape mismatch: Z " + shape_str(f.Z.shape()) + " for " +
                          std::to_string(p.rows) + " output channels");
    }
    const auto dw = variation_from_mask(std::span(w).subspan(p.weight.begin, p.weight.size()),
                                        mask.subspan(p.weight.begin, p.weight.size()));
    std::vector<Real> z_diag(p.rows);
    for (std::size_t i = 0; i < p.rows; ++i) z_diag[i] = f.Z[i * p.rows + i];
    blockwise_scores(z_diag, f.A, dw, p.rows, p.cols,
                     std::span(s.scores).subspan(p.weight_offset, p.weight.size()), ops);
  }
  return s;
}

SaliencyVector mad_saliency(const Network& net, const Dataset& subset, const MadConfig& cfg) {
  SaliencyVector total = empty_saliency(net, "mad");
  std::size_t used = 0, excluded = 0, improved = 0;
  std::vector<Real> initial, best;
  for (std::size_t n = 0; n < subset.size(); ++n) {
    const Batch b = subset.range(n, n + 1);
    const Tensor x_adv = attack(net, b, cfg.attack, derive_seed(cfg.seed, {0x5a1, n}));
    const MaskOptResult opt = optimize_mask(net, x_adv, b.y, cfg.mask);
    if (opt.excluded) {
      ++excluded;
      continue;
    }
    const auto factors = kfac_factors_all(net, x_adv, b.y[0]);
    const SaliencyVector one = mad_saliency_per_sample(net, opt.mask.values, factors);
    for (std::size_t k = 0; k < total.scores.size(); ++k) total.scores[k] += one.scores[k];
    ++used;
    improved += opt.best_loss < opt.initial_loss;
    initial.push_back(opt.initial_loss);
    best.push_back(opt.best_loss);
  }
  if (used == 0) throw SaliencyError("every sample was excluded from mask optimization");
  for (auto& v : total.scores) v /= static_cast<Real>(used);
  total.n_samples_averaged = used;

  std::vector<Real> sorted = best;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) { return sorted[static_cast<std::size_t>(q * (sorted.size() - 1))]; };
  total.meta = {
      {"n_samples", used},
      {"n_excluded", excluded},
      {"n_improved", improved},
      {"attack", {{"kind", to_string(cfg.attack.kind)}, {"epsilon", cfg.attack.epsilon},
                  {"steps", cfg.attack.steps}, {"step_size", cfg.attack.step_size},
                  {"restarts", cfg.attack.restarts}}},
      {"mask", {{"iterations", cfg.mask.iterations}, {"lr", cfg.mask.lr},
                {"beta1", cfg.mask.adam_beta1}, {"beta2", cfg.mask.adam_beta2},
                {"eps", cfg.mask.adam_eps}}},
      {"best_loss_quantiles", {quantile(0), quantile(0.5), quantile(0.9), quantile(1)}},
      {"initial_losses", initial},
      {"best_losses", best},
  };
  return total;
}

std::vector<Real> sample_param_grad(const Network& net, const Tensor& x, int y) {
  Tape tape;
  BindOptions opts;
  opts.params_require_grad = true;
  Trace t = net.forward(tape, x, opts);
  const std::vector<int> labels{y};
  tape.backward(tape.sum(tape.cross_entropy(t.logits, labels)));
  return net.param_grad(tape, t);
}

namespace {

/// Inputs on which baseline Fishers are measured, one per row.
Dataset baseline_inputs(const Network& net, const Dataset& subset, const BaselineConfig& cfg) {
  if (!cfg.adversarial) return subset;
  Dataset out = subset;
  const std::size_t isz = subset.image_size();
  for (std::size_t begin = 0; begin < subset.size(); begin += 128) {
    const Batch b = subset.range(begin, std::min(subset.size(), begin + 128));
    const Tensor x = attack(net, b, cfg.attack, derive_seed(cfg.seed, {0xb1}));
    std::copy(x.data().begin(), x.data().end(), out.pixels.begin() + begin * isz);
  }
  return out;
}

/// Weights-only gradient of each sample, row-major [N, d_w].
std::vector<Real> weight_grads(const Network& net, const Dataset& inputs) {
  const std::size_t dw = net.num_weights();
  std::vector<Real> G(inputs.size() * dw);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Batch b = inputs.range(n, n + 1);
    const auto g = sample_param_grad(net, b.x, b.y[0]);
    for (const auto& p : net.param_layers()) {
      std::copy(g.begin() + p.weight.begin, g.begin() + p.weight.end,
                G.begin() + n * dw + p.weight_offset);
    }
  }
  return G;
}

Real weight_at(const Network& net, const SaliencyVector& s, std::size_t w) {
  const auto& l = s.layers[s.layer_of(w)];
  const ParamLayer& p = net.param_layers()[s.layer_of(w)];
  return net.params()[p.weight.begin + (w - l.weight_offset)];
}

}  // namespace

SaliencyVector obd_saliency(const Network& net, const Dataset& subset, const BaselineConfig& cfg) {
  if (subset.size() == 0) throw SaliencyError("obd_saliency: empty subset");
  SaliencyVector s = empty_saliency(net, "obd");
  const Dataset inputs = baseline_inputs(net, subset, cfg);
  std::vector<Real> fisher_diag(net.num_weights(), 0);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Batch b = inputs.range(n, n + 1);
    const auto g = sample_param_grad(net, b.x, b.y[0]);
    for (const auto& p : net.param_layers())
      for (std::size_t k = 0; k < p.weight.size(); ++k) {
        const Real v = g[p.weight.begin + k];
        fisher_diag[p.weight_offset + k] += v * v;
      }
  }
  const Real inv_n = Real(1) / static_cast<Real>(inputs.size());
  for (std::size_t w = 0; w < s.scores.size(); ++w) {
    const Real wk = weight_at(net, s, w);
    s.scores[w] = Real(0.5) * wk * wk * fisher_diag[w] * inv_n;
  }
  s.n_samples_averaged = inputs.size();
  s.meta = {{"n_samples", inputs.size()}, {"adversarial", cfg.adversarial}};
  return s;
}

std::vector<Real> damped_inverse_diagonal(const Tensor& G, Real lambda, bool force_dense) {
  if (G.rank() != 2) throw ShapeError("damped_inverse_diagonal expects [N, dim]");
  if (!(lambda > 0)) throw SaliencyError("Fisher inversion failed: damping must be positive");
  const auto n = static_cast<Eigen::Index>(G.dim(0));
  const auto dim = static_cast<Eigen::Index>(G.dim(1));
  ConstMap g(G.data().data(), n, dim);
  const Real inv_n = Real(1) / static_cast<Real>(n);
  std::vector<Real> out(static_cast<std::size_t>(dim));
  if (force_dense || dim <= n) {
    Eigen::MatrixXd F = inv_n * (g.transpose() * g);
    F.diagonal().array() += lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(F);
    if (llt.info() != Eigen::Success) throw SaliencyError("Fisher inversion failed after damping");
    const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(dim, dim));
    for (Eigen::Index k = 0; k < dim; ++k) out[static_cast<std::size_t>(k)] = inv(k, k);
    return out;
  }
  // Woodbury: (lambda I + U^T U)^-1 = (I - U^T (lambda I + U U^T)^-1 U) / lambda, U = G / sqrt(N).
  const RowMat U = std::sqrt(inv_n) * g;
  Eigen::MatrixXd S = U * U.transpose();
  S.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) throw SaliencyError("Fisher inversion failed after damping");
  Eigen::MatrixXd X = U;
  llt.matrixL().solveInPlace(X);
  for (Eigen::Index k = 0; k < dim; ++k) {
    out[static_cast<std::size_t>(k)] = (1 - X.col(k).squaredNorm()) / lambda;
  }
  return out;
}

SaliencyVector obs_saliency(const Network& net, const Dataset& subset, const BaselineConfig& cfg) {
  if (subset.size() == 0) throw SaliencyError("obs_saliency: empty subset");
  SaliencyVector s = empty_saliency(net, "obs");
  const Dataset inputs = baseline_inputs(net, subset, cfg);
  const std::vector<Real> G = weight_grads(net, inputs);
  const std::size_t N = inputs.size(), dw = net.num_weights();
  nlohmann::json damping = nlohmann::json::array();
  for (const auto& l : s.layers) {
    const std::size_t dim = l.rows * l.cols;
    Tensor layer_g({N, dim});
    Real trace = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < dim; ++k) {
        const Real v = G[n * dw + l.weight_offset + k];
        layer_g[n * dim + k] = v;
        trace += v * v;
      }
    trace /= static_cast<Real>(N);
    const Real lambda = 1e-5 * trace / static_cast<Real>(dim);
    damping.push_back(lambda);
    const auto inv_diag = damped_inverse_diagonal(layer_g, lambda);
    for (std::size_t k = 0; k < dim; ++k) {
      const Real wk = weight_at(net, s, l.weight_offset + k);
      s.scores[l.weight_offset + k] = Real(0.5) * wk * wk / inv_diag[k];
    }
  }
  s.n_samples_averaged = N;
  s.meta = {{"n_samples", N}, {"adversarial", cfg.adversarial}, {"damping", damping}};
  return s;
}

SaliencyVector lwm_saliency(const Network& net) {
  SaliencyVector s = empty_saliency(net, "lwm");
  for (std::size_t w = 0; w < s.scores.size(); ++w) s.scores[w] = std::abs(weight_at(net, s, w));
  return s;
}

SaliencyVector random_saliency(const Network& net, std::uint64_t seed) {
  SaliencyVector s = empty_saliency(net, "random");
  Rng rng(derive_seed(seed, {0x7a4d}));
  for (auto& v : s.scores) v = rng.uniform();
  s.meta = {{"seed", seed}};
  return s;
}

std::vector<Real> obd_scores(std::span<const Real> w, const Tensor& H) {
  const std::size_t d = w.size();
  if (H.rank() != 2 || H.dim(0) != d || H.dim(1) != d) throw ShapeError("obd_scores: H must be [d, d]");
  std::vector<Real> out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = Real(0.5) * w[k] * w[k] * H[k * d + k];
  return out;
}

std::vector<Real> obs_scores(std::span<const Real> w, const Tensor& H) {
  const std::size_t d = w.size();
  if (H.rank() != 2 || H.dim(0) != d || H.dim(1) != d) throw ShapeError("obs_scores: H must be [d, d]");
  const auto di = static_cast<Eigen::Index>(d);
  const Eigen::MatrixXd h = ConstMap(H.data().data(), di, di);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(h);
  if (!lu.isInvertible()) throw SaliencyError("obs_scores: Hessian is singular");
  const Eigen::MatrixXd inv = lu.inverse();
  std::vector<Real> out(d);
  for (std::size_t k = 0; k < d; ++k) {
    out[k] = Real(0.5) * w[k] * w[k] / inv(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  }
  return out;
}

Tensor exact_fisher_oracle(const Network& net, const Dataset& subset, std::size_t layer_id,
                           const std::optional<AttackSpec>& attack_spec, std::uint64_t seed) {
  const ParamLayer& p = net.param_layers()[param_index_of(net, layer_id)];
  const std::size_t dim = p.weight.size();
  if (dim > 4096) {
    throw SaliencyError("exact Fisher oracle limited to 4096 weights, layer has " + std::to_string(dim));
  }
  if (subset.size() == 0) throw SaliencyError("exact Fisher oracle: empty subset");
  Tensor F({dim, dim});
  for (std::size_t n = 0; n < subset.size(); ++n) {
    const Batch b = subset.range(n, n + 1);
    const Tensor x = attack_spec ? attack(net, b, *attack_spec, seed) : b.x;
    const auto g = sample_param_grad(net, x, b.y[0]);
    std::span<const Real> gw(g.data() + p.weight.begin, dim);
    gemm(gw, false, gw, true, F.data(), dim, dim, 1, true);
  }
  return scale(F, Real(1) / static_cast<Real>(subset.size()));
}

std::vector<LayerProfile> saliency_profile(const SaliencyVector& s) {
  std::vector<LayerProfile> out;
  for (const auto& l : s.layers) {
    LayerProfile lp;
    lp.layer_id = l.layer_id;
    lp.param_count = l.rows * l.cols;
    lp.max_score = -std::numeric_limits<Real>::infinity();
    Real total = 0;
    for (std::size_t k = 0; k < lp.param_count; ++k) {
      const Real v = s.scores[l.weight_offset + k];
      total += v;
      lp.max_score = std::max(lp.max_score, v);
    }
    lp.mean_score = total / static_cast<Real>(lp.param_count);
    out.push_back(lp);
  }
  return out;
}

void write_saliency_csv(const Network& net, const SaliencyVector& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SaliencyError("cannot write " + path.string());
  out << "layer,out_channel,within_index,flat_index,score\n";
  char buf[64];
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    const auto& l = s.layers[li];
    const ParamLayer& p = net.param_layers()[li];
    for (std::size_t k = 0; k < l.rows * l.cols; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", s.scores[l.weight_offset + k]);
      out << l.layer_id << ',' << k / l.cols << ',' << k % l.cols << ',' << p.weight.begin + k
          << ',' << buf << '\n';
    }
  }
}

SaliencyVector read_saliency_csv(const Network& net, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SaliencyError("cannot open " + path.string());
  SaliencyVector s = empty_saliency(net, "csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::uint8_t> seen(s.scores.size(), 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field[5];
    for (auto& f : field) std::getline(ls, f, ',');
    const std::size_t flat = std::stoull(field[3]);
    std::size_t w = static_cast<std::size_t>(-1);
    for (const auto& p : net.param_layers()) {
      if (p.weight.contains(flat)) w = p.weight_offset + (flat - p.weight.begin);
    }
    if (w == static_cast<std::size_t>(-1)) {
      throw SaliencyError("saliency row refers to non-weight index " + field[3]);
    }
    s.scores[w] = std::stod(field[4]);
    seen[w] = 1;
    ++rows;
  }
  if (rows != s.scores.size() || std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw SaliencyError("saliency CSV does not cover every weight exactly once");
  }
  return s;
}

void write_profile_csv(const std::vector<LayerProfile>& profile, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SaliencyError("cannot write " + path.string());
  out << "layer,mean_score,max_score,param_count\n";
  char a[64], b[64];
  for (const auto& p : profile) {
    std::snprintf(a, sizeof a, "%.10g", p.mean_score);
    std::snprintf(b, sizeof b, "%.10g", p.max_score);
    out << p.layer_id << ',' << a << ',' << b << ',' << p.param_count << '\n';
  }
}

}  // namespace mad
