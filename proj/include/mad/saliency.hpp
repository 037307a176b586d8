#pragma once

#include "mad/attack.hpp"
#include "mad/dataset.hpp"
#include "mad/mask_opt.hpp"
#include "mad/model.hpp"

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

class SaliencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Kronecker factors of one layer's Fisher block: F ~ Z (x) A.
/// Z is [rows x rows] over output channels, A is [cols x cols] over the
/// receptive field (conv) or input features (fc). Bias is not part of A.
struct KfacFactorPair {
  std::size_t layer_id = 0;  // index into Network::layers()
  Tensor Z;
  Tensor A;
};

struct SaliencyLayer {
  std::size_t layer_id = 0;
  std::size_t weight_offset = 0;  // first weights-only position
  std::size_t rows = 0;           // output channels
  std::size_t cols = 0;           // weights per output channel
  bool is_conv = false;
};

/// Scores over weights only, indexed by weights-only position.
struct SaliencyVector {
  std::string method;
  std::vector<Real> scores;
  std::vector<SaliencyLayer> layers;
  std::size_t n_samples_averaged = 0;
  nlohmann::json meta;  // attack / mask config and sample statistics

  std::size_t layer_of(std::size_t w) const;
};

/// Multiply-accumulate counter for the saliency kernels.
struct OpCounter {
  std::uint64_t macs = 0;
};

SaliencyVector empty_saliency(const Network& net, std::string method);

/// Per-sample factors from a completed forward/backward on `tape`, for
/// parametric layer `param_index`, sample `s` of the batch.
KfacFactorPair factors_from_trace(const Network& net, const Tape& tape, const Trace& trace,
                                  std::size_t param_index, std::size_t s = 0);

/// Forward + backward of CE(f_w(x_adv), y) at the unmasked weights, then the
/// factors of layer `layer_id` (index into Network::layers()). `x_adv` is one sample [1, ...].
KfacFactorPair kfac_factors(const Network& net, const Tensor& x_adv, int y, std::size_t layer_id);

/// Factors for every parametric layer from one forward/backward.
std::vector<KfacFactorPair> kfac_factors_all(const Network& net, const Tensor& x_adv, int y);

/// score[i, j] = (Z_ii / 2) * dW_i[j] * (A dW_i)[j] for one layer, with dW [rows, cols].
void blockwise_scores(std::span<const Real> z_diag, const Tensor& A, std::span<const Real> dW,
                      std::size_t rows, std::size_t cols, std::span<Real> out,
                      OpCounter* ops = nullptr);

/// 0.5 * dw^T (Z (x) A) dw with the dense Z, for comparison with the block-wise form.
Real full_kfac_quadratic(const Tensor& Z, const Tensor& A, std::span<const Real> dW,
                         OpCounter* ops = nullptr);

/// Adversarial saliency of one sample from its optimized mask and factors.
SaliencyVector mad_saliency_per_sample(const Network& net, std::span<const Real> mask,
                                       const std::vector<KfacFactorPair>& factors,
                                       OpCounter* ops = nullptr);

struct MadConfig {
  AttackSpec attack = AttackSpec::pgd(0.1, 7);
  MaskOptConfig mask;
  std::uint64_t seed = 0;
};

/// Full per-sample loop: attack, mask optimization, factors at w, scores;
/// returns the mean over non-excluded samples. Sample n is attacked with
/// seed derive_seed(cfg.seed, {0x5a1, n}).
SaliencyVector mad_saliency(const Network& net, const Dataset& subset, const MadConfig& cfg);

struct BaselineConfig {
  bool adversarial = true;  // Fisher from PGD inputs (default) or clean inputs
  AttackSpec attack = AttackSpec::pgd(0.1, 7);
  std::uint64_t seed = 0;
};

/// 0.5 * w_k^2 * F_kk with F the empirical Fisher diagonal over `subset`.
SaliencyVector obd_saliency(const Network& net, const Dataset& subset, const BaselineConfig& cfg);
/// 0.5 * w_k^2 / [(F + lambda I)^-1]_kk with the exact layer-wise Fisher,
/// lambda = 1e-5 * trace(F) / dim.
SaliencyVector obs_saliency(const Network& net, const Dataset& subset, const BaselineConfig& cfg);
SaliencyVector lwm_saliency(const Network& net);
SaliencyVector random_saliency(const Network& net, std::uint64_t seed);

/// Closed forms on an explicit symmetric Hessian (or Fisher) matrix [d, d].
std::vector<Real> obd_scores(std::span<const Real> w, const Tensor& H);
std::vector<Real> obs_scores(std::span<const Real> w, const Tensor& H);

/// diag((F + lambda I)^-1) for F = (1/N) sum_n g_n g_n^T, with G holding one
/// gradient per row [N, dim]. Dense inversion for small dim, Woodbury otherwise.
std::vector<Real> damped_inverse_diagonal(const Tensor& G, Real lambda, bool force_dense = false);

/// Dense empirical Fisher (1/N) sum g g^T over the weights of `layer_id`.
/// Guarded to layers with at most 4096 weights.
Tensor exact_fisher_oracle(const Network& net, const Dataset& subset, std::size_t layer_id,
                           const std::optional<AttackSpec>& attack = std::nullopt,
                           std::uint64_t seed = 0);

/// Gradient of the single-sample loss with respect to every parameter.
std::vector<Real> sample_param_grad(const Network& net, const Tensor& x, int y);

struct LayerProfile {
  std::size_t layer_id = 0;
  Real mean_score = 0;
  Real max_score = 0;
  std::size_t param_count = 0;
};

std::vector<LayerProfile> saliency_profile(const SaliencyVector& s);

void write_saliency_csv(const Network& net, const SaliencyVector& s, const std::filesystem::path& path);
SaliencyVector read_saliency_csv(const Network& net, const std::filesystem::path& path);
void write_profile_csv(const std::vector<LayerProfile>& profile, const std::filesystem::path& path);

}  // namespace mad
