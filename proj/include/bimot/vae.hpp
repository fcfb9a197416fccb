#pragma once

// Transformer VAE: one continuous latent per variable-length clip.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bimot/corpus.hpp"
#include "bimot/nn.hpp"

namespace bimot {

struct VaeConfig {
  int dims = kMotionDims;
  int latent = 16;
  int width = 64;
  int layers = 4;
  int heads = 4;
  int ffn = 128;
  // z is projected to this many decoder memory tokens.
  int memory_tokens = 4;
  int min_frames = 8;
  int max_frames = 64;
  double kl_weight = 1e-4;
  bool smooth_l1 = false;
};

inline constexpr double kLogSigmaBound = 10.0;

template <typename T>
struct LatentDistribution {
  Tensor<T> mu;         // [B x d]
  Tensor<T> log_sigma;  // [B x d], clamped
};

template <typename T>
struct VaeLoss {
  Tensor<T> total, recon, kl;
};

/// Pre-norm block with an extra cross-attention sublayer onto memory rows.
template <typename T>
struct CrossBlock {
  LayerNorm<T> ln_self, ln_cross, ln_ffn;
  Linear<T> qkv, self_proj, q, kv, cross_proj, fc, fc_out;
  std::size_t heads = 1, width = 0;

  static CrossBlock create(ParamStore<T>& store, const std::string& name, const std::string& group,
                           std::size_t width, std::size_t heads, std::size_t ffn, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, const AttentionLayout& self_layout, const Tensor<T>& memory,
                       const AttentionLayout& cross_layout) const;
};

template <typename T>
class MotionVae {
 public:
  MotionVae(const VaeConfig& config, std::uint64_t seed);

  const VaeConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // Clips must already be standardized. Throws ContractError for lengths outside bounds.
  LatentDistribution<T> encode(std::span<const MotionClip> clips) const;
  // Rows of every clip stacked frame-major: [sum(lengths) x dims].
  Tensor<T> decode(const Tensor<T>& z, std::span<const int> lengths) const;

  static Tensor<T> reparameterize(const LatentDistribution<T>& dist, Rng& rng);
  // Stacked clip values as a constant tensor, matching decode's layout.
  static Tensor<T> stack(std::span<const MotionClip> clips);
  VaeLoss<T> loss(const Tensor<T>& target, const Tensor<T>& recon, const LatentDistribution<T>& dist,
                  double kl_weight) const;

  // Inference helpers (no tape).
  std::vector<double> encode_mean(const MotionClip& clip) const;
  MotionClip decode_clip(std::span<const double> z, int frames) const;

 private:
  void check_length(int frames) const;
  Tensor<T> run_skipped(Tensor<T> h, const std::function<Tensor<T>(std::size_t, const Tensor<T>&)>& layer) const;

  VaeConfig config_;
  ParamStore<T> store_;
  Linear<T> frame_in_, mu_head_, sigma_head_, memory_proj_, frame_out_;
  Tensor<T> enc_pos_, dist_tokens_, dec_queries_;
  std::vector<TransformerBlock<T>> encoder_;
  std::vector<CrossBlock<T>> decoder_;
  LayerNorm<T> enc_norm_, dec_norm_;
};

// KL(N(mu, sigma^2) || N(0, I)) per row, closed form; exposed for tests.
double gaussian_kl(std::span<const double> mu, std::span<const double> log_sigma);

}  // namespace bimot
