#pragma once

// Conditional latent DDPM: scaled-linear schedule, AdaLN residual MLP denoiser,
// attention pooling of holder states, ancestral sampling with CFG.

#include <cstdint>
#include <span>
#include <vector>

#include "bimot/nn.hpp"

namespace bimot {

struct NoiseSchedule {
  int steps = 0;
  // Index t-1 holds the value for timestep t in [1, steps].
  std::vector<double> betas, alphas, alpha_bars;

  static NoiseSchedule make(int steps, double beta_start = 0.00085, double beta_end = 0.012);
  double alpha_bar(int t) const;
  void check_t(int t) const;
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
std::vector<double> q_sample(const NoiseSchedule& s, std::span<const double> z0, int t, std::span<const double> eps);
// Inverse of q_sample given the true noise.
std::vector<double> predict_z0(const NoiseSchedule& s, std::span<const double> zt, int t,
                               std::span<const double> eps);

// Evenly strided timesteps, strictly decreasing, ending at 1.
std::vector<int> sampling_timesteps(int total_steps, int sample_steps);

std::vector<double> timestep_embedding(int t, int dim);

struct DiffusionConfig {
  int latent = 16;
  int cond_dim = 64;
  int width = 256;
  int blocks = 3;
  int time_dim = 64;
  int heads = 4;
  int train_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  double p_drop = 0.1;
  // Noise draws per condition in one training batch.
  int batch_mul = 4;
};

struct SamplerSettings {
  int steps = 100;
  double omega = 3.0;
  std::uint64_t seed = 0;
  // Scales the injected posterior noise; 0 gives the deterministic mean path.
  double temperature = 1.0;
  // At omega 0 or 1 only the branch that matters is evaluated.
  bool skip_unused_branch = true;
};

// eps_u + omega (eps_c - eps_u), returning eps_c / eps_u verbatim at omega 1 / 0.
std::vector<double> guide_eps(std::span<const double> eps_uncond, std::span<const double> eps_cond, double omega);

template <typename T>
class DiffusionHead {
 public:
  DiffusionHead(const DiffusionConfig& config, std::uint64_t seed);

  const DiffusionConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // states [batch*H x cond_dim], grouped per item -> [batch x cond_dim].
  Tensor<T> aggregate(const Tensor<T>& states, std::size_t holders) const;
  const Tensor<T>& null_condition() const { return null_cond_; }

  // z_t [B x d], one timestep per row, c [B x cond_dim].
  Tensor<T> denoise(const Tensor<T>& zt, std::span<const int> timesteps, const Tensor<T>& c) const;

  // Mean over draws of ||eps - eps_hat||^2. z0 rows are constants; each row is repeated batch_mul times.
  Tensor<T> loss(const Tensor<T>& z0, const Tensor<T>& c, Rng& rng, double p_drop) const;

  // c [1 x cond_dim] (already aggregated); returns z0.
  std::vector<double> sample(const Tensor<T>& c, const SamplerSettings& settings) const;

  long long denoise_calls() const { return denoise_calls_; }

 private:
  DiffusionConfig config_;
  NoiseSchedule schedule_;
  ParamStore<T> store_;
  Tensor<T> agg_query_, null_cond_;
  Linear<T> agg_k_, agg_v_, agg_out_;
  Linear<T> time_fc1_, time_fc2_, cond_fc_, in_proj_;
  struct Block {
    Linear<T> modulation, fc1, fc2;
  };
  std::vector<Block> blocks_;
  Linear<T> final_modulation_, out_proj_;
  Tensor<T> ln_gain_, ln_bias_;
  mutable long long denoise_calls_ = 0;
};

}  // namespace bimot
