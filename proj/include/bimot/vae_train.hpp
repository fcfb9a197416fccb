#pragma once

#include <filesystem>
#include <functional>
#include <span>

#include "bimot/corpus.hpp"
#include "bimot/vae.hpp"

namespace bimot {

struct VaeTrainConfig {
  int steps = 5000;
  int batch = 32;
  double lr = 1e-3;
  double warmup_frac = 0.05;
  // Cosine decay to this fraction of lr by the last step; 1 keeps lr constant.
  double final_lr_frac = 0.05;
  // KL weight ramps linearly from 0 over this fraction of the steps.
  double kl_warmup_frac = 0.1;
  // Probability that a training clip is replaced by a random-length prefix of it.
  double crop_prob = 0.5;
  double clip_norm = 1.0;
  int eval_every = 500;
  std::uint64_t seed = 7;
  std::filesystem::path metrics_csv;
};

struct VaeReport {
  double val_mse = 0;
  double val_kl = 0;
  int best_step = 0;
  double seconds = 0;
};

// Mean squared reconstruction error (standardized units) decoding the posterior mean.
template <typename T>
double vae_reconstruction_mse(const MotionVae<T>& vae, std::span<const MotionClip> clips);

// Per-joint mean L2 error over the clips, root first.
template <typename T>
std::vector<double> vae_joint_errors(const MotionVae<T>& vae, std::span<const MotionClip> clips);

/// Trains in place and restores the best-validation weights before returning.
/// `train` and `val` must be standardized.
template <typename T>
VaeReport train_vae(MotionVae<T>& vae, std::span<const MotionClip> train, std::span<const MotionClip> val,
                    const VaeTrainConfig& config, const std::function<void(const std::string&)>& log = {});

std::vector<MotionClip> standardized_clips(std::span<const CorpusRecord> records, const MotionStats& stats);

}  // namespace bimot
