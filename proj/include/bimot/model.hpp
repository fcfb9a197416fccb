#pragma once

// Everything needed to go from text to motion and back: vocabulary, feature
// and latent statistics, the frozen VAE, the backbone and the diffusion head.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bimot/backbone.hpp"
#include "bimot/corpus.hpp"
#include "bimot/diffusion.hpp"
#include "bimot/vae.hpp"

namespace bimot {

// Per-dimension standardization of VAE means, so diffusion targets are roughly unit scale.
struct LatentStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static LatentStats compute(const std::vector<std::vector<double>>& latents);
  std::vector<double> standardize(std::span<const double> z) const;
  std::vector<double> destandardize(std::span<const double> z) const;
};

struct ModelConfig {
  BackboneConfig backbone;
  DiffusionConfig diffusion;
  VaeConfig vae;
  int holders = 4;

  // Fills vocab/latent/cond sizes that must agree across components.
  void link(const Vocabulary& vocab);
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);
};

struct GeneratedMotion {
  std::vector<double> latent;  // standardized latent space
  HybridSequence sequence;     // prompt + H holders + <eom>
};

template <typename T>
class MotionModel {
 public:
  MotionModel(const ModelConfig& config, Vocabulary vocab, MotionStats motion_stats, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const MotionStats& motion_stats() const { return motion_stats_; }
  const LatentStats& latent_stats() const { return latent_stats_; }
  void set_latent_stats(LatentStats stats) { latent_stats_ = std::move(stats); }

  MotionVae<T>& vae() { return vae_; }
  const MotionVae<T>& vae() const { return vae_; }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  DiffusionHead<T>& diffusion() { return diffusion_; }
  const DiffusionHead<T>& diffusion() const { return diffusion_; }

  // Raw clip -> standardized latent (VAE mean); frames beyond the VAE maximum are dropped.
  std::vector<double> encode(const MotionClip& raw) const;
  // Standardized latent -> raw clip of the given length.
  MotionClip decode(std::span<const double> latent, int frames) const;

  // seq must end at <som>. One backbone forward for all holders, then diffusion sampling.
  GeneratedMotion generate_motion(HybridSequence seq, const SamplerSettings& settings) const;

  MotionClip text_to_motion(const std::string& caption, int frames, const SamplerSettings& settings,
                            int phrasing = 0) const;
  std::string caption(const MotionClip& raw, const TextSampler& sampler, int phrasing = 0, int max_len = 48) const;
  // Continues a clip from its first half; returns a clip of the given length.
  MotionClip predict(const MotionClip& raw, int frames, const SamplerSettings& settings, int phrasing = 0) const;

  void save_to(ArrayArchive& archive) const;
  static MotionModel from_archive(const ArrayArchive& archive);
  // Overwrites parameters and latent statistics; the architecture must match.
  void load_params(const ArrayArchive& archive);

  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& metadata = {}) const;
  static MotionModel load(const std::filesystem::path& path, std::map<std::string, std::string>* metadata = nullptr);

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  MotionStats motion_stats_;
  LatentStats latent_stats_;
  MotionVae<T> vae_;
  Backbone<T> backbone_;
  DiffusionHead<T> diffusion_;
};

// First ceil(ratio * frames) frames of a clip (at least min_frames).
MotionClip clip_prefix(const MotionClip& clip, double ratio, int min_frames);

}  // namespace bimot
