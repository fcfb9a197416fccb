#pragma once

// Contrastive text/motion embedder used for retrieval, FID and diversity.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bimot/corpus.hpp"
#include "bimot/metrics.hpp"
#include "bimot/nn.hpp"
#include "bimot/vocab.hpp"

namespace bimot {

struct EvaluatorConfig {
  int embed = 32;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 128;
  double temperature = 0.07;
  int max_tokens = 32;
  int max_frames = 64;
};

struct EvaluatorTrainConfig {
  int steps = 1200;
  int batch = 32;
  double lr = 1e-3;
  double warmup_frac = 0.05;
  std::uint64_t seed = 5;
  // Negative control: pair each caption with a random clip.
  bool shuffle_pairs = false;
  double min_margin = 0.2;
  std::filesystem::path metrics_csv;
};

struct EvaluatorFit {
  double matched_cosine = 0;
  double mismatched_cosine = 0;
  double margin() const { return matched_cosine - mismatched_cosine; }
};

class Evaluator {
 public:
  Evaluator(const EvaluatorConfig& config, Vocabulary vocab, MotionStats stats, std::uint64_t seed);

  const EvaluatorConfig& config() const { return config_; }
  ParamStore<float>& params() { return store_; }

  // L2-normalized embeddings, one row per input.
  Tensor<float> embed_text(std::span<const std::string> captions) const;
  Tensor<float> embed_motion(std::span<const MotionClip> raw_clips) const;
  Features text_features(std::span<const std::string> captions) const;
  Features motion_features(std::span<const MotionClip> raw_clips) const;

  // Symmetric InfoNCE over a batch of pairs.
  Tensor<float> contrastive_loss(std::span<const std::string> captions, std::span<const MotionClip> raw_clips) const;
  EvaluatorFit fit(std::span<const CorpusRecord> records) const;

  void save(const std::filesystem::path& path, const EvaluatorFit& fit) const;
  static Evaluator load(const std::filesystem::path& path, EvaluatorFit* fit = nullptr);

 private:
  Tensor<float> encode(Tensor<float> x, const std::vector<std::size_t>& lengths,
                       const std::vector<TransformerBlock<float>>& blocks, const LayerNorm<float>& norm,
                       const Linear<float>& out) const;

  EvaluatorConfig config_;
  Vocabulary vocab_;
  MotionStats stats_;
  ParamStore<float> store_;
  Tensor<float> token_embedding_, text_pos_, motion_pos_;
  Linear<float> frame_in_, text_out_, motion_out_;
  std::vector<TransformerBlock<float>> text_blocks_, motion_blocks_;
  LayerNorm<float> text_norm_, motion_norm_;
};

// Trains on `train`, measures the fit on `val`.
EvaluatorFit train_evaluator(Evaluator& evaluator, std::span<const CorpusRecord> train,
                             std::span<const CorpusRecord> val, const EvaluatorTrainConfig& config,
                             const std::function<void(const std::string&)>& log);

// Throws EvaluationError when the margin is below `min_margin`.
void require_fit(const EvaluatorFit& fit, double min_margin = 0.2);

}  // namespace bimot
