#pragma once

// Dual-branch decoder-only transformer. Text and motion positions keep their
// own embeddings, projections, feed-forward stacks and norms; attention runs
// over the merged original order (shared) or per branch (isolated).

#include <cstdint>
#include <span>
#include <vector>

#include "bimot/instructions.hpp"
#include "bimot/nn.hpp"

namespace bimot {

inline constexpr const char* kTextBaseGroup = "text.base";
inline constexpr const char* kTextSpecialGroup = "text.special";
inline constexpr const char* kMotionGroup = "motion";

struct BackboneConfig {
  int vocab = 0;  // full size including the four motion tokens
  int layers = 4;
  int width = 64;
  int heads = 4;
  int ffn = 256;
  // Motion-branch FFN width = motion_ffn_ratio * ffn.
  double motion_ffn_ratio = 1.0;
  int latent = 16;
  int cond_dim = 64;
  int holders = 4;
  int context = 256;
  // Per layer: 1 shared attention, 0 isolated. Empty means all shared.
  std::vector<std::uint8_t> shared_layers;

  int motion_ffn() const;
  bool layer_shared(int layer) const;
};

template <typename T>
struct BackboneOutput {
  // Next-token logits at text positions, rows in merged order: [n_text x vocab].
  Tensor<T> logits;
  std::vector<std::size_t> text_rows;  // merged row index of each logits row
  // Final-layer (normed) states at motion positions: [n_motion x width]; undefined if none.
  Tensor<T> motion_states;
  std::vector<std::size_t> motion_rows;
  // Offset of each sequence in merged order.
  std::vector<std::size_t> offsets;
};

template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // Batched forward over independent sequences.
  BackboneOutput<T> forward(std::span<const HybridSequence> batch) const;

  // Text branch alone, no routing machinery: [k x vocab] for an all-text sequence.
  Tensor<T> text_only_logits(std::span<const int> tokens) const;

  // MotionUndHead: latents [n x latent] -> [n x width].
  Tensor<T> und_head(const Tensor<T>& z) const;
  // Projection head over holder states [n x width] -> [n x cond_dim].
  Tensor<T> proj_head(const Tensor<T>& states) const;

  // Condition states for every <mholder_out>, grouped per sequence: [n_out*H x cond_dim].
  // Sequences without holders are skipped; any other count than `holders` throws.
  Tensor<T> holder_conditions(const BackboneOutput<T>& out, std::span<const HybridSequence> batch,
                              std::size_t holders) const;

  long long forward_count() const { return forward_count_; }

 private:
  BackboneConfig config_;
  ParamStore<T> store_;
  Tensor<T> wte_base_, wte_special_, wpe_, holder_embedding_;
  Tensor<T> head_base_, head_special_;
  std::vector<TransformerBlock<T>> text_layers_, motion_layers_;
  LayerNorm<T> text_norm_, motion_norm_;
  Linear<T> und_fc1_, und_fc2_, proj_fc1_, proj_fc2_;
  mutable long long forward_count_ = 0;

  Tensor<T> text_logits(const Tensor<T>& normed) const;
};

enum class SamplerKind { kGreedy, kTopK, kTemperature };

struct TextSampler {
  SamplerKind kind = SamplerKind::kGreedy;
  int top_k = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Appends tokens until <eos>, <som> or max_len total items.
template <typename T>
HybridSequence generate_text(const Backbone<T>& model, const Vocabulary& vocab, HybridSequence prompt,
                             const TextSampler& sampler, int max_len);

}  // namespace bimot
