#include "bimot/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace bimot {

int BackboneConfig::motion_ffn() const {
  return std::max(1, static_cast<int>(std::lround(motion_ffn_ratio * ffn)));
}

bool BackboneConfig::layer_shared(int layer) const {
  return shared_layers.empty() || shared_layers.at(static_cast<std::size_t>(layer)) != 0;
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  if (config.vocab <= 4) throw ConfigError("backbone vocabulary must include the four motion tokens");
  if (config.width % config.heads != 0) throw ConfigError("backbone width must be divisible by heads");
  if (!config.shared_layers.empty() && static_cast<int>(config.shared_layers.size()) != config.layers) {
    throw ConfigError("attention placement must list one flag per layer");
  }
  Rng rng(seed);
  const auto w = static_cast<std::size_t>(config.width);
  const auto v_base = static_cast<std::size_t>(config.vocab - 4);
  const auto heads = static_cast<std::size_t>(config.heads);
  const double std_w = 1.0 / std::sqrt(static_cast<double>(w));
  const double resid = std_w / std::sqrt(2.0 * config.layers);

  wte_base_ = store_.normal("text.wte", kTextBaseGroup, {v_base, w}, 0.1, rng);
  wpe_ = store_.normal("text.wpe", kTextBaseGroup, {static_cast<std::size_t>(config.context), w}, 0.05, rng);
  for (int l = 0; l < config.layers; ++l) {
    text_layers_.push_back(TransformerBlock<T>::create(store_, "text.layer" + std::to_string(l), kTextBaseGroup, w,
                                                       heads, static_cast<std::size_t>(config.ffn), rng, std_w,
                                                       resid));
  }
  text_norm_ = LayerNorm<T>::create(store_, "text.ln_f", kTextBaseGroup, w);
  head_base_ = store_.normal("text.lm_head", kTextBaseGroup, {w, v_base}, std_w, rng);

  wte_special_ = store_.normal("text.wte_motion_tokens", kTextSpecialGroup, {4, w}, 0.1, rng);
  head_special_ = store_.normal("text.lm_head_motion_tokens", kTextSpecialGroup, {w, 4}, std_w, rng);

  holder_embedding_ = store_.normal("motion.holder", kMotionGroup, {1, w}, 0.1, rng);
  und_fc1_ = Linear<T>::create(store_, "motion.und.fc1", kMotionGroup, static_cast<std::size_t>(config.latent), w,
                               rng, 1.0 / std::sqrt(static_cast<double>(config.latent)));
  und_fc2_ = Linear<T>::create(store_, "motion.und.fc2", kMotionGroup, w, w, rng, std_w);
  for (int l = 0; l < config.layers; ++l) {
    motion_layers_.push_back(TransformerBlock<T>::create(store_, "motion.layer" + std::to_string(l), kMotionGroup,
                                                         w, heads, static_cast<std::size_t>(config.motion_ffn()),
                                                         rng, std_w, resid));
  }
  motion_norm_ = LayerNorm<T>::create(store_, "motion.ln_f", kMotionGroup, w);
  proj_fc1_ = Linear<T>::create(store_, "motion.proj.fc1", kMotionGroup, w, w, rng, std_w);
  proj_fc2_ = Linear<T>::create(store_, "motion.proj.fc2", kMotionGroup, w, static_cast<std::size_t>(config.cond_dim),
                                rng, std_w);
}

template <typename T>
Tensor<T> Backbone<T>::text_logits(const Tensor<T>& normed) const {
  return concat_cols<T>({matmul(normed, head_base_), matmul(normed, head_special_)});
}

template <typename T>
Tensor<T> Backbone<T>::und_head(const Tensor<T>& z) const {
  return und_fc2_(gelu(und_fc1_(z)));
}

template <typename T>
Tensor<T> Backbone<T>::proj_head(const Tensor<T>& states) const {
  return proj_fc2_(gelu(proj_fc1_(states)));
}

template <typename T>
BackboneOutput<T> Backbone<T>::forward(std::span<const HybridSequence> batch) const {
  ++forward_count_;
  const int holder_in = config_.vocab - 2, holder_out = config_.vocab - 1;
  BackboneOutput<T> out;
  std::vector<int> text_ids, text_pos, motion_pos;
  std::vector<std::size_t> motion_src;  // per motion row: latent row, or n_latents for a holder
  std::vector<T> latent_values;
  std::size_t n_latents = 0;
  std::vector<std::uint8_t> stream;
  AttentionLayout shared_layout, isolated_layout;
  std::size_t offset = 0;
  for (const auto& seq : batch) {
    const std::size_t k = seq.size();
    if (k == 0) throw ContractError("empty hybrid sequence");
    if (k > static_cast<std::size_t>(config_.context)) {
      throw ContractError("sequence length " + std::to_string(k) + " exceeds context " +
                          std::to_string(config_.context));
    }
    out.offsets.push_back(offset);
    shared_layout.segments.push_back({offset, k, offset, k});
    for (std::size_t i = 0; i < k; ++i) {
      const HybridItem& it = seq.items[i];
      if (it.token < 0 || it.token >= config_.vocab) throw IndexError("token id out of range in hybrid sequence");
      stream.push_back(static_cast<std::uint8_t>(it.modality));
      if (it.modality == Modality::kText) {
        if (it.token == holder_in || it.token == holder_out) {
          throw ContractError("motion placeholder routed to the text branch at position " + std::to_string(i));
        }
        out.text_rows.push_back(offset + i);
        text_ids.push_back(it.token);
        text_pos.push_back(static_cast<int>(i));
      } else {
        out.motion_rows.push_back(offset + i);
        motion_pos.push_back(static_cast<int>(i));
        if (it.token == holder_in) {
          if (it.latent < 0 || it.latent >= static_cast<int>(seq.latents.size())) {
            throw ContractError("<mholder_in> at position " + std::to_string(i) + " has no latent");
          }
          const auto& z = seq.latents[static_cast<std::size_t>(it.latent)];
          if (z.size() != static_cast<std::size_t>(config_.latent)) throw ShapeError("input latent has wrong size");
          latent_values.insert(latent_values.end(), z.begin(), z.end());
          motion_src.push_back(n_latents++);
        } else if (it.token == holder_out) {
          motion_src.push_back(static_cast<std::size_t>(-1));
        } else {
          throw ContractError("motion-routed item must be a placeholder token");
        }
      }
    }
    offset += k;
  }
  for (auto& s : motion_src) {
    if (s == static_cast<std::size_t>(-1)) s = n_latents;
  }
  isolated_layout = shared_layout;
  isolated_layout.causal = true;
  isolated_layout.stream = stream;
  shared_layout.causal = true;

  const std::size_t total = offset;
  const auto w = static_cast<std::size_t>(config_.width);
  const bool has_text = !text_ids.empty();
  const bool has_motion = !motion_src.empty();

  Tensor<T> xt, xm;
  if (has_text) {
    xt = add(embedding_lookup(concat_rows<T>({wte_base_, wte_special_}), text_ids), embedding_lookup(wpe_, text_pos));
  }
  if (has_motion) {
    std::vector<Tensor<T>> parts;
    if (n_latents > 0) {
      parts.push_back(und_head(Tensor<T>({n_latents, static_cast<std::size_t>(config_.latent)}, latent_values)));
    }
    parts.push_back(holder_embedding_);
    xm = add(index_select(parts.size() == 1 ? parts[0] : concat_rows<T>(parts), motion_src),
             embedding_lookup(wpe_, motion_pos));
  }

  for (int l = 0; l < config_.layers; ++l) {
    const auto& tb = text_layers_[static_cast<std::size_t>(l)];
    const auto& mb = motion_layers_[static_cast<std::size_t>(l)];
    Tensor<T> merged(Shape{total, 3 * w});
    if (has_text) merged = scatter_by_index(merged, tb.qkv(tb.ln_attn(xt)), out.text_rows);
    if (has_motion) merged = scatter_by_index(merged, mb.qkv(mb.ln_attn(xm)), out.motion_rows);
    const Tensor<T> attn =
        attention(slice_cols(merged, 0, w), slice_cols(merged, w, 2 * w), slice_cols(merged, 2 * w, 3 * w),
                  static_cast<std::size_t>(config_.heads), config_.layer_shared(l) ? shared_layout : isolated_layout);
    if (has_text) {
      xt = add(xt, tb.proj(index_select(attn, out.text_rows)));
      xt = add(xt, tb.feed_forward(xt));
    }
    if (has_motion) {
      xm = add(xm, mb.proj(index_select(attn, out.motion_rows)));
      xm = add(xm, mb.feed_forward(xm));
    }
  }
  if (has_text) out.logits = text_logits(text_norm_(xt));
  if (has_motion) out.motion_states = motion_norm_(xm);
  return out;
}

template <typename T>
Tensor<T> Backbone<T>::text_only_logits(std::span<const int> tokens) const {
  if (tokens.empty() || tokens.size() > static_cast<std::size_t>(config_.context)) {
    throw ContractError("text sequence length outside (0, context]");
  }
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Tensor<T> x = add(embedding_lookup(concat_rows<T>({wte_base_, wte_special_}), tokens), embedding_lookup(wpe_, pos));
  AttentionLayout layout;
  layout.causal = true;
  layout.segments.push_back({0, tokens.size(), 0, tokens.size()});
  for (const auto& block : text_layers_) x = block(x, layout);
  return text_logits(text_norm_(x));
}

template <typename T>
Tensor<T> Backbone<T>::holder_conditions(const BackboneOutput<T>& out, std::span<const HybridSequence> batch,
                                         std::size_t holders) const {
  const int holder_out = config_.vocab - 1;
  std::vector<std::size_t> rows;
  std::size_t motion_row = 0;
  for (const auto& seq : batch) {
    std::size_t found = 0;
    for (const auto& it : seq.items) {
      if (it.modality != Modality::kMotion) continue;
      if (it.token == holder_out) {
        rows.push_back(motion_row);
        ++found;
      }
      ++motion_row;
    }
    if (found != 0 && found != holders) {
      throw ContractError("expected " + std::to_string(holders) + " holder states, sequence has " +
                          std::to_string(found));
    }
  }
  if (rows.empty()) throw ContractError("no holder states to project");
  return proj_head(index_select(out.motion_states, rows));
}

template <typename T>
HybridSequence generate_text(const Backbone<T>& model, const Vocabulary& vocab, HybridSequence seq,
                             const TextSampler& sampler, int max_len) {
  NoGradScope<T> no_grad;
  Rng rng(sampler.seed);
  const std::vector<int> banned{vocab.holder_in(), vocab.holder_out(), vocab.pad(), vocab.bos()};
  while (static_cast<int>(seq.size()) < max_len) {
    if (seq.items.back().modality != Modality::kText) {
      throw ContractError("text generation needs a prompt ending in a text token");
    }
    const auto out = model.forward(std::span<const HybridSequence>(&seq, 1));
    const std::size_t v = out.logits.cols();
    const std::size_t last = out.logits.rows() - 1;
    std::vector<double> logits(v);
    for (std::size_t j = 0; j < v; ++j) logits[j] = out.logits.at(last, j);
    for (int b : banned) logits[static_cast<std::size_t>(b)] = -1e30;
    int next = 0;
    if (sampler.kind == SamplerKind::kGreedy) {
      next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      std::vector<int> idx(v);
      for (std::size_t j = 0; j < v; ++j) idx[j] = static_cast<int>(j);
      std::size_t keep = v;
      if (sampler.kind == SamplerKind::kTopK) {
        keep = std::min<std::size_t>(v, static_cast<std::size_t>(std::max(1, sampler.top_k)));
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                          [&](int a, int b) { return logits[a] > logits[b]; });
      }
      const double temp = std::max(1e-6, sampler.temperature);
      double top = -1e300;
      for (std::size_t j = 0; j < keep; ++j) top = std::max(top, logits[idx[j]]);
      std::vector<double> p(keep);
      double z = 0;
      for (std::size_t j = 0; j < keep; ++j) z += p[j] = std::exp((logits[idx[j]] - top) / temp);
      double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * z;
      next = idx[keep - 1];
      for (std::size_t j = 0; j < keep; ++j) {
        u -= p[j];
        if (u <= 0) {
          next = idx[j];
          break;
        }
      }
    }
    seq.push_text(next);
    if (next == vocab.eos() || next == vocab.som()) break;
  }
  return seq;
}

template class Backbone<float>;
template class Backbone<double>;
template HybridSequence generate_text<float>(const Backbone<float>&, const Vocabulary&, HybridSequence,
                                             const TextSampler&, int);
template HybridSequence generate_text<double>(const Backbone<double>&, const Vocabulary&, HybridSequence,
                                              const TextSampler&, int);

}  // namespace bimot
