#include "bimot/vae.hpp"

#include <cmath>
#include <numeric>

namespace bimot {

template <typename T>
CrossBlock<T> CrossBlock<T>::create(ParamStore<T>& store, const std::string& name, const std::string& group,
                                    std::size_t width, std::size_t heads, std::size_t ffn, Rng& rng) {
  CrossBlock b;
  b.heads = heads;
  b.width = width;
  b.ln_self = LayerNorm<T>::create(store, name + ".ln1", group, width);
  b.qkv = Linear<T>::create(store, name + ".self.qkv", group, width, 3 * width, rng);
  b.self_proj = Linear<T>::create(store, name + ".self.proj", group, width, width, rng);
  b.ln_cross = LayerNorm<T>::create(store, name + ".ln2", group, width);
  b.q = Linear<T>::create(store, name + ".cross.q", group, width, width, rng);
  b.kv = Linear<T>::create(store, name + ".cross.kv", group, width, 2 * width, rng);
  b.cross_proj = Linear<T>::create(store, name + ".cross.proj", group, width, width, rng);
  b.ln_ffn = LayerNorm<T>::create(store, name + ".ln3", group, width);
  b.fc = Linear<T>::create(store, name + ".ffn.fc", group, width, ffn, rng);
  b.fc_out = Linear<T>::create(store, name + ".ffn.out", group, ffn, width, rng);
  return b;
}

template <typename T>
Tensor<T> CrossBlock<T>::operator()(const Tensor<T>& x, const AttentionLayout& self_layout, const Tensor<T>& memory,
                                    const AttentionLayout& cross_layout) const {
  Tensor<T> packed = qkv(ln_self(x));
  Tensor<T> h = add(x, self_proj(attention(slice_cols(packed, 0, width), slice_cols(packed, width, 2 * width),
                                           slice_cols(packed, 2 * width, 3 * width), heads, self_layout)));
  Tensor<T> mem = kv(memory);
  h = add(h, cross_proj(attention(q(ln_cross(h)), slice_cols(mem, 0, width), slice_cols(mem, width, 2 * width),
                                  heads, cross_layout)));
  return add(h, fc_out(gelu(fc(ln_ffn(h)))));
}

template <typename T>
MotionVae<T>::MotionVae(const VaeConfig& config, std::uint64_t seed) : config_(config) {
  if (config.width % config.heads != 0) throw ConfigError("vae width must be divisible by heads");
  if (config.min_frames < 1 || config.max_frames < config.min_frames) throw ConfigError("invalid vae frame bounds");
  Rng rng(seed);
  const auto w = static_cast<std::size_t>(config.width);
  const auto d = static_cast<std::size_t>(config.latent);
  const auto ffn = static_cast<std::size_t>(config.ffn);
  const auto heads = static_cast<std::size_t>(config.heads);
  const std::string g = "vae";
  frame_in_ = Linear<T>::create(store_, "vae.enc.frame_in", g, config.dims, w, rng);
  enc_pos_ = store_.normal("vae.enc.pos", g, {static_cast<std::size_t>(config.max_frames) + 2, w}, 0.1, rng);
  dist_tokens_ = store_.normal("vae.enc.dist_tokens", g, {2, w}, 0.1, rng);
  for (int l = 0; l < config.layers; ++l) {
    encoder_.push_back(
        TransformerBlock<T>::create(store_, "vae.enc.layer" + std::to_string(l), g, w, heads, ffn, rng));
  }
  enc_norm_ = LayerNorm<T>::create(store_, "vae.enc.ln_f", g, w);
  mu_head_ = Linear<T>::create(store_, "vae.enc.mu", g, w, d, rng);
  sigma_head_ = Linear<T>::create(store_, "vae.enc.log_sigma", g, w, d, rng);

  memory_proj_ = Linear<T>::create(store_, "vae.dec.memory", g, d, w * config.memory_tokens, rng, 0.1);
  dec_queries_ = store_.normal("vae.dec.queries", g, {static_cast<std::size_t>(config.max_frames), w}, 0.1, rng);
  for (int l = 0; l < config.layers; ++l) {
    decoder_.push_back(CrossBlock<T>::create(store_, "vae.dec.layer" + std::to_string(l), g, w, heads, ffn, rng));
  }
  dec_norm_ = LayerNorm<T>::create(store_, "vae.dec.ln_f", g, w);
  frame_out_ = Linear<T>::create(store_, "vae.dec.frame_out", g, w, config.dims, rng);
}

template <typename T>
void MotionVae<T>::check_length(int frames) const {
  if (frames < config_.min_frames || frames > config_.max_frames) {
    throw ContractError("clip length " + std::to_string(frames) + " outside [" +
                        std::to_string(config_.min_frames) + ", " + std::to_string(config_.max_frames) + "]");
  }
}

// Layer i's input is added to layer N-1-i's input for i < N/2.
template <typename T>
Tensor<T> MotionVae<T>::run_skipped(Tensor<T> h,
                                    const std::function<Tensor<T>(std::size_t, const Tensor<T>&)>& layer) const {
  const std::size_t n = static_cast<std::size_t>(config_.layers);
  std::vector<Tensor<T>> saved;
  for (std::size_t l = 0; l < n; ++l) {
    if (l < n / 2) {
      saved.push_back(h);
    } else if (n - 1 - l < n / 2) {
      h = add(h, saved[n - 1 - l]);
    }
    h = layer(l, h);
  }
  return h;
}

template <typename T>
Tensor<T> MotionVae<T>::stack(std::span<const MotionClip> clips) {
  std::vector<T> values;
  std::size_t rows = 0, dims = clips.empty() ? 0 : static_cast<std::size_t>(clips[0].dims);
  for (const auto& c : clips) {
    if (static_cast<std::size_t>(c.dims) != dims) throw ShapeError("clips in a batch must share dims");
    values.insert(values.end(), c.values.begin(), c.values.end());
    rows += static_cast<std::size_t>(c.frames);
  }
  return Tensor<T>({rows, dims}, std::move(values));
}

template <typename T>
LatentDistribution<T> MotionVae<T>::encode(std::span<const MotionClip> clips) const {
  if (clips.empty()) throw ContractError("encode needs at least one clip");
  const std::size_t batch = clips.size();
  for (const auto& c : clips) {
    check_length(c.frames);
    if (c.dims != config_.dims) throw ShapeError("clip dims " + std::to_string(c.dims) + " != vae dims");
  }
  // Per clip: [mu token, sigma token, frames...].
  std::vector<int> token_ids(2 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    token_ids[2 * b] = 0;
    token_ids[2 * b + 1] = 1;
  }
  Tensor<T> parts = concat_rows<T>({embedding_lookup(dist_tokens_, token_ids), frame_in_(stack(clips))});
  std::vector<std::size_t> order;
  std::vector<int> positions;
  AttentionLayout layout;
  std::vector<std::size_t> mu_rows, sigma_rows;
  std::size_t frame_row = 2 * batch;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t begin = order.size();
    const auto len = static_cast<std::size_t>(clips[b].frames);
    mu_rows.push_back(begin);
    sigma_rows.push_back(begin + 1);
    order.push_back(2 * b);
    order.push_back(2 * b + 1);
    for (std::size_t f = 0; f < len; ++f) order.push_back(frame_row++);
    for (std::size_t p = 0; p < len + 2; ++p) positions.push_back(static_cast<int>(p));
    layout.segments.push_back({begin, len + 2, begin, len + 2});
  }
  Tensor<T> h = add(index_select(parts, order), embedding_lookup(enc_pos_, positions));
  h = run_skipped(h, [&](std::size_t l, const Tensor<T>& x) { return encoder_[l](x, layout); });
  h = enc_norm_(h);
  LatentDistribution<T> dist;
  dist.mu = mu_head_(index_select(h, mu_rows));
  dist.log_sigma = clamp(sigma_head_(index_select(h, sigma_rows)), T(-kLogSigmaBound), T(kLogSigmaBound));
  return dist;
}

template <typename T>
Tensor<T> MotionVae<T>::decode(const Tensor<T>& z, std::span<const int> lengths) const {
  const std::size_t batch = lengths.size();
  if (z.rank() != 2 || z.dim(0) != batch || z.dim(1) != static_cast<std::size_t>(config_.latent)) {
    throw ShapeError("decode: z " + shape_str(z.shape()) + " does not match " + std::to_string(batch) +
                     " lengths and latent " + std::to_string(config_.latent));
  }
  const auto k = static_cast<std::size_t>(config_.memory_tokens);
  const auto w = static_cast<std::size_t>(config_.width);
  Tensor<T> memory = reshape(memory_proj_(z), {batch * k, w});
  std::vector<int> positions;
  AttentionLayout self_layout, cross_layout;
  for (std::size_t b = 0; b < batch; ++b) {
    check_length(lengths[b]);
    const std::size_t begin = positions.size();
    const auto len = static_cast<std::size_t>(lengths[b]);
    for (std::size_t p = 0; p < len; ++p) positions.push_back(static_cast<int>(p));
    self_layout.segments.push_back({begin, len, begin, len});
    cross_layout.segments.push_back({begin, len, b * k, k});
  }
  Tensor<T> h = embedding_lookup(dec_queries_, positions);
  h = run_skipped(h, [&](std::size_t l, const Tensor<T>& x) {
    return decoder_[l](x, self_layout, memory, cross_layout);
  });
  return frame_out_(dec_norm_(h));
}

template <typename T>
Tensor<T> MotionVae<T>::reparameterize(const LatentDistribution<T>& dist, Rng& rng) {
  std::vector<T> eps(dist.mu.numel());
  for (auto& e : eps) e = static_cast<T>(gaussian(rng));
  return add(dist.mu, mul(exp(dist.log_sigma), Tensor<T>(dist.mu.shape(), std::move(eps))));
}

template <typename T>
VaeLoss<T> MotionVae<T>::loss(const Tensor<T>& target, const Tensor<T>& recon, const LatentDistribution<T>& dist,
                              double kl_weight) const {
  VaeLoss<T> out;
  out.recon = config_.smooth_l1 ? smooth_l1(recon, target) : mse(recon, target);
  const Tensor<T> two_ls = scale(dist.log_sigma, T(2));
  const Tensor<T> terms = sub(add(mul(dist.mu, dist.mu), exp(two_ls)), add_scalar(two_ls, T(1)));
  out.kl = scale(sum(terms), static_cast<T>(0.5 / static_cast<double>(dist.mu.dim(0))));
  out.total = add(out.recon, scale(out.kl, static_cast<T>(kl_weight)));
  return out;
}

template <typename T>
std::vector<double> MotionVae<T>::encode_mean(const MotionClip& clip) const {
  NoGradScope<T> no_grad;
  return encode(std::span<const MotionClip>(&clip, 1)).mu.to_vector();
}

template <typename T>
MotionClip MotionVae<T>::decode_clip(std::span<const double> z, int frames) const {
  NoGradScope<T> no_grad;
  Tensor<T> zt({1, z.size()}, std::vector<T>(z.begin(), z.end()));
  const int lengths[] = {frames};
  const Tensor<T> out = decode(zt, lengths);
  MotionClip clip{frames, config_.dims, kFps, out.to_vector()};
  return clip;
}

double gaussian_kl(std::span<const double> mu, std::span<const double> log_sigma) {
  double kl = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    kl += mu[i] * mu[i] + std::exp(2 * log_sigma[i]) - 1 - 2 * log_sigma[i];
  }
  return 0.5 * kl;
}

template struct CrossBlock<float>;
template struct CrossBlock<double>;
template class MotionVae<float>;
template class MotionVae<double>;

}  // namespace bimot
