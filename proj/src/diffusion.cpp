#include "bimot/diffusion.hpp"

#include <cmath>

namespace bimot {

NoiseSchedule NoiseSchedule::make(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
    throw ConfigError("noise schedule needs 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  const double a = std::sqrt(beta_start), b = std::sqrt(beta_end);
  double abar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double r = a + (b - a) * static_cast<double>(i) / static_cast<double>(steps - 1);
    const double beta = i == 0 ? beta_start : r * r;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    abar *= 1.0 - beta;
    s.alpha_bars.push_back(abar);
  }
  return s;
}

void NoiseSchedule::check_t(int t) const {
  if (t < 1 || t > steps) throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
}

double NoiseSchedule::alpha_bar(int t) const {
  check_t(t);
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

std::vector<double> q_sample(const NoiseSchedule& s, std::span<const double> z0, int t, std::span<const double> eps) {
  if (z0.size() != eps.size()) throw ShapeError("q_sample: latent and noise sizes differ");
  const double ab = s.alpha_bar(t);
  const double ca = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = ca * z0[i] + cn * eps[i];
  return out;
}

std::vector<double> predict_z0(const NoiseSchedule& s, std::span<const double> zt, int t,
                               std::span<const double> eps) {
  const double ab = s.alpha_bar(t);
  const double ca = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
  std::vector<double> out(zt.size());
  for (std::size_t i = 0; i < zt.size(); ++i) out[i] = (zt[i] - cn * eps[i]) / ca;
  return out;
}

std::vector<int> sampling_timesteps(int total_steps, int sample_steps) {
  if (sample_steps < 1 || sample_steps > total_steps) {
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(total_steps) + "]");
  }
  std::vector<int> ts;
  for (int k = sample_steps - 1; k >= 0; --k) {
    ts.push_back(1 + static_cast<int>(static_cast<long long>(k) * total_steps / sample_steps));
  }
  return ts;
}

std::vector<double> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[static_cast<std::size_t>(i)] = std::cos(t * freq);
    out[static_cast<std::size_t>(half + i)] = std::sin(t * freq);
  }
  return out;
}

std::vector<double> guide_eps(std::span<const double> eps_uncond, std::span<const double> eps_cond, double omega) {
  if (omega < 0) throw ConfigError("guidance scale must be non-negative");
  if (omega == 1.0) return {eps_cond.begin(), eps_cond.end()};
  if (omega == 0.0) return {eps_uncond.begin(), eps_uncond.end()};
  std::vector<double> out(eps_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + omega * (eps_cond[i] - eps_uncond[i]);
  return out;
}

namespace {

double xavier(std::size_t in, std::size_t out) { return std::sqrt(2.0 / static_cast<double>(in + out)); }

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_) {
  return add(mul(x, add_scalar(scale_, T(1))), shift);
}

}  // namespace

template <typename T>
DiffusionHead<T>::DiffusionHead(const DiffusionConfig& config, std::uint64_t seed)
    : config_(config), schedule_(NoiseSchedule::make(config.train_steps, config.beta_start, config.beta_end)) {
  if (config.cond_dim % config.heads != 0) throw ConfigError("condition dim must be divisible by aggregator heads");
  if (config.time_dim % 2 != 0) throw ConfigError("time embedding dim must be even");
  Rng rng(seed);
  const auto c = static_cast<std::size_t>(config.cond_dim);
  const auto w = static_cast<std::size_t>(config.width);
  const auto d = static_cast<std::size_t>(config.latent);
  const auto td = static_cast<std::size_t>(config.time_dim);
  const std::string g = "diffusion";
  agg_query_ = store_.normal("diff.agg.query", g, {1, c}, 0.02, rng);
  agg_k_ = Linear<T>::create(store_, "diff.agg.k", g, c, c, rng, xavier(c, c));
  agg_v_ = Linear<T>::create(store_, "diff.agg.v", g, c, c, rng, xavier(c, c));
  agg_out_ = Linear<T>::create(store_, "diff.agg.out", g, c, c, rng, xavier(c, c));
  null_cond_ = store_.constant("diff.null_cond", g, {1, c}, T(0));
  time_fc1_ = Linear<T>::create(store_, "diff.time.fc1", g, td, w, rng, 0.02);
  time_fc2_ = Linear<T>::create(store_, "diff.time.fc2", g, w, w, rng, 0.02);
  cond_fc_ = Linear<T>::create(store_, "diff.cond", g, c, w, rng, xavier(c, w));
  in_proj_ = Linear<T>::create(store_, "diff.in", g, d, w, rng, xavier(d, w));
  for (int b = 0; b < config.blocks; ++b) {
    const std::string n = "diff.block" + std::to_string(b);
    blocks_.push_back({Linear<T>::create(store_, n + ".ada", g, w, 3 * w, rng, 0.0),
                       Linear<T>::create(store_, n + ".fc1", g, w, w, rng, xavier(w, w)),
                       Linear<T>::create(store_, n + ".fc2", g, w, w, rng, xavier(w, w))});
  }
  final_modulation_ = Linear<T>::create(store_, "diff.final.ada", g, w, 2 * w, rng, 0.0);
  out_proj_ = Linear<T>::create(store_, "diff.out", g, w, d, rng, 0.0);
  ln_gain_ = Tensor<T>({w}, T(1));
  ln_bias_ = Tensor<T>({w}, T(0));
}

template <typename T>
Tensor<T> DiffusionHead<T>::aggregate(const Tensor<T>& states, std::size_t holders) const {
  if (holders == 0) throw ContractError("condition aggregation needs at least one holder state");
  if (states.rank() != 2 || states.dim(1) != static_cast<std::size_t>(config_.cond_dim) ||
      states.dim(0) % holders != 0) {
    throw ShapeError("aggregate: states " + shape_str(states.shape()) + " incompatible with " +
                     std::to_string(holders) + " holders of dim " + std::to_string(config_.cond_dim));
  }
  const std::size_t batch = states.dim(0) / holders;
  AttentionLayout layout;
  for (std::size_t b = 0; b < batch; ++b) layout.segments.push_back({b, 1, b * holders, holders});
  const std::vector<int> zeros(batch, 0);
  const Tensor<T> q = embedding_lookup(agg_query_, zeros);
  return agg_out_(attention(q, agg_k_(states), agg_v_(states), static_cast<std::size_t>(config_.heads), layout));
}

template <typename T>
Tensor<T> DiffusionHead<T>::denoise(const Tensor<T>& zt, std::span<const int> timesteps, const Tensor<T>& c) const {
  const std::size_t batch = timesteps.size();
  if (zt.rank() != 2 || zt.dim(0) != batch || zt.dim(1) != static_cast<std::size_t>(config_.latent)) {
    throw ShapeError("denoise: z_t " + shape_str(zt.shape()) + " vs " + std::to_string(batch) + " timesteps");
  }
  if (c.rank() != 2 || c.dim(0) != batch || c.dim(1) != static_cast<std::size_t>(config_.cond_dim)) {
    throw ShapeError("denoise: condition " + shape_str(c.shape()) + " vs batch " + std::to_string(batch));
  }
  ++denoise_calls_;
  const auto w = static_cast<std::size_t>(config_.width);
  std::vector<T> temb;
  temb.reserve(batch * static_cast<std::size_t>(config_.time_dim));
  for (int t : timesteps) {
    schedule_.check_t(t);
    for (double v : timestep_embedding(t, config_.time_dim)) temb.push_back(static_cast<T>(v));
  }
  const Tensor<T> te = time_fc2_(silu(time_fc1_(Tensor<T>({batch, static_cast<std::size_t>(config_.time_dim)},
                                                         std::move(temb)))));
  const Tensor<T> y = silu(add(te, cond_fc_(c)));
  Tensor<T> x = in_proj_(zt);
  for (const auto& blk : blocks_) {
    const Tensor<T> mod = blk.modulation(y);
    Tensor<T> h = modulate(layer_norm(x, ln_gain_, ln_bias_), slice_cols(mod, 0, w), slice_cols(mod, w, 2 * w));
    h = blk.fc2(silu(blk.fc1(h)));
    x = add(x, mul(slice_cols(mod, 2 * w, 3 * w), h));
  }
  const Tensor<T> mod = final_modulation_(y);
  return out_proj_(modulate(layer_norm(x, ln_gain_, ln_bias_), slice_cols(mod, 0, w), slice_cols(mod, w, 2 * w)));
}

template <typename T>
Tensor<T> DiffusionHead<T>::loss(const Tensor<T>& z0, const Tensor<T>& c, Rng& rng, double p_drop) const {
  const std::size_t batch = z0.dim(0);
  const auto d = static_cast<std::size_t>(config_.latent);
  if (c.dim(0) != batch) throw ShapeError("diffusion loss: latent and condition batch differ");
  const auto mul_n = static_cast<std::size_t>(std::max(1, config_.batch_mul));
  const std::size_t rows = batch * mul_n;
  std::vector<std::size_t> cond_rows(rows);
  std::vector<int> ts(rows);
  std::vector<T> zt(rows * d), eps(rows * d);
  const auto z0v = z0.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r / mul_n;
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    cond_rows[r] = u < p_drop ? batch : b;
    ts[r] = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(schedule_.steps));
    const double ab = schedule_.alpha_bar(ts[r]);
    const double ca = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < d; ++i) {
      const double e = gaussian(rng);
      eps[r * d + i] = static_cast<T>(e);
      zt[r * d + i] = static_cast<T>(ca * static_cast<double>(z0v[b * d + i]) + cn * e);
    }
  }
  const Tensor<T> cc = index_select(concat_rows<T>({c, null_cond_}), cond_rows);
  const Tensor<T> eps_hat = denoise(Tensor<T>({rows, d}, std::move(zt)), ts, cc);
  return mean(row_sum_squares(sub(eps_hat, Tensor<T>({rows, d}, std::move(eps)))));
}

template <typename T>
std::vector<double> DiffusionHead<T>::sample(const Tensor<T>& c, const SamplerSettings& s) const {
  if (s.omega < 0) throw ConfigError("guidance scale must be non-negative");
  NoGradScope<T> no_grad;
  const auto d = static_cast<std::size_t>(config_.latent);
  Rng rng(s.seed);
  std::vector<double> z(d);
  for (auto& v : z) v = gaussian(rng);
  const auto ts = sampling_timesteps(schedule_.steps, s.steps);
  const bool need_cond = !(s.skip_unused_branch && s.omega == 0.0);
  const bool need_uncond = !(s.skip_unused_branch && s.omega == 1.0);
  std::vector<double> eps_c(d), eps_u(d);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const Tensor<T> zt({1, d}, std::vector<T>(z.begin(), z.end()));
    const int tt[] = {t};
    if (need_cond) eps_c = denoise(zt, tt, c).to_vector();
    if (need_uncond) eps_u = denoise(zt, tt, null_cond_).to_vector();
    const auto eps = guide_eps(eps_u, eps_c, s.omega);
    const double ab = schedule_.alpha_bar(t);
    const double ab_prev = k + 1 < ts.size() ? schedule_.alpha_bar(ts[k + 1]) : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const double coef = beta / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const bool last = k + 1 == ts.size();
    const double sigma = last ? 0.0 : std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < d; ++i) {
      z[i] = inv_sqrt_alpha * (z[i] - coef * eps[i]);
      if (!last) z[i] += s.temperature * sigma * gaussian(rng);
    }
  }
  return z;
}

template class DiffusionHead<float>;
template class DiffusionHead<double>;

}  // namespace bimot
