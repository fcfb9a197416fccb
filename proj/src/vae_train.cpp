#include "bimot/vae_train.hpp"

#include <chrono>
#include <cmath>
#include <fmt/format.h>

#include "bimot/metrics_log.hpp"
#include "bimot/optim.hpp"

namespace bimot {

namespace {

constexpr std::size_t kEvalChunk = 64;

template <typename T>
std::vector<double> decode_means(const MotionVae<T>& vae, std::span<const MotionClip> clips) {
  NoGradScope<T> no_grad;
  std::vector<double> out;
  for (std::size_t i = 0; i < clips.size(); i += kEvalChunk) {
    const auto chunk = clips.subspan(i, std::min(kEvalChunk, clips.size() - i));
    std::vector<int> lengths;
    for (const auto& c : chunk) lengths.push_back(c.frames);
    const auto recon = vae.decode(vae.encode(chunk).mu, lengths);
    out.insert(out.end(), recon.values().begin(), recon.values().end());
  }
  return out;
}

}  // namespace

template <typename T>
double vae_reconstruction_mse(const MotionVae<T>& vae, std::span<const MotionClip> clips) {
  if (clips.empty()) throw EvaluationError("reconstruction MSE over an empty set");
  const auto recon = decode_means(vae, clips);
  double err = 0;
  std::size_t k = 0;
  for (const auto& c : clips) {
    for (double v : c.values) {
      const double d = recon[k++] - v;
      err += d * d;
    }
  }
  return err / static_cast<double>(k);
}

template <typename T>
std::vector<double> vae_joint_errors(const MotionVae<T>& vae, std::span<const MotionClip> clips) {
  if (clips.empty()) throw EvaluationError("joint errors over an empty set");
  const auto recon = decode_means(vae, clips);
  const int joints = clips[0].dims / 3;
  std::vector<double> err(static_cast<std::size_t>(joints), 0.0);
  double frames = 0;
  std::size_t k = 0;
  for (const auto& c : clips) {
    for (int f = 0; f < c.frames; ++f) {
      for (int j = 0; j < joints; ++j) {
        double sq = 0;
        for (int a = 0; a < 3; ++a) {
          const double d = recon[k + static_cast<std::size_t>(3 * j + a)] - c.at(f, 3 * j + a);
          sq += d * d;
        }
        err[static_cast<std::size_t>(j)] += std::sqrt(sq);
      }
      k += static_cast<std::size_t>(c.dims);
      frames += 1;
    }
  }
  for (auto& e : err) e /= frames;
  return err;
}

template <typename T>
VaeReport train_vae(MotionVae<T>& vae, std::span<const MotionClip> train, std::span<const MotionClip> val,
                    const VaeTrainConfig& config, const std::function<void(const std::string&)>& log) {
  if (train.empty() || val.empty()) throw ConfigError("vae training needs non-empty train and val clips");
  const auto start = std::chrono::steady_clock::now();
  const VaeConfig& vc = vae.config();
  AdamW<T> opt;
  MetricsLog metrics(config.metrics_csv, {"step", "loss", "recon", "kl", "kl_weight", "grad_norm", "val_mse"});
  const auto warmup = static_cast<long long>(config.warmup_frac * config.steps);
  const double kl_ramp = std::max(1.0, config.kl_warmup_frac * config.steps);

  VaeReport report;
  report.val_mse = std::numeric_limits<double>::infinity();
  std::vector<std::vector<T>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : vae.params().params()) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  };

  for (int step = 0; step < config.steps; ++step) {
    Rng rng(config.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(step));
    std::vector<MotionClip> batch;
    std::vector<int> lengths;
    for (int b = 0; b < config.batch; ++b) {
      const MotionClip& c = train[rng() % train.size()];
      const int len = std::min(c.frames, vc.max_frames);
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      // Clips are functions of time from t=0, so only prefixes stay on the data manifold.
      if (u < config.crop_prob && len > vc.min_frames) {
        const auto extra = rng() % static_cast<std::uint64_t>(len - vc.min_frames + 1);
        batch.push_back(c.prefix(vc.min_frames + static_cast<int>(extra)));
      } else {
        batch.push_back(c.prefix(len));
      }
      lengths.push_back(batch.back().frames);
    }
    const double kl_weight = vc.kl_weight * std::min(1.0, (step + 1) / kl_ramp);

    Tape<T> tape;
    VaeLoss<T> loss;
    {
      TapeScope<T> scope(tape);
      const auto dist = vae.encode(batch);
      const auto z = MotionVae<T>::reparameterize(dist, rng);
      const auto recon = vae.decode(z, lengths);
      loss = vae.loss(MotionVae<T>::stack(batch), recon, dist, kl_weight);
    }
    if (!(loss.kl.item() >= T(-1e-4))) throw DataError("negative KL term during vae training");
    vae.params().zero_grad();
    tape.backward(loss.total);
    const double gnorm = clip_grad_norm(vae.params(), config.clip_norm);
    opt.step(vae.params(), warmup_cosine_lr(config.lr, step, warmup, config.steps, config.final_lr_frac));

    const bool eval = (step + 1) % config.eval_every == 0 || step + 1 == config.steps;
    std::string val_cell;
    if (eval) {
      const double v = vae_reconstruction_mse(vae, val);
      val_cell = fmt::format("{:.6g}", v);
      if (v < report.val_mse) {
        report.val_mse = v;
        report.best_step = step + 1;
        snapshot();
      }
      if (log) {
        log(fmt::format("vae step {:5d}  loss {:.4f}  recon {:.4f}  kl {:.3f}  val_mse {:.4f}", step + 1,
                        static_cast<double>(loss.total.item()), static_cast<double>(loss.recon.item()),
                        static_cast<double>(loss.kl.item()), v));
      }
    }
    metrics.row({std::to_string(step + 1), fmt::format("{:.6g}", static_cast<double>(loss.total.item())),
                 fmt::format("{:.6g}", static_cast<double>(loss.recon.item())),
                 fmt::format("{:.6g}", static_cast<double>(loss.kl.item())), fmt::format("{:.6g}", kl_weight),
                 fmt::format("{:.6g}", gnorm), val_cell});
  }
  if (!best.empty()) {
    auto& params = vae.params().params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(best[i].begin(), best[i].end(), params[i].tensor.values().begin());
    }
  }
  {
    NoGradScope<T> no_grad;
    double kl = 0;
    for (const auto& c : val) {
      const auto d = vae.encode(std::span<const MotionClip>(&c, 1));
      kl += gaussian_kl(d.mu.to_vector(), d.log_sigma.to_vector());
    }
    report.val_kl = kl / static_cast<double>(val.size());
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<MotionClip> standardized_clips(std::span<const CorpusRecord> records, const MotionStats& stats) {
  std::vector<MotionClip> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(stats.standardize(r.clip));
  return out;
}

template double vae_reconstruction_mse<float>(const MotionVae<float>&, std::span<const MotionClip>);
template double vae_reconstruction_mse<double>(const MotionVae<double>&, std::span<const MotionClip>);
template std::vector<double> vae_joint_errors<float>(const MotionVae<float>&, std::span<const MotionClip>);
template std::vector<double> vae_joint_errors<double>(const MotionVae<double>&, std::span<const MotionClip>);
template VaeReport train_vae<float>(MotionVae<float>&, std::span<const MotionClip>, std::span<const MotionClip>,
                                    const VaeTrainConfig&, const std::function<void(const std::string&)>&);
template VaeReport train_vae<double>(MotionVae<double>&, std::span<const MotionClip>, std::span<const MotionClip>,
                                     const VaeTrainConfig&, const std::function<void(const std::string&)>&);

}  // namespace bimot
