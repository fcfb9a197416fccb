#include "bimot/model.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace bimot {

using nlohmann::json;

LatentStats LatentStats::compute(const std::vector<std::vector<double>>& latents) {
  if (latents.size() < 2) throw DataError("latent statistics need at least two latents");
  const std::size_t d = latents[0].size();
  LatentStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& z : latents) {
    if (z.size() != d) throw ShapeError("latents of different sizes");
    for (std::size_t i = 0; i < d; ++i) s.mean[i] += z[i];
  }
  for (auto& m : s.mean) m /= static_cast<double>(latents.size());
  for (const auto& z : latents) {
    for (std::size_t i = 0; i < d; ++i) s.stddev[i] += (z[i] - s.mean[i]) * (z[i] - s.mean[i]);
  }
  for (auto& v : s.stddev) v = std::max(1e-6, std::sqrt(v / static_cast<double>(latents.size() - 1)));
  return s;
}

std::vector<double> LatentStats::standardize(std::span<const double> z) const {
  if (z.size() != mean.size()) throw ShapeError("latent size does not match latent statistics");
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - mean[i]) / stddev[i];
  return out;
}

std::vector<double> LatentStats::destandardize(std::span<const double> z) const {
  if (z.size() != mean.size()) throw ShapeError("latent size does not match latent statistics");
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * stddev[i] + mean[i];
  return out;
}

void ModelConfig::link(const Vocabulary& vocab) {
  backbone.vocab = vocab.size();
  backbone.latent = vae.latent;
  backbone.holders = holders;
  diffusion.latent = vae.latent;
  diffusion.cond_dim = backbone.cond_dim;
}

std::string ModelConfig::to_json() const {
  json j;
  j["holders"] = holders;
  j["backbone"] = {{"vocab", backbone.vocab},
                   {"layers", backbone.layers},
                   {"width", backbone.width},
                   {"heads", backbone.heads},
                   {"ffn", backbone.ffn},
                   {"motion_ffn_ratio", backbone.motion_ffn_ratio},
                   {"cond_dim", backbone.cond_dim},
                   {"context", backbone.context},
                   {"shared_layers", backbone.shared_layers}};
  j["diffusion"] = {{"width", diffusion.width},     {"blocks", diffusion.blocks},
                    {"time_dim", diffusion.time_dim}, {"heads", diffusion.heads},
                    {"train_steps", diffusion.train_steps}, {"beta_start", diffusion.beta_start},
                    {"beta_end", diffusion.beta_end}, {"p_drop", diffusion.p_drop},
                    {"batch_mul", diffusion.batch_mul}};
  j["vae"] = {{"latent", vae.latent},         {"width", vae.width},           {"layers", vae.layers},
              {"heads", vae.heads},           {"ffn", vae.ffn},               {"memory_tokens", vae.memory_tokens},
              {"min_frames", vae.min_frames}, {"max_frames", vae.max_frames}, {"kl_weight", vae.kl_weight},
              {"smooth_l1", vae.smooth_l1}};
  return j.dump(2);
}

namespace {

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  json j;
  try {
    j = json::parse(text);
    read(j, "holders", c.holders);
    if (j.contains("backbone")) {
      const auto& b = j["backbone"];
      read(b, "vocab", c.backbone.vocab);
      read(b, "layers", c.backbone.layers);
      read(b, "width", c.backbone.width);
      read(b, "heads", c.backbone.heads);
      read(b, "ffn", c.backbone.ffn);
      read(b, "motion_ffn_ratio", c.backbone.motion_ffn_ratio);
      read(b, "cond_dim", c.backbone.cond_dim);
      read(b, "context", c.backbone.context);
      read(b, "shared_layers", c.backbone.shared_layers);
    }
    if (j.contains("diffusion")) {
      const auto& d = j["diffusion"];
      read(d, "width", c.diffusion.width);
      read(d, "blocks", c.diffusion.blocks);
      read(d, "time_dim", c.diffusion.time_dim);
      read(d, "heads", c.diffusion.heads);
      read(d, "train_steps", c.diffusion.train_steps);
      read(d, "beta_start", c.diffusion.beta_start);
      read(d, "beta_end", c.diffusion.beta_end);
      read(d, "p_drop", c.diffusion.p_drop);
      read(d, "batch_mul", c.diffusion.batch_mul);
    }
    if (j.contains("vae")) {
      const auto& v = j["vae"];
      read(v, "latent", c.vae.latent);
      read(v, "width", c.vae.width);
      read(v, "layers", c.vae.layers);
      read(v, "heads", c.vae.heads);
      read(v, "ffn", c.vae.ffn);
      read(v, "memory_tokens", c.vae.memory_tokens);
      read(v, "min_frames", c.vae.min_frames);
      read(v, "max_frames", c.vae.max_frames);
      read(v, "kl_weight", c.vae.kl_weight);
      read(v, "smooth_l1", c.vae.smooth_l1);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (c.holders < 1) throw ConfigError("model config: holders must be at least 1");
  if (c.backbone.motion_ffn_ratio <= 0) throw ConfigError("model config: motion_ffn_ratio must be positive");
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read model config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

MotionClip clip_prefix(const MotionClip& clip, double ratio, int min_frames) {
  const int n = std::max(min_frames, static_cast<int>(std::ceil(ratio * clip.frames)));
  return clip.prefix(std::min(n, clip.frames));
}

namespace {

ModelConfig linked(ModelConfig c, const Vocabulary& v) {
  c.link(v);
  return c;
}

}  // namespace

template <typename T>
MotionModel<T>::MotionModel(const ModelConfig& config, Vocabulary vocab, MotionStats motion_stats,
                            std::uint64_t seed)
    : config_(linked(config, vocab)),
      vocab_(std::move(vocab)),
      motion_stats_(std::move(motion_stats)),
      latent_stats_{std::vector<double>(static_cast<std::size_t>(config.vae.latent), 0.0),
                    std::vector<double>(static_cast<std::size_t>(config.vae.latent), 1.0)},
      vae_(config_.vae, seed),
      backbone_(config_.backbone, seed + 1),
      diffusion_(config_.diffusion, seed + 2) {}

template <typename T>
std::vector<double> MotionModel<T>::encode(const MotionClip& raw) const {
  MotionClip c = motion_stats_.standardize(raw);
  if (c.frames > config_.vae.max_frames) c = c.prefix(config_.vae.max_frames);
  return latent_stats_.standardize(vae_.encode_mean(c));
}

template <typename T>
MotionClip MotionModel<T>::decode(std::span<const double> latent, int frames) const {
  const auto z = latent_stats_.destandardize(latent);
  return motion_stats_.destandardize(vae_.decode_clip(z, frames));
}

template <typename T>
GeneratedMotion MotionModel<T>::generate_motion(HybridSequence seq, const SamplerSettings& settings) const {
  if (seq.items.empty() || seq.items.back().token != vocab_.som() ||
      seq.items.back().modality != Modality::kText) {
    throw ContractError("motion generation needs a sequence ending at <som>");
  }
  NoGradScope<T> no_grad;
  const int h = config_.holders;
  for (int i = 0; i < h; ++i) seq.push_holder(vocab_.holder_out());
  const std::span<const HybridSequence> one(&seq, 1);
  const auto out = backbone_.forward(one);
  const auto states = backbone_.holder_conditions(out, one, static_cast<std::size_t>(h));
  GeneratedMotion g;
  g.latent = diffusion_.sample(diffusion_.aggregate(states, static_cast<std::size_t>(h)), settings);
  seq.push_text(vocab_.eom());
  g.sequence = std::move(seq);
  return g;
}

template <typename T>
MotionClip MotionModel<T>::text_to_motion(const std::string& caption, int frames, const SamplerSettings& settings,
                                          int phrasing) const {
  const auto ins = make_instruction(vocab_, Task::kT2M, {caption, std::nullopt, std::nullopt}, config_.holders,
                                    phrasing);
  HybridSequence prompt;
  prompt.items.assign(ins.sequence.items.begin(), ins.sequence.items.begin() + ins.prompt_length);
  return decode(generate_motion(std::move(prompt), settings).latent, frames);
}

template <typename T>
std::string MotionModel<T>::caption(const MotionClip& raw, const TextSampler& sampler, int phrasing,
                                    int max_len) const {
  const auto ins = make_instruction(vocab_, Task::kM2T, {"x", std::nullopt, encode(raw)}, config_.holders, phrasing);
  HybridSequence prompt = ins.sequence;
  prompt.items.resize(static_cast<std::size_t>(ins.prompt_length));
  const auto out = generate_text(backbone_, vocab_, prompt, sampler, ins.prompt_length + max_len);
  std::vector<int> words;
  for (std::size_t i = prompt.size(); i < out.size(); ++i) {
    const int t = out.items[i].token;
    if (t == vocab_.eos() || t == vocab_.som()) break;
    words.push_back(t);
  }
  return vocab_.detokenize(words);
}

template <typename T>
MotionClip MotionModel<T>::predict(const MotionClip& raw, int frames, const SamplerSettings& settings,
                                   int phrasing) const {
  const auto z = encode(clip_prefix(raw, 0.5, config_.vae.min_frames));
  const auto ins = make_instruction(vocab_, Task::kPredict, {std::nullopt, std::nullopt, z}, config_.holders,
                                    phrasing);
  HybridSequence prompt = ins.sequence;
  prompt.items.resize(static_cast<std::size_t>(ins.prompt_length));
  return decode(generate_motion(std::move(prompt), settings).latent, frames);
}

template <typename T>
void MotionModel<T>::save_to(ArrayArchive& a) const {
  vae_.params().save_to(a);
  backbone_.params().save_to(a);
  diffusion_.params().save_to(a);
  a.put("stats.motion.mean", std::span<const double>(motion_stats_.mean), {motion_stats_.mean.size()});
  a.put("stats.motion.std", std::span<const double>(motion_stats_.stddev), {motion_stats_.stddev.size()});
  a.put("stats.latent.mean", std::span<const double>(latent_stats_.mean), {latent_stats_.mean.size()});
  a.put("stats.latent.std", std::span<const double>(latent_stats_.stddev), {latent_stats_.stddev.size()});
  a.metadata()["model_config"] = config_.to_json();
  a.metadata()["vocabulary"] = vocab_.to_json();
}

template <typename T>
void MotionModel<T>::load_params(const ArrayArchive& a) {
  latent_stats_ = {a.get<double>("stats.latent.mean"), a.get<double>("stats.latent.std")};
  vae_.params().load_from(a);
  backbone_.params().load_from(a);
  diffusion_.params().load_from(a);
}

template <typename T>
MotionModel<T> MotionModel<T>::from_archive(const ArrayArchive& a) {
  const auto& md = a.metadata();
  if (!md.contains("model_config") || !md.contains("vocabulary")) throw DataError("archive is not a model checkpoint");
  MotionStats ms{a.get<double>("stats.motion.mean"), a.get<double>("stats.motion.std")};
  MotionModel m(ModelConfig::from_json(md.at("model_config")), Vocabulary::from_json(md.at("vocabulary")),
                std::move(ms), 0);
  m.load_params(a);
  return m;
}

template <typename T>
void MotionModel<T>::save(const std::filesystem::path& path, const std::map<std::string, std::string>& metadata) const {
  ArrayArchive a;
  a.metadata() = metadata;
  save_to(a);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  a.save(path);
}

template <typename T>
MotionModel<T> MotionModel<T>::load(const std::filesystem::path& path, std::map<std::string, std::string>* metadata) {
  const auto a = ArrayArchive::load(path);
  if (metadata) *metadata = a.metadata();
  return from_archive(a);
}

template class MotionModel<float>;
template class MotionModel<double>;

}  // namespace bimot
