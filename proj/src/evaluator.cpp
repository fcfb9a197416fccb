#include "bimot/evaluator.hpp"

#include <cmath>
#include <fmt/format.h>
#include <json.hpp>

#include "bimot/metrics_log.hpp"
#include "bimot/optim.hpp"

namespace bimot {

using nlohmann::json;

Evaluator::Evaluator(const EvaluatorConfig& config, Vocabulary vocab, MotionStats stats, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)), stats_(std::move(stats)) {
  if (config.width % config.heads != 0) throw ConfigError("evaluator width must be divisible by heads");
  Rng rng(seed);
  const auto w = static_cast<std::size_t>(config.width);
  const auto e = static_cast<std::size_t>(config.embed);
  const std::string g = "evaluator";
  const double std_w = 1.0 / std::sqrt(static_cast<double>(w));
  token_embedding_ = store_.normal("eval.text.wte", g, {static_cast<std::size_t>(vocab_.size()), w}, 0.1, rng);
  text_pos_ = store_.normal("eval.text.wpe", g, {static_cast<std::size_t>(config.max_tokens), w}, 0.05, rng);
  frame_in_ = Linear<float>::create(store_, "eval.motion.frame_in", g, kMotionDims, w, rng, 0.2);
  motion_pos_ = store_.normal("eval.motion.pos", g, {static_cast<std::size_t>(config.max_frames), w}, 0.05, rng);
  for (int l = 0; l < config.layers; ++l) {
    text_blocks_.push_back(TransformerBlock<float>::create(store_, "eval.text.layer" + std::to_string(l), g, w,
                                                           static_cast<std::size_t>(config.heads),
                                                           static_cast<std::size_t>(config.ffn), rng, std_w));
    motion_blocks_.push_back(TransformerBlock<float>::create(store_, "eval.motion.layer" + std::to_string(l), g, w,
                                                             static_cast<std::size_t>(config.heads),
                                                             static_cast<std::size_t>(config.ffn), rng, std_w));
  }
  text_norm_ = LayerNorm<float>::create(store_, "eval.text.ln_f", g, w);
  motion_norm_ = LayerNorm<float>::create(store_, "eval.motion.ln_f", g, w);
  text_out_ = Linear<float>::create(store_, "eval.text.out", g, w, e, rng, std_w);
  motion_out_ = Linear<float>::create(store_, "eval.motion.out", g, w, e, rng, std_w);
}

Tensor<float> Evaluator::encode(Tensor<float> x, const std::vector<std::size_t>& lengths,
                                const std::vector<TransformerBlock<float>>& blocks, const LayerNorm<float>& norm,
                                const Linear<float>& out) const {
  AttentionLayout layout;
  std::vector<RowSegment> segments;
  std::size_t begin = 0;
  for (auto len : lengths) {
    layout.segments.push_back({begin, len, begin, len});
    segments.push_back({begin, len});
    begin += len;
  }
  for (const auto& b : blocks) x = b(x, layout);
  return l2_normalize_rows(out(segment_mean(norm(x), segments)));
}

Tensor<float> Evaluator::embed_text(std::span<const std::string> captions) const {
  if (captions.empty()) throw EvaluationError("no captions to embed");
  std::vector<int> ids, pos;
  std::vector<std::size_t> lengths;
  for (const auto& c : captions) {
    auto t = vocab_.tokenize(c);
    if (t.empty()) t.push_back(vocab_.unk());
    if (t.size() > static_cast<std::size_t>(config_.max_tokens)) t.resize(static_cast<std::size_t>(config_.max_tokens));
    for (std::size_t i = 0; i < t.size(); ++i) {
      ids.push_back(t[i]);
      pos.push_back(static_cast<int>(i));
    }
    lengths.push_back(t.size());
  }
  return encode(add(embedding_lookup(token_embedding_, ids), embedding_lookup(text_pos_, pos)), lengths,
                text_blocks_, text_norm_, text_out_);
}

Tensor<float> Evaluator::embed_motion(std::span<const MotionClip> raw_clips) const {
  if (raw_clips.empty()) throw EvaluationError("no clips to embed");
  std::vector<float> values;
  std::vector<int> pos;
  std::vector<std::size_t> lengths;
  for (const auto& raw : raw_clips) {
    MotionClip c = stats_.standardize(raw);
    if (c.frames > config_.max_frames) c = c.prefix(config_.max_frames);
    values.insert(values.end(), c.values.begin(), c.values.end());
    for (int f = 0; f < c.frames; ++f) pos.push_back(f);
    lengths.push_back(static_cast<std::size_t>(c.frames));
  }
  const Tensor<float> frames({pos.size(), static_cast<std::size_t>(kMotionDims)}, std::move(values));
  return encode(add(frame_in_(frames), embedding_lookup(motion_pos_, pos)), lengths, motion_blocks_, motion_norm_,
                motion_out_);
}

namespace {

Features to_features(const Tensor<float>& t) {
  Features f(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  }
  return f;
}

constexpr std::size_t kChunk = 64;

}  // namespace

Features Evaluator::text_features(std::span<const std::string> captions) const {
  NoGradScope<float> no_grad;
  Features out(static_cast<Eigen::Index>(captions.size()), config_.embed);
  for (std::size_t i = 0; i < captions.size(); i += kChunk) {
    const auto part = captions.subspan(i, std::min(kChunk, captions.size() - i));
    out.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(part.size())) = to_features(embed_text(part));
  }
  return out;
}

Features Evaluator::motion_features(std::span<const MotionClip> raw_clips) const {
  NoGradScope<float> no_grad;
  Features out(static_cast<Eigen::Index>(raw_clips.size()), config_.embed);
  for (std::size_t i = 0; i < raw_clips.size(); i += kChunk) {
    const auto part = raw_clips.subspan(i, std::min(kChunk, raw_clips.size() - i));
    out.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(part.size())) =
        to_features(embed_motion(part));
  }
  return out;
}

Tensor<float> Evaluator::contrastive_loss(std::span<const std::string> captions,
                                          std::span<const MotionClip> raw_clips) const {
  if (captions.size() != raw_clips.size() || captions.size() < 2) {
    throw ContractError("contrastive loss needs at least two aligned pairs");
  }
  const auto t = embed_text(captions);
  const auto m = embed_motion(raw_clips);
  const auto logits = scale(matmul_nt(t, m), static_cast<float>(1.0 / config_.temperature));
  std::vector<int> targets(captions.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i);
  const std::vector<std::uint8_t> mask(targets.size(), 1);
  return scale(add(cross_entropy_masked(logits, targets, mask), cross_entropy_masked(transpose(logits), targets, mask)),
               0.5f);
}

EvaluatorFit Evaluator::fit(std::span<const CorpusRecord> records) const {
  if (records.size() < 2) throw EvaluationError("evaluator fit needs at least two records");
  std::vector<std::string> caps;
  std::vector<MotionClip> clips;
  for (const auto& r : records) {
    caps.push_back(r.caption);
    clips.push_back(r.clip);
  }
  const Features t = text_features(caps);
  const Features m = motion_features(clips);
  const Eigen::MatrixXd sim = t * m.transpose();
  const double n = static_cast<double>(records.size());
  EvaluatorFit f;
  f.matched_cosine = sim.trace() / n;
  f.mismatched_cosine = (sim.sum() - sim.trace()) / (n * (n - 1));
  return f;
}

void Evaluator::save(const std::filesystem::path& path, const EvaluatorFit& fit) const {
  ArrayArchive a;
  store_.save_to(a);
  a.put("stats.motion.mean", std::span<const double>(stats_.mean), {stats_.mean.size()});
  a.put("stats.motion.std", std::span<const double>(stats_.stddev), {stats_.stddev.size()});
  a.metadata()["evaluator_config"] = json{{"embed", config_.embed},          {"width", config_.width},
                                          {"layers", config_.layers},        {"heads", config_.heads},
                                          {"ffn", config_.ffn},              {"temperature", config_.temperature},
                                          {"max_tokens", config_.max_tokens}, {"max_frames", config_.max_frames}}
                                         .dump();
  a.metadata()["vocabulary"] = vocab_.to_json();
  a.metadata()["matched_cosine"] = fmt::format("{:.17g}", fit.matched_cosine);
  a.metadata()["mismatched_cosine"] = fmt::format("{:.17g}", fit.mismatched_cosine);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  a.save(path);
}

Evaluator Evaluator::load(const std::filesystem::path& path, EvaluatorFit* fit) {
  const auto a = ArrayArchive::load(path);
  const auto& md = a.metadata();
  if (!md.contains("evaluator_config")) throw DataError(path.string() + " is not an evaluator checkpoint");
  const auto j = json::parse(md.at("evaluator_config"));
  EvaluatorConfig c;
  c.embed = j.at("embed");
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.ffn = j.at("ffn");
  c.temperature = j.at("temperature");
  c.max_tokens = j.at("max_tokens");
  c.max_frames = j.at("max_frames");
  Evaluator e(c, Vocabulary::from_json(md.at("vocabulary")),
              MotionStats{a.get<double>("stats.motion.mean"), a.get<double>("stats.motion.std")}, 0);
  e.store_.load_from(a);
  if (fit) {
    fit->matched_cosine = std::stod(md.at("matched_cosine"));
    fit->mismatched_cosine = std::stod(md.at("mismatched_cosine"));
  }
  return e;
}

EvaluatorFit train_evaluator(Evaluator& evaluator, std::span<const CorpusRecord> train,
                             std::span<const CorpusRecord> val, const EvaluatorTrainConfig& config,
                             const std::function<void(const std::string&)>& log) {
  if (train.size() < 2 || val.size() < 2) throw ConfigError("evaluator training needs train and val records");
  AdamW<float> opt;
  MetricsLog metrics(config.metrics_csv, {"step", "loss"});
  const auto warmup = static_cast<long long>(config.warmup_frac * config.steps);
  for (int step = 0; step < config.steps; ++step) {
    Rng rng(config.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(step));
    std::vector<std::string> caps;
    std::vector<MotionClip> clips;
    for (int b = 0; b < config.batch; ++b) {
      const auto& r = train[rng() % train.size()];
      const auto all = render_all_captions(r.label, r.params);
      caps.push_back(all[rng() % all.size()]);
      clips.push_back(config.shuffle_pairs ? train[rng() % train.size()].clip : r.clip);
    }
    Tape<float> tape;
    Tensor<float> loss;
    {
      TapeScope<float> scope(tape);
      loss = evaluator.contrastive_loss(caps, clips);
    }
    evaluator.params().zero_grad();
    tape.backward(loss);
    clip_grad_norm(evaluator.params(), 1.0);
    opt.step(evaluator.params(), warmup_lr(config.lr, step, warmup));
    metrics.row({std::to_string(step + 1), fmt::format("{:.6g}", loss.item())});
    if (log && ((step + 1) % 200 == 0 || step + 1 == config.steps)) {
      log(fmt::format("evaluator step {:5d}  loss {:.4f}", step + 1, loss.item()));
    }
  }
  return evaluator.fit(val);
}

void require_fit(const EvaluatorFit& fit, double min_margin) {
  if (!(fit.margin() >= min_margin)) {
    throw EvaluationError(fmt::format(
        "evaluator unfit: matched cosine {:.3f} exceeds mismatched {:.3f} by {:.3f} < {:.2f}; retrain it with "
        "train-evaluator",
        fit.matched_cosine, fit.mismatched_cosine, fit.margin(), min_margin));
  }
}

}  // namespace bimot
