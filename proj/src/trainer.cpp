#include "bimot/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "bimot/metrics_log.hpp"

namespace bimot {

using nlohmann::json;

StageConfig StageConfig::defaults(int stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case 0:
      c.mixture = {0.7, 0, 0, 0, 0.3};
      c.frozen_groups = {kMotionGroup};
      c.backbone_lr = 1e-3;
      c.steps = 1500;
      break;
    case 1:
      c.mixture.t2m = 1;
      c.frozen_groups = {kTextBaseGroup};
      c.steps = 2000;
      break;
    case 2:
      c.mixture = {0, 0.4, 0.4, 0.2, 0};
      c.frozen_groups = {kTextBaseGroup};
      c.steps = 4000;
      break;
    case 3:
      c.mixture = {0, 0.3, 0.3, 0.2, 0.2};
      c.steps = 1000;
      break;
    default:
      throw ConfigError("stage must be 0, 1, 2 or 3, got " + std::to_string(stage));
  }
  c.seed = 11 + static_cast<std::uint64_t>(stage);
  return c;
}

std::string StageConfig::to_json() const {
  json j{{"stage", stage},
         {"mixture",
          {{"text", mixture.text},
           {"t2m", mixture.t2m},
           {"m2t", mixture.m2t},
           {"predict", mixture.predict},
           {"plain_text", mixture.plain_text}}},
         {"frozen_groups", frozen_groups},
         {"backbone_lr", backbone_lr},
         {"diffusion_lr", diffusion_lr},
         {"weight_decay", weight_decay},
         {"batch", batch},
         {"steps", steps},
         {"warmup_frac", warmup_frac},
         {"clip_norm", clip_norm},
         {"diffusion_weight", diffusion_weight},
         {"predict_prefix", predict_prefix},
         {"eval_every", eval_every},
         {"val_examples", val_examples},
         {"seed", seed}};
  return j.dump(2);
}

StageConfig StageConfig::from_json(const std::string& text, int stage) {
  StageConfig c = defaults(stage);
  try {
    const auto j = json::parse(text);
    if (j.contains("stage") && j["stage"].get<int>() != stage) {
      throw ConfigError("stage config is for stage " + std::to_string(j["stage"].get<int>()));
    }
    if (j.contains("mixture")) {
      const auto& m = j["mixture"];
      c.mixture = {m.value("text", 0.0), m.value("t2m", 0.0), m.value("m2t", 0.0), m.value("predict", 0.0),
                   m.value("plain_text", 0.0)};
    }
    c.frozen_groups = j.value("frozen_groups", c.frozen_groups);
    c.backbone_lr = j.value("backbone_lr", c.backbone_lr);
    c.diffusion_lr = j.value("diffusion_lr", c.diffusion_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.diffusion_weight = j.value("diffusion_weight", c.diffusion_weight);
    c.predict_prefix = j.value("predict_prefix", c.predict_prefix);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.val_examples = j.value("val_examples", c.val_examples);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("stage config: ") + e.what());
  }
  if (c.mixture.total() <= 0) throw ConfigError("stage config: task mixture is empty");
  if (c.batch < 1 || c.steps < 0) throw ConfigError("stage config: batch and steps must be positive");
  return c;
}

StageConfig StageConfig::load(const std::filesystem::path& path, int stage) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read stage config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str(), stage);
}

template <typename T>
std::vector<TrainingItem> prepare_items(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                                        double prefix_ratio) {
  std::vector<TrainingItem> items;
  items.reserve(records.size());
  for (const auto& r : records) {
    TrainingItem it;
    it.id = r.id;
    it.label = r.label;
    it.caption = r.caption;
    it.captions = render_all_captions(r.label, r.params);
    it.latent = model.encode(r.clip);
    it.prefix_latent = model.encode(clip_prefix(r.clip, prefix_ratio, model.config().vae.min_frames));
    it.frames = r.clip.frames;
    items.push_back(std::move(it));
  }
  return items;
}

namespace {

std::size_t pick(std::size_t n, Rng& rng) { return static_cast<std::size_t>(rng() % n); }

double uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

TrainingExample make_example(const Vocabulary& vocab, Task task, const TrainingItem& item, int holders, Rng& rng) {
  const auto& caps = item.captions.empty() ? std::vector<std::string>{item.caption} : item.captions;
  const int phrasing = static_cast<int>(pick(kPhrasingsPerTask, rng));
  const std::string& caption = caps[pick(caps.size(), rng)];
  TrainingExample ex;
  switch (task) {
    case Task::kT2M:
      ex.instruction = make_instruction(vocab, task, {caption, std::nullopt, std::nullopt}, holders, phrasing);
      ex.target = item.latent;
      break;
    case Task::kM2T:
      ex.instruction = make_instruction(vocab, task, {caption, std::nullopt, item.latent}, holders, phrasing);
      break;
    case Task::kPredict:
      ex.instruction = make_instruction(vocab, task, {std::nullopt, std::nullopt, item.prefix_latent}, holders,
                                        phrasing);
      ex.target = item.latent;
      break;
    case Task::kPlainText: {
      std::string other = caption;
      if (caps.size() > 1) {
        while (other == caption) other = caps[pick(caps.size(), rng)];
      }
      ex.instruction = make_instruction(vocab, task, {caption, other, std::nullopt}, holders, phrasing);
      break;
    }
  }
  return ex;
}

std::vector<TrainingExample> sample_batch(const Vocabulary& vocab, std::span<const TrainingItem> items,
                                          const TaskMixture& mixture, int batch, int holders, Rng& rng) {
  if (items.empty()) throw ConfigError("no training items");
  const double total = mixture.total();
  if (total <= 0) throw ConfigError("task mixture is empty");
  std::vector<TrainingExample> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const TrainingItem& item = items[pick(items.size(), rng)];
    double u = uniform(rng) * total;
    if ((u -= mixture.text) < 0) {
      const auto& caps = item.captions.empty() ? std::vector<std::string>{item.caption} : item.captions;
      out.push_back({make_text_sequence(vocab, caps[pick(caps.size(), rng)]), {}});
      continue;
    }
    Task task = Task::kPlainText;
    if ((u -= mixture.t2m) < 0) {
      task = Task::kT2M;
    } else if ((u -= mixture.m2t) < 0) {
      task = Task::kM2T;
    } else if ((u -= mixture.predict) < 0) {
      task = Task::kPredict;
    }
    out.push_back(make_example(vocab, task, item, holders, rng));
  }
  return out;
}

template <typename T>
BatchLoss<T> compose_losses(const MotionModel<T>& model, std::span<const TrainingExample> batch, Rng& rng,
                            double p_drop, double diffusion_weight) {
  std::vector<HybridSequence> seqs;
  seqs.reserve(batch.size());
  for (const auto& ex : batch) seqs.push_back(ex.instruction.sequence);
  const auto out = model.backbone().forward(seqs);

  BatchLoss<T> loss;
  loss.logits = out.logits;
  std::size_t r = 0, supervised = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ins = batch[b].instruction;
    for (std::size_t i = 0; i < ins.sequence.size(); ++i) {
      if (ins.sequence.items[i].modality != Modality::kText) continue;
      loss.targets.push_back(ins.targets[i] < 0 ? 0 : ins.targets[i]);
      loss.mask.push_back(ins.loss_mask[i]);
      supervised += ins.loss_mask[i] ? 1 : 0;
      ++r;
    }
  }
  if (supervised > 0) loss.ce = cross_entropy_masked(out.logits, loss.targets, loss.mask);

  std::vector<T> targets;
  std::size_t n_out = 0;
  const auto holders = static_cast<std::size_t>(model.config().holders);
  for (const auto& ex : batch) {
    if (ex.instruction.output_begin < 0) continue;
    if (ex.target.size() != static_cast<std::size_t>(model.config().vae.latent)) {
      throw ContractError("motion output example without a latent target");
    }
    targets.insert(targets.end(), ex.target.begin(), ex.target.end());
    ++n_out;
  }
  if (n_out > 0) {
    const auto states = model.backbone().holder_conditions(out, seqs, holders);
    const auto c = model.diffusion().aggregate(states, holders);
    const Tensor<T> z0({n_out, static_cast<std::size_t>(model.config().vae.latent)}, std::move(targets));
    loss.diffusion = model.diffusion().loss(z0, c, rng, p_drop);
  }
  if (!loss.ce.defined() && !loss.diffusion.defined()) throw EmptyLossError("batch has no supervised position");
  if (loss.ce.defined() && loss.diffusion.defined()) {
    loss.total = add(loss.ce, scale(loss.diffusion, static_cast<T>(diffusion_weight)));
  } else if (loss.ce.defined()) {
    loss.total = loss.ce;
  } else {
    loss.total = scale(loss.diffusion, static_cast<T>(diffusion_weight));
  }
  return loss;
}

template <typename T>
FreezeReport verify_freeze(const ParamStore<T>& store, const std::vector<std::string>& frozen_groups) {
  FreezeReport report;
  for (const auto& p : store.params()) {
    bool frozen = false;
    for (const auto& g : frozen_groups) frozen = frozen || p.group.starts_with(g);
    if (!frozen) continue;
    ++report.frozen_params;
    bool clean = !p.tensor.requires_grad();
    if (p.tensor.has_grad()) {
      for (T g : p.tensor.grad()) clean = clean && g == T(0);
    }
    if (!clean) report.violations.push_back(p.name);
  }
  report.ok = report.violations.empty();
  return report;
}

template <typename T>
StageTrainer<T>::StageTrainer(MotionModel<T>& model, StageConfig config)
    : model_(model),
      config_(std::move(config)),
      backbone_opt_(AdamWConfig{0.9, 0.999, 1e-8, config_.weight_decay}),
      diffusion_opt_(AdamWConfig{0.9, 0.999, 1e-8, config_.weight_decay}) {
  if (config_.mixture.total() <= 0) throw ConfigError("task mixture is empty");
  apply_freeze();
}

template <typename T>
void StageTrainer<T>::apply_freeze() {
  auto& store = model_.backbone().params();
  store.set_trainable("", true);
  for (const auto& g : config_.frozen_groups) store.set_trainable(g, false);
  model_.diffusion().params().set_trainable("", true);
  // The VAE stays frozen in every stage.
  model_.vae().params().set_trainable("", false);
}

namespace {

// Clip the joint gradient of both stores to one global norm.
template <typename T>
double clip_joint(ParamStore<T>& a, ParamStore<T>& b, double max_norm) {
  const double na = grad_norm(a), nb = grad_norm(b);
  const double norm = std::sqrt(na * na + nb * nb);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto* store : {&a, &b}) {
      for (auto& p : store->params()) {
        if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        for (T& g : p.tensor.node().grad) g = static_cast<T>(g * s);
      }
    }
  }
  return norm;
}

std::uint64_t step_seed(const StageConfig& c, long long step) {
  return c.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(c.stage) * 0x100000001B3ull +
         static_cast<std::uint64_t>(step);
}

}  // namespace

template <typename T>
double StageTrainer<T>::train_step(std::span<const TrainingItem> train) {
  Rng rng(step_seed(config_, step_));
  const auto batch = sample_batch(model_.vocab(), train, config_.mixture, config_.batch, model_.config().holders, rng);
  auto& bstore = model_.backbone().params();
  auto& dstore = model_.diffusion().params();
  bstore.zero_grad();
  dstore.zero_grad();
  Tape<T> tape;
  BatchLoss<T> loss;
  try {
    TapeScope<T> scope(tape);
    loss = compose_losses(model_, batch, rng, model_.config().diffusion.p_drop, config_.diffusion_weight);
  } catch (const EmptyLossError&) {
    ++step_;
    return std::numeric_limits<double>::quiet_NaN();
  }
  tape.backward(loss.total);
  freeze_ = verify_freeze(bstore, config_.frozen_groups);
  if (!freeze_.ok) throw ContractError("frozen parameter received a gradient: " + freeze_.violations.front());
  clip_joint(bstore, dstore, config_.clip_norm);
  const auto warmup = static_cast<long long>(config_.warmup_frac * config_.steps);
  backbone_opt_.step(bstore, warmup_lr(config_.backbone_lr, step_, warmup));
  diffusion_opt_.step(dstore, warmup_lr(config_.diffusion_lr, step_, warmup));
  ++step_;
  return static_cast<double>(loss.total.item());
}

template <typename T>
double StageTrainer<T>::validate(std::span<const TrainingItem> val) const {
  NoGradScope<T> no_grad;
  Rng rng(config_.seed ^ 0xA5A5A5A5ull);
  const int chunk = 32;
  double total = 0;
  int n = 0;
  for (int done = 0; done < config_.val_examples; done += chunk) {
    const int b = std::min(chunk, config_.val_examples - done);
    const auto batch = sample_batch(model_.vocab(), val, config_.mixture, b, model_.config().holders, rng);
    try {
      total += static_cast<double>(compose_losses(model_, batch, rng, 0.0, config_.diffusion_weight).total.item()) * b;
      n += b;
    } catch (const EmptyLossError&) {
    }
  }
  if (n == 0) throw EvaluationError("validation produced no supervised batch");
  return total / n;
}

template <typename T>
void StageTrainer<T>::save_checkpoint(const std::filesystem::path& path,
                                      std::map<std::string, std::string> metadata) const {
  ArrayArchive a;
  a.metadata() = std::move(metadata);
  model_.save_to(a);
  backbone_opt_.save_to(a, "optim.backbone.");
  diffusion_opt_.save_to(a, "optim.diffusion.");
  a.metadata()["stage"] = std::to_string(config_.stage);
  a.metadata()["step"] = std::to_string(step_);
  a.metadata()["stage_config"] = config_.to_json();
  json frozen = config_.frozen_groups;
  a.metadata()["frozen_groups"] = frozen.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  a.save(path);
}

template <typename T>
void StageTrainer<T>::resume(const std::filesystem::path& path) {
  const auto a = ArrayArchive::load(path);
  const auto& md = a.metadata();
  if (!md.contains("step") || !md.contains("stage") || std::stoi(md.at("stage")) != config_.stage) {
    throw ConfigError(path.string() + " is not a stage " + std::to_string(config_.stage) + " checkpoint");
  }
  model_.load_params(a);
  backbone_opt_.load_from(a, "optim.backbone.");
  diffusion_opt_.load_from(a, "optim.diffusion.");
  step_ = std::stoi(md.at("step"));
  apply_freeze();
}

template <typename T>
StageReport run_stage(StageTrainer<T>& trainer, MotionModel<T>& model, std::span<const TrainingItem> train,
                      std::span<const TrainingItem> val, const std::filesystem::path& best_path,
                      const std::function<void(const std::string&)>& log) {
  const auto start = std::chrono::steady_clock::now();
  const StageConfig& cfg = trainer.config();
  MetricsLog metrics(cfg.metrics_csv, {"stage", "step", "loss", "val_loss", "frozen_params", "freeze_ok"});
  StageReport report;
  report.best_val = std::numeric_limits<double>::infinity();
  ArrayArchive best;
  bool have_best = false;
  while (trainer.step() < cfg.steps) {
    const double loss = trainer.train_step(train);
    const int step = trainer.step();
    ++report.steps;
    if (std::isnan(loss)) {
      ++report.skipped;
      if (log) log(fmt::format("stage {} step {}: batch without supervision skipped", cfg.stage, step));
      continue;
    }
    report.losses.push_back(loss);
    ++report.freeze_checks;
    const auto& fr = trainer.last_freeze();
    report.freeze_violations.insert(report.freeze_violations.end(), fr.violations.begin(), fr.violations.end());
    std::string val_cell;
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double v = trainer.validate(val);
      val_cell = fmt::format("{:.6g}", v);
      if (v < report.best_val) {
        report.best_val = v;
        report.best_step = step;
        best = ArrayArchive{};
        model.save_to(best);
        have_best = true;
        if (!best_path.empty()) trainer.save_checkpoint(best_path, {{"best_val", val_cell}});
      }
      if (log) log(fmt::format("stage {} step {:5d}  loss {:.4f}  val {:.4f}", cfg.stage, step, loss, v));
    }
    metrics.row({std::to_string(cfg.stage), std::to_string(step), fmt::format("{:.6g}", loss), val_cell,
                 std::to_string(fr.frozen_params), fr.ok ? "1" : "0"});
  }
  if (have_best) model.load_params(best);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

#define BIMOT_INSTANTIATE_TRAINER(T)                                                                            \
  template std::vector<TrainingItem> prepare_items(const MotionModel<T>&, std::span<const CorpusRecord>,         \
                                                   double);                                                      \
  template BatchLoss<T> compose_losses(const MotionModel<T>&, std::span<const TrainingExample>, Rng&, double,    \
                                       double);                                                                  \
  template FreezeReport verify_freeze(const ParamStore<T>&, const std::vector<std::string>&);                   \
  template class StageTrainer<T>;                                                                               \
  template StageReport run_stage(StageTrainer<T>&, MotionModel<T>&, std::span<const TrainingItem>,              \
                                 std::span<const TrainingItem>, const std::filesystem::path&,                   \
                                 const std::function<void(const std::string&)>&);

BIMOT_INSTANTIATE_TRAINER(float)
BIMOT_INSTANTIATE_TRAINER(double)

}  // namespace bimot
