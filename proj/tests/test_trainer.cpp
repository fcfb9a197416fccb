#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bimot/trainer.hpp"

using namespace bimot;

namespace {

struct World {
  Corpus corpus;
  MotionStats stats;
  Vocabulary vocab;
  ModelConfig config;
};

const World& world() {
  static const World w = [] {
    World out;
    CorpusConfig cc;
    cc.count = 100;
    out.corpus = generate_corpus(cc);
    out.stats = MotionStats::compute(out.corpus.train);
    std::vector<std::string> texts = instruction_phrases();
    for (const auto& r : out.corpus.train) {
      for (const auto& c : render_all_captions(r.label, r.params)) texts.push_back(c);
    }
    out.vocab = Vocabulary::build(texts);
    ModelConfig& c = out.config;
    c.vae.latent = 4;
    c.vae.width = 16;
    c.vae.layers = 2;
    c.vae.heads = 2;
    c.vae.ffn = 32;
    c.backbone.layers = 2;
    c.backbone.width = 16;
    c.backbone.heads = 2;
    c.backbone.ffn = 32;
    c.backbone.cond_dim = 16;
    c.backbone.context = 160;
    c.diffusion.width = 32;
    c.diffusion.blocks = 1;
    c.diffusion.time_dim = 16;
    c.diffusion.heads = 2;
    c.diffusion.train_steps = 100;
    c.diffusion.batch_mul = 2;
    c.holders = 2;
    c.link(out.vocab);
    return out;
  }();
  return w;
}

template <typename T>
MotionModel<T> make_model(std::uint64_t seed = 21) {
  const auto& w = world();
  MotionModel<T> m(w.config, w.vocab, w.stats, seed);
  m.set_latent_stats({std::vector<double>(4, 0.0), std::vector<double>(4, 1.0)});
  return m;
}

template <typename T>
std::vector<TrainingItem> items(const MotionModel<T>& m, std::size_t n) {
  const auto& train = world().corpus.train;
  return prepare_items(m, std::span<const CorpusRecord>(train.data(), std::min(n, train.size())));
}

template <typename T>
std::vector<std::vector<T>> snapshot(const ParamStore<T>& store, const std::string& group) {
  std::vector<std::vector<T>> out;
  for (const auto& p : store.params()) {
    if (p.group.starts_with(group)) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  }
  return out;
}

StageConfig quick(int stage, int steps) {
  StageConfig c = StageConfig::defaults(stage);
  c.batch = 4;
  c.steps = steps;
  c.warmup_frac = 0;
  return c;
}

}  // namespace

TEST(StageConfig, DefaultsFollowTheSchedule) {
  const auto s1 = StageConfig::defaults(1);
  EXPECT_EQ(s1.mixture.t2m, 1.0);
  EXPECT_EQ(s1.mixture.total(), 1.0);
  EXPECT_EQ(s1.frozen_groups, std::vector<std::string>{"text.base"});
  EXPECT_DOUBLE_EQ(s1.backbone_lr, 2e-4);
  EXPECT_DOUBLE_EQ(s1.diffusion_lr, 1e-4);
  const auto s2 = StageConfig::defaults(2);
  EXPECT_GT(s2.mixture.t2m, 0);
  EXPECT_GT(s2.mixture.m2t, 0);
  EXPECT_GT(s2.mixture.predict, 0);
  EXPECT_EQ(s2.frozen_groups, std::vector<std::string>{"text.base"});
  EXPECT_TRUE(StageConfig::defaults(3).frozen_groups.empty());
  EXPECT_THROW(StageConfig::defaults(7), ConfigError);
}

TEST(StageConfig, JsonRoundTrip) {
  StageConfig c = StageConfig::defaults(2);
  c.batch = 9;
  c.mixture.predict = 0.33;
  c.frozen_groups = {"text.base", "motion"};
  const auto back = StageConfig::from_json(c.to_json(), 2);
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(StageConfig::from_json("{not json", 2), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  const auto& c = world().config;
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(ModelConfig::from_json("[1,2"), ConfigError);
}

TEST(MakeExample, PredictConditionsOnPrefixAndTargetsFullClip) {
  const auto m = make_model<double>();
  const auto it = items(m, 3);
  Rng rng(1);
  const auto ex = make_example(world().vocab, Task::kPredict, it[0], 2, rng);
  ASSERT_EQ(ex.instruction.sequence.latents.size(), 1u);
  EXPECT_EQ(ex.instruction.sequence.latents[0], it[0].prefix_latent);
  EXPECT_EQ(ex.target, it[0].latent);
  EXPECT_NE(it[0].prefix_latent, it[0].latent);
}

TEST(ComposeLosses, CaptioningBatchLeavesDiffusionUntouched) {
  auto m = make_model<double>();
  const auto it = items(m, 4);
  Rng rng(2);
  std::vector<TrainingExample> batch;
  for (const auto& item : it) batch.push_back(make_example(world().vocab, Task::kM2T, item, 2, rng));
  Tape<double> tape;
  BatchLoss<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = compose_losses(m, batch, rng, 0.0);
  }
  EXPECT_FALSE(loss.diffusion.defined());
  ASSERT_TRUE(loss.ce.defined());
  m.diffusion().params().zero_grad();
  tape.backward(loss.total);
  for (const auto& p : m.diffusion().params().params()) {
    for (double g : p.tensor.grad()) ASSERT_EQ(g, 0.0) << p.name;
  }
}

TEST(ComposeLosses, MaskedRowsGetExactlyZeroLogitGradient) {
  auto m = make_model<double>();
  const auto it = items(m, 4);
  const auto& vocab = world().vocab;
  Rng rng(3);
  std::vector<TrainingExample> batch;
  int outputs = 0;
  for (Task t : {Task::kT2M, Task::kM2T, Task::kPredict, Task::kPlainText}) {
    batch.push_back(make_example(vocab, t, it[static_cast<std::size_t>(outputs++)], 2, rng));
  }
  Tape<double> tape;
  BatchLoss<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = compose_losses(m, batch, rng, 0.1);
  }
  ASSERT_TRUE(loss.diffusion.defined());
  tape.backward(loss.total);
  const auto grad = loss.logits.grad();
  const std::size_t v = loss.logits.cols();
  std::size_t row = 0, supervised = 0;
  for (const auto& ex : batch) {
    const auto& ins = ex.instruction;
    for (std::size_t i = 0; i < ins.sequence.size(); ++i) {
      if (ins.sequence.items[i].modality != Modality::kText) continue;
      double norm = 0;
      for (std::size_t k = 0; k < v; ++k) norm += std::abs(grad[row * v + k]);
      if (ins.targets[i] == vocab.eom()) {
        EXPECT_EQ(ins.loss_mask[i], 0);
      }
      if (ins.loss_mask[i]) {
        EXPECT_GT(norm, 0.0);
        ++supervised;
      } else {
        EXPECT_EQ(norm, 0.0) << "row " << row;
      }
      ++row;
    }
  }
  EXPECT_EQ(row, loss.logits.rows());
  EXPECT_GT(supervised, 0u);

  // Text-to-motion supervises exactly one output-side position: the one predicting <som>.
  const auto& t2m = batch[0].instruction;
  int som_rows = 0;
  for (std::size_t i = 0; i < t2m.sequence.size(); ++i) som_rows += t2m.loss_mask[i] && t2m.targets[i] == vocab.som();
  EXPECT_EQ(som_rows, 1);
}

TEST(VerifyFreeze, NamesExactlyThePlantedParameter) {
  auto m = make_model<double>();
  auto& store = m.backbone().params();
  store.set_trainable("text.base", false);
  auto report = verify_freeze(store, {"text.base"});
  EXPECT_TRUE(report.ok);
  EXPECT_GT(report.frozen_params, 0u);

  // Mis-freeze one parameter and give it a gradient.
  auto& victim = store.params()[3];
  ASSERT_TRUE(victim.group.starts_with("text.base"));
  victim.tensor.set_requires_grad(true);
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      TapeScope<double> scope(tape);
      loss = sum(mul(victim.tensor, victim.tensor));
    }
    tape.backward(loss);
  }
  report = verify_freeze(store, {"text.base"});
  EXPECT_FALSE(report.ok);
  EXPECT_EQ(report.violations, std::vector<std::string>{victim.name});

  const auto none = verify_freeze(store, {});
  EXPECT_TRUE(none.ok);
  EXPECT_EQ(none.frozen_params, 0u);
}

TEST(StageTrainer, StageOneKeepsTextBaseBitwiseAndMovesEverythingElse) {
  auto m = make_model<double>();
  const auto it = items(m, 12);
  const auto base = snapshot(m.backbone().params(), "text.base");
  const auto special = snapshot(m.backbone().params(), "text.special");
  const auto motion = snapshot(m.backbone().params(), "motion");
  const auto vae = snapshot(m.vae().params(), "");
  StageTrainer<double> trainer(m, quick(1, 5));
  for (int s = 0; s < 5; ++s) {
    EXPECT_TRUE(std::isfinite(trainer.train_step(it)));
    EXPECT_TRUE(trainer.last_freeze().ok);
  }
  EXPECT_EQ(snapshot(m.backbone().params(), "text.base"), base);
  EXPECT_EQ(snapshot(m.vae().params(), ""), vae);
  EXPECT_NE(snapshot(m.backbone().params(), "text.special"), special);
  EXPECT_NE(snapshot(m.backbone().params(), "motion"), motion);
}

TEST(StageTrainer, StageThreeFreezesNothing) {
  auto m = make_model<double>();
  const auto it = items(m, 12);
  StageTrainer<double> trainer(m, quick(3, 2));
  trainer.train_step(it);
  EXPECT_TRUE(trainer.last_freeze().ok);
  EXPECT_EQ(trainer.last_freeze().frozen_params, 0u);
}

TEST(StageTrainer, SameSeedSameLossTrajectory) {
  auto a = make_model<double>(), b = make_model<double>();
  const auto it = items(a, 16);
  StageTrainer<double> ta(a, quick(2, 100)), tb(b, quick(2, 100));
  for (int s = 0; s < 100; ++s) {
    const double la = ta.train_step(it), lb = tb.train_step(it);
    ASSERT_NEAR(la, lb, 1e-6) << "step " << s;
  }
}

TEST(StageTrainer, ResumeReproducesSubsequentLosses) {
  const auto path = std::filesystem::temp_directory_path() / "bimot_resume_test.bin";
  auto a = make_model<double>();
  const auto it = items(a, 16);
  StageTrainer<double> ta(a, quick(2, 8));
  for (int s = 0; s < 4; ++s) ta.train_step(it);
  ta.save_checkpoint(path);
  std::vector<double> expected;
  for (int s = 0; s < 4; ++s) expected.push_back(ta.train_step(it));

  auto b = make_model<double>(99);
  StageTrainer<double> tb(b, quick(2, 8));
  tb.resume(path);
  EXPECT_EQ(tb.step(), 4);
  for (int s = 0; s < 4; ++s) EXPECT_EQ(tb.train_step(it), expected[static_cast<std::size_t>(s)]) << "step " << s;
  std::filesystem::remove(path);
}

TEST(MotionModel, GenerateMotionUsesOneForwardAndClosesTheBlock) {
  const auto m = make_model<double>();
  const auto& vocab = world().vocab;
  const auto ins = make_instruction(vocab, Task::kT2M, {world().corpus.train[0].caption, std::nullopt, std::nullopt},
                                    2, 1);
  HybridSequence prompt;
  prompt.items.assign(ins.sequence.items.begin(), ins.sequence.items.begin() + ins.prompt_length);
  SamplerSettings s;
  s.steps = 10;
  s.seed = 4;
  const auto before = m.backbone().forward_count();
  const auto g = m.generate_motion(prompt, s);
  EXPECT_EQ(m.backbone().forward_count() - before, 1);
  ASSERT_EQ(g.sequence.size(), prompt.size() + 3);
  for (std::size_t i = prompt.size(); i < prompt.size() + 2; ++i) {
    EXPECT_EQ(g.sequence.items[i].token, vocab.holder_out());
    EXPECT_EQ(g.sequence.items[i].modality, Modality::kMotion);
  }
  EXPECT_EQ(g.sequence.items.back().token, vocab.eom());
  EXPECT_EQ(g.latent.size(), 4u);
  EXPECT_EQ(m.generate_motion(prompt, s).latent, g.latent);
  s.seed = 5;
  EXPECT_NE(m.generate_motion(prompt, s).latent, g.latent);

  HybridSequence bad = prompt;
  bad.items.pop_back();
  EXPECT_THROW(m.generate_motion(bad, s), ContractError);
}

TEST(MotionModel, SaveLoadRoundTrip) {
  const auto m = make_model<double>();
  const auto path = std::filesystem::temp_directory_path() / "bimot_model_roundtrip.bin";
  m.save(path, {{"note", "x"}});
  std::map<std::string, std::string> md;
  const auto back = MotionModel<double>::load(path, &md);
  EXPECT_EQ(md.at("note"), "x");
  EXPECT_EQ(back.config().to_json(), m.config().to_json());
  const auto& clip = world().corpus.val[0].clip;
  EXPECT_EQ(back.encode(clip), m.encode(clip));
  std::filesystem::remove(path);
}
