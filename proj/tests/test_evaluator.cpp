#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bimot/evaluator.hpp"

using namespace bimot;

namespace {

struct Fixture {
  Corpus corpus;
  MotionStats stats;
  Vocabulary vocab;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    CorpusConfig cc;
    cc.count = 400;
    Fixture out;
    out.corpus = generate_corpus(cc);
    out.stats = MotionStats::compute(out.corpus.train);
    std::vector<std::string> texts;
    for (const auto& r : out.corpus.train) {
      for (const auto& c : render_all_captions(r.label, r.params)) texts.push_back(c);
    }
    out.vocab = Vocabulary::build(texts);
    return out;
  }();
  return f;
}

EvaluatorConfig small() {
  EvaluatorConfig c;
  c.width = 32;
  c.ffn = 64;
  c.layers = 1;
  return c;
}

}  // namespace

TEST(Evaluator, EmbeddingsAreUnitNormAndSeedDeterministic) {
  const auto& f = fixture();
  const Evaluator a(small(), f.vocab, f.stats, 3), b(small(), f.vocab, f.stats, 3);
  const std::vector<std::string> caps{f.corpus.train[0].caption, f.corpus.train[1].caption};
  const std::vector<MotionClip> clips{f.corpus.train[0].clip, f.corpus.train[1].clip};
  const Features ta = a.text_features(caps), tb = b.text_features(caps);
  const Features ma = a.motion_features(clips);
  EXPECT_EQ((ta - tb).norm(), 0.0);
  for (Eigen::Index i = 0; i < 2; ++i) {
    EXPECT_NEAR(ta.row(i).norm(), 1.0, 1e-5);
    EXPECT_NEAR(ma.row(i).norm(), 1.0, 1e-5);
  }
}

TEST(Evaluator, ChunkedFeaturesMatchSingleItems) {
  const auto& f = fixture();
  const Evaluator e(small(), f.vocab, f.stats, 4);
  std::vector<MotionClip> clips;
  for (int i = 0; i < 70; ++i) clips.push_back(f.corpus.train[static_cast<std::size_t>(i)].clip);
  const Features all = e.motion_features(clips);
  for (int i : {0, 33, 69}) {
    const Features one = e.motion_features(std::span<const MotionClip>(&clips[static_cast<std::size_t>(i)], 1));
    EXPECT_LT((all.row(i) - one.row(0)).norm(), 1e-5);
  }
}

TEST(Evaluator, TrainingSeparatesPairsAndShuffledControlDoesNot) {
  const auto& f = fixture();
  EvaluatorTrainConfig tc;
  tc.steps = 120;
  tc.batch = 24;
  Evaluator real(small(), f.vocab, f.stats, 5);
  const auto fit = train_evaluator(real, f.corpus.train, f.corpus.val, tc, nullptr);
  EXPECT_GT(fit.margin(), 0.3);
  EXPECT_NO_THROW(require_fit(fit));

  tc.shuffle_pairs = true;
  Evaluator control(small(), f.vocab, f.stats, 5);
  const auto bad = train_evaluator(control, f.corpus.train, f.corpus.val, tc, nullptr);
  EXPECT_LT(std::abs(bad.margin()), 0.1);
  EXPECT_THROW(require_fit(bad), EvaluationError);
}

TEST(Evaluator, SaveLoadRoundTrip) {
  const auto& f = fixture();
  const Evaluator e(small(), f.vocab, f.stats, 6);
  const auto path = std::filesystem::temp_directory_path() / "bimot_evaluator_roundtrip.bin";
  e.save(path, {0.75, 0.125});
  EvaluatorFit fit;
  const Evaluator back = Evaluator::load(path, &fit);
  EXPECT_DOUBLE_EQ(fit.matched_cosine, 0.75);
  EXPECT_DOUBLE_EQ(fit.mismatched_cosine, 0.125);
  EXPECT_EQ(back.config().width, 32);
  const std::vector<std::string> caps{f.corpus.val[0].caption};
  EXPECT_EQ((e.text_features(caps) - back.text_features(caps)).norm(), 0.0);
  std::filesystem::remove(path);
}

TEST(Evaluator, ContrastiveLossAtUniformLogitsIsLogBatch) {
  const auto& f = fixture();
  EvaluatorConfig c = small();
  c.temperature = 1e6;
  const Evaluator e(c, f.vocab, f.stats, 7);
  std::vector<std::string> caps;
  std::vector<MotionClip> clips;
  for (int i = 0; i < 5; ++i) {
    caps.push_back(f.corpus.train[static_cast<std::size_t>(i)].caption);
    clips.push_back(f.corpus.train[static_cast<std::size_t>(i)].clip);
  }
  NoGradScope<float> no_grad;
  EXPECT_NEAR(e.contrastive_loss(caps, clips).item(), std::log(5.0), 1e-4);
}
