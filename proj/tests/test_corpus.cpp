#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "bimot/corpus.hpp"
#include "bimot/instructions.hpp"
#include "bimot/vocab.hpp"

using namespace bimot;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

CorpusConfig small_config() {
  CorpusConfig c;
  c.count = 200;
  return c;
}

std::vector<std::string> captions_of(const std::vector<CorpusRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.caption);
  return out;
}

}  // namespace

TEST(GenerateClip, ZeroSpeedWalkStaysInPlace) {
  const MotionClip clip = generate_clip(MotionClass::kWalk, {0.0, 0.5, 0.0, 0.0}, 40, 3, 0.0);
  for (int f = 0; f < clip.frames; ++f) {
    EXPECT_EQ(clip.at(f, 0), clip.at(0, 0));
    EXPECT_EQ(clip.at(f, 2), clip.at(0, 2));
  }
}

TEST(GenerateClip, JumpApexEqualsHeight) {
  for (int frames : {16, 17, 33, 64}) {
    for (double h : {0.2, 0.5}) {
      const MotionClip clip = generate_clip(MotionClass::kJump, {0.0, h, 0.0, 0.0}, frames, 1, 0.0);
      double top = -1e9;
      for (int f = 0; f < frames; ++f) top = std::max(top, clip.at(f, 1));
      EXPECT_NEAR(top - clip.at(0, 1), h, 1e-6) << frames;
    }
  }
}

TEST(GenerateClip, DeterministicPerSeed) {
  const auto a = generate_clip(MotionClass::kRun, {2.2, 0.5, 0.0, 0.0}, 30, 9);
  const auto b = generate_clip(MotionClass::kRun, {2.2, 0.5, 0.0, 0.0}, 30, 9);
  const auto c = generate_clip(MotionClass::kRun, {2.2, 0.5, 0.0, 0.0}, 30, 10);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
}

TEST(GenerateClip, ParamsOutOfRangeRejected) {
  EXPECT_THROW(generate_clip(MotionClass::kWalk, {-1.0, 0.5, 0.0, 0.0}, 20, 1), ContractError);
  EXPECT_THROW(generate_clip(MotionClass::kCircle, {0.8, 0.0, 1.0, 0.0}, 20, 1), ContractError);
  EXPECT_THROW(parse_class("moonwalk"), ContractError);
}

TEST(GenerateClip, CircleReturnsNearStartAfterFullLoop) {
  const double r = 0.5, v = 0.8;
  const int frames = static_cast<int>(std::round(2 * M_PI * r / v * kFps));
  const auto clip = generate_clip(MotionClass::kCircle, {v, r, 1.0, 0.0}, frames + 1, 1, 0.0);
  EXPECT_NEAR(clip.at(frames, 0), 0.0, 0.05);
  EXPECT_NEAR(clip.at(frames, 2), 0.0, 0.05);
  double zmax = 0;
  for (int f = 0; f <= frames; ++f) zmax = std::max(zmax, clip.at(f, 2));
  EXPECT_NEAR(zmax, 2 * r, 0.01);
}

TEST(Captions, ClassWordAppearsInEveryTemplate) {
  const Corpus corpus = generate_corpus(small_config());
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& r : *split) {
      for (const auto& cap : render_all_captions(r.label, r.params)) {
        EXPECT_EQ(caption_class(cap), static_cast<int>(r.label)) << cap;
      }
    }
  }
}

TEST(Corpus, StratifiedCounts) {
  const Corpus corpus = generate_corpus({});
  std::array<int, kNumClasses> counts{};
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& r : *split) counts[static_cast<int>(r.label)]++;
  }
  for (int c : counts) {
    EXPECT_GE(c, 80);
    EXPECT_LE(c, 120);
  }
  EXPECT_EQ(corpus.train.size(), 800u);
  EXPECT_EQ(corpus.val.size(), 100u);
  EXPECT_EQ(corpus.test.size(), 100u);
}

TEST(Corpus, SplitsDisjoint) {
  const Corpus corpus = generate_corpus(small_config());
  std::set<std::string> train;
  for (const auto& r : corpus.train) train.insert(r.id);
  for (const auto* split : {&corpus.val, &corpus.test}) {
    for (const auto& r : *split) EXPECT_FALSE(train.contains(r.id)) << r.id;
  }
}

TEST(Corpus, FilesByteIdenticalAcrossRuns) {
  const auto dir = std::filesystem::temp_directory_path() / "bimot_corpus_test";
  const Corpus a = generate_corpus(small_config());
  const Corpus b = generate_corpus(small_config());
  write_jsonl(dir / "a.jsonl", a.train);
  write_jsonl(dir / "b.jsonl", b.train);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));

  const auto back = read_jsonl(dir / "a.jsonl");
  ASSERT_EQ(back.size(), a.train.size());
  EXPECT_EQ(back[3].clip.values, a.train[3].clip.values);
  EXPECT_EQ(back[3].caption, a.train[3].caption);
  EXPECT_EQ(back[3].label, a.train[3].label);
  std::filesystem::remove_all(dir);
}

TEST(Corpus, TooSmallRejected) {
  CorpusConfig c;
  c.count = 50;
  EXPECT_THROW(generate_corpus(c), ConfigError);
}

TEST(Corpus, StandardizedTrainStatistics) {
  const Corpus corpus = generate_corpus({});
  const MotionStats stats = MotionStats::compute(corpus.train);
  std::vector<double> sum(kMotionDims, 0.0), sq(kMotionDims, 0.0);
  double n = 0;
  for (const auto& r : corpus.train) {
    const auto z = stats.standardize(r.clip);
    for (int f = 0; f < z.frames; ++f) {
      for (int d = 0; d < kMotionDims; ++d) {
        sum[d] += z.at(f, d);
        sq[d] += z.at(f, d) * z.at(f, d);
      }
      n += 1;
    }
  }
  for (int d = 0; d < kMotionDims; ++d) {
    const double m = sum[d] / n;
    EXPECT_LT(std::abs(m), 0.05);
    const double sd = std::sqrt(sq[d] / n - m * m);
    EXPECT_GE(sd, 0.9);
    EXPECT_LE(sd, 1.1);
  }
  const auto round = stats.destandardize(stats.standardize(corpus.train[0].clip));
  for (std::size_t i = 0; i < round.values.size(); ++i) {
    EXPECT_NEAR(round.values[i], corpus.train[0].clip.values[i], 1e-12);
  }
}

TEST(Vocabulary, TokenizeRoundTripAndUnknown) {
  const Corpus corpus = generate_corpus(small_config());
  auto texts = captions_of(corpus.train);
  const Vocabulary vocab = Vocabulary::build(texts);
  for (const auto& cap : texts) EXPECT_EQ(vocab.detokenize(vocab.tokenize(cap)), cap);
  const auto ids = vocab.tokenize("a person walks forward");
  ASSERT_EQ(ids.size(), 4u);
  EXPECT_EQ(ids[0], vocab.id("a"));
  EXPECT_EQ(ids[2], vocab.id("walks"));
  EXPECT_NE(ids[2], vocab.unk());
  EXPECT_EQ(vocab.tokenize("a person moonwalks")[2], vocab.unk());
}

TEST(Vocabulary, SpecialTokensAtTopAndStable) {
  const std::vector<std::string> texts{"a person jumps high", "generate motion :"};
  const Vocabulary vocab = Vocabulary::build(texts);
  const int n = vocab.size();
  EXPECT_EQ(vocab.holder_out(), n - 1);
  EXPECT_EQ(vocab.holder_in(), n - 2);
  EXPECT_EQ(vocab.eom(), n - 3);
  EXPECT_EQ(vocab.som(), n - 4);
  EXPECT_EQ(vocab.base_size(), n - 4);
  for (int special : {vocab.unk(), vocab.pad(), vocab.bos(), vocab.eos()}) {
    EXPECT_GE(special, n - 8);
  }
  const auto path = std::filesystem::temp_directory_path() / "bimot_vocab_test.json";
  vocab.save(path);
  const Vocabulary back = Vocabulary::load(path);
  EXPECT_EQ(back.size(), n);
  EXPECT_EQ(back.som(), vocab.som());
  EXPECT_EQ(back.id("jumps"), vocab.id("jumps"));
  std::filesystem::remove(path);
  EXPECT_EQ(vocab.tokenize("<som> jumps <eom>"), (std::vector<int>{vocab.som(), vocab.id("jumps"), vocab.eom()}));
}

TEST(Instructions, TextToMotionTemplate) {
  std::vector<std::string> texts = instruction_phrases();
  texts.emplace_back("a person jumps");
  const Vocabulary vocab = Vocabulary::build(texts);
  InstructionSlots slots;
  slots.caption = "a person jumps";
  const Instruction ins = make_instruction(vocab, Task::kT2M, slots, 4);
  EXPECT_EQ(vocab.detokenize(ins.sequence.tokens()),
            "<bos> generate motion : a person jumps <som> <mholder_out> <mholder_out> <mholder_out> "
            "<mholder_out> <eom> <eos>");
  ASSERT_EQ(ins.output_begin, 8);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(ins.sequence.items[8 + i].modality, Modality::kMotion);
  int supervised = 0;
  for (std::size_t i = 0; i < ins.loss_mask.size(); ++i) {
    if (ins.loss_mask[i]) {
      ++supervised;
      EXPECT_EQ(ins.targets[i], vocab.som());
    }
  }
  EXPECT_EQ(supervised, 1);
}

TEST(Instructions, MotionToTextSupervisesCaptionOnly) {
  std::vector<std::string> texts = instruction_phrases();
  texts.emplace_back("a person claps slowly");
  const Vocabulary vocab = Vocabulary::build(texts);
  InstructionSlots slots;
  slots.caption = "a person claps slowly";
  slots.motion = std::vector<double>(16, 0.5);
  const Instruction ins = make_instruction(vocab, Task::kM2T, slots, 4, 0);
  EXPECT_EQ(vocab.detokenize(ins.sequence.tokens()),
            "<bos> describe : <som> <mholder_in> <eom> a person claps slowly <eos>");
  EXPECT_EQ(ins.output_begin, -1);
  std::vector<int> supervised_targets;
  for (std::size_t i = 0; i < ins.loss_mask.size(); ++i) {
    if (ins.loss_mask[i]) supervised_targets.push_back(ins.targets[i]);
  }
  auto want = vocab.tokenize("a person claps slowly");
  want.push_back(vocab.eos());
  EXPECT_EQ(supervised_targets, want);
  const auto& in = ins.sequence.items[4];
  EXPECT_EQ(in.modality, Modality::kMotion);
  EXPECT_EQ(in.latent, 0);
}

TEST(Instructions, PredictAndPlainTextAndMissingSlots) {
  std::vector<std::string> texts = instruction_phrases();
  texts.emplace_back("a person squats deeply slowly");
  const Vocabulary vocab = Vocabulary::build(texts);
  InstructionSlots slots;
  EXPECT_THROW(make_instruction(vocab, Task::kT2M, slots, 4), TemplateError);
  EXPECT_THROW(make_instruction(vocab, Task::kM2T, slots, 4), TemplateError);
  EXPECT_THROW(make_instruction(vocab, Task::kPredict, slots, 4), TemplateError);
  slots.motion = std::vector<double>(16, 0.0);
  const Instruction p = make_instruction(vocab, Task::kPredict, slots, 2, 0);
  EXPECT_EQ(vocab.detokenize(p.sequence.tokens()),
            "<bos> predict motion : <som> <mholder_in> <eom> <som> <mholder_out> <mholder_out> <eom> <eos>");

  slots.caption = "a person squats deeply slowly";
  EXPECT_THROW(make_instruction(vocab, Task::kPlainText, slots, 0), TemplateError);
  slots.paraphrase = "a person slowly squats deeply";
  const Instruction t = make_instruction(vocab, Task::kPlainText, slots, 0, 1);
  EXPECT_EQ(vocab.detokenize(t.sequence.tokens()),
            "<bos> rephrase : a person squats deeply slowly = a person slowly squats deeply <eos>");
}

TEST(Instructions, FivePhrasingsPerTaskAreDistinct) {
  std::vector<std::string> texts = instruction_phrases();
  texts.emplace_back("a person waves");
  const Vocabulary vocab = Vocabulary::build(texts);
  InstructionSlots slots;
  slots.caption = "a person waves";
  std::set<std::vector<int>> seen;
  for (int k = 0; k < kPhrasingsPerTask; ++k) seen.insert(make_instruction(vocab, Task::kT2M, slots, 4, k).sequence.tokens());
  EXPECT_EQ(seen.size(), 5u);
}
