#include <gtest/gtest.h>

#include "bimot/backbone.hpp"
#include "test_util.hpp"

using namespace bimot;
using bimot::testing::named_params;
using bimot::testing::random_hybrid;
using bimot::testing::random_vector;

namespace {

Vocabulary small_vocab() {
  const std::vector<std::string> texts{"a person walks forward and then jumps", "someone waves the left hand"};
  return Vocabulary::build(texts);
}

BackboneConfig config_for(const Vocabulary& v, std::vector<std::uint8_t> placement = {}) {
  BackboneConfig c;
  c.vocab = v.size();
  c.layers = 4;
  c.width = 16;
  c.heads = 2;
  c.ffn = 32;
  c.latent = 4;
  c.cond_dim = 8;
  c.context = 48;
  c.shared_layers = std::move(placement);
  return c;
}

std::vector<std::vector<std::uint8_t>> placements() { return {{1, 1, 1, 1}, {0, 0, 0, 0}, {0, 1, 1, 1}}; }

}  // namespace

TEST(Backbone, RoutingPartitionsPositions) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 1);
  Rng rng(2);
  std::vector<HybridSequence> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_hybrid(vocab, 5 + 4 * i, 4, 0.4, rng));
  const auto out = model.forward(batch);
  std::size_t total = 0;
  for (const auto& s : batch) total += s.size();
  std::vector<int> seen(total, 0);
  for (auto r : out.text_rows) seen[r] += 1;
  for (auto r : out.motion_rows) seen[r] += 2;
  std::size_t off = 0;
  for (const auto& s : batch) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(seen[off + i], s.items[i].modality == Modality::kText ? 1 : 2);
    }
    off += s.size();
  }
  EXPECT_TRUE(std::is_sorted(out.text_rows.begin(), out.text_rows.end()));
  EXPECT_TRUE(std::is_sorted(out.motion_rows.begin(), out.motion_rows.end()));
  EXPECT_EQ(out.logits.shape(), (Shape{out.text_rows.size(), static_cast<std::size_t>(vocab.size())}));
  EXPECT_EQ(out.motion_states.shape(), (Shape{out.motion_rows.size(), 16}));
}

TEST(Backbone, PlaceholderOnTextBranchIsRejected) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 1);
  HybridSequence s;
  s.push_text(vocab.bos());
  s.push_text(vocab.holder_out());
  EXPECT_THROW(model.forward(std::span<const HybridSequence>(&s, 1)), ContractError);
  HybridSequence t;
  t.items.push_back({vocab.holder_in(), Modality::kMotion, 3});
  EXPECT_THROW(model.forward(std::span<const HybridSequence>(&t, 1)), ContractError);
}

TEST(Backbone, TextOnlyInputMatchesStandaloneTextModelBitwise) {
  const auto vocab = small_vocab();
  for (const auto& placement : placements()) {
    Backbone<double> model(config_for(vocab, placement), 3);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const auto seq = random_hybrid(vocab, 1 + rng() % 30, 4, 0.0, rng);
      const auto a = model.forward(std::span<const HybridSequence>(&seq, 1)).logits;
      const auto tokens = seq.tokens();
      const auto b = model.text_only_logits(tokens);
      ASSERT_EQ(a.shape(), b.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.values()[i], b.values()[i]);
    }
  }
}

TEST(Backbone, FutureItemsDoNotChangePastOutputs) {
  const auto vocab = small_vocab();
  for (const auto& placement : placements()) {
    Backbone<double> model(config_for(vocab, placement), 5);
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      const auto seq = random_hybrid(vocab, 12, 4, 0.4, rng);
      const std::size_t cut = 1 + rng() % 11;
      auto changed = random_hybrid(vocab, 12, 4, 0.4, rng);
      // Keep the prefix [0, cut), replace the rest.
      HybridSequence mixed;
      for (std::size_t i = 0; i < 12; ++i) {
        const auto& src = i < cut ? seq : changed;
        const auto& it = src.items[i];
        if (it.latent >= 0) {
          mixed.push_motion_input(it.token, src.latents[static_cast<std::size_t>(it.latent)]);
        } else {
          mixed.items.push_back(it);
        }
      }
      const auto a = model.forward(std::span<const HybridSequence>(&seq, 1));
      const auto b = model.forward(std::span<const HybridSequence>(&mixed, 1));
      for (std::size_t r = 0; r < a.text_rows.size() && a.text_rows[r] < cut; ++r) {
        for (std::size_t j = 0; j < a.logits.cols(); ++j) ASSERT_NEAR(a.logits.at(r, j), b.logits.at(r, j), 1e-12);
      }
      for (std::size_t r = 0; r < a.motion_rows.size() && a.motion_rows[r] < cut; ++r) {
        for (std::size_t j = 0; j < 16; ++j) {
          ASSERT_NEAR(a.motion_states.at(r, j), b.motion_states.at(r, j), 1e-12);
        }
      }
    }
  }
}

TEST(Backbone, BatchingMatchesSingleSequences) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab, {0, 1, 1, 1}), 7);
  Rng rng(8);
  std::vector<HybridSequence> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_hybrid(vocab, 3 + rng() % 10, 4, 0.3, rng));
  const auto joint = model.forward(batch);
  std::size_t tr = 0;
  for (const auto& s : batch) {
    const auto one = model.forward(std::span<const HybridSequence>(&s, 1));
    for (std::size_t r = 0; r < one.text_rows.size(); ++r, ++tr) {
      for (std::size_t j = 0; j < one.logits.cols(); ++j) {
        ASSERT_NEAR(one.logits.at(r, j), joint.logits.at(tr, j), 1e-12);
      }
    }
  }
}

TEST(Backbone, GradCheckBothBranches) {
  const auto vocab = small_vocab();
  auto cfg = config_for(vocab, {0, 1});
  cfg.layers = 2;
  cfg.width = 8;
  cfg.ffn = 12;
  cfg.motion_ffn_ratio = 0.5;
  Backbone<double> model(cfg, 9);
  Rng rng(10);
  HybridSequence seq;
  seq.push_text(vocab.bos());
  seq.push_text(vocab.id("walks"));
  seq.push_text(vocab.som());
  seq.push_motion_input(vocab.holder_in(), random_vector(4, rng));
  seq.push_holder(vocab.holder_out());
  seq.push_holder(vocab.holder_out());
  seq.push_text(vocab.eom());
  const Tensor<double> wl({4, static_cast<std::size_t>(vocab.size())},
                          random_vector(4 * static_cast<std::size_t>(vocab.size()), rng));
  const Tensor<double> wc({2, 8}, random_vector(16, rng));
  const auto res = grad_check(
      [&] {
        const auto out = model.forward(std::span<const HybridSequence>(&seq, 1));
        const auto c = model.holder_conditions(out, std::span<const HybridSequence>(&seq, 1), 2);
        return add(sum(mul(out.logits, wl)), sum(mul(c, wc)));
      },
      named_params(model.params()), {1e-5, 1e-6, 12, 3});
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param;
}

TEST(Backbone, HolderConditionsShapeAndCount) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 11);
  HybridSequence seq;
  seq.push_text(vocab.bos());
  seq.push_text(vocab.som());
  for (int i = 0; i < 4; ++i) seq.push_holder(vocab.holder_out());
  std::vector<HybridSequence> batch{seq, seq};
  const auto out = model.forward(batch);
  EXPECT_EQ(model.holder_conditions(out, batch, 4).shape(), (Shape{8, 8}));
  EXPECT_THROW(model.holder_conditions(out, batch, 3), ContractError);
  Rng rng(1);
  EXPECT_EQ(model.und_head(Tensor<double>({3, 4}, random_vector(12, rng))).shape(), (Shape{3, 16}));
}

TEST(Backbone, SpecialRowsHaveTheirOwnGroup) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 12);
  std::size_t special = 0;
  for (const auto& p : model.params().params()) {
    if (p.group == kTextSpecialGroup) special += p.tensor.numel();
    if (p.name.starts_with("motion.")) {
      EXPECT_EQ(p.group, kMotionGroup) << p.name;
    }
  }
  EXPECT_EQ(special, 2u * 4u * 16u);
}

TEST(GenerateText, GreedyIsDeterministicAndStops) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 13);
  HybridSequence prompt;
  prompt.push_text(vocab.bos());
  prompt.push_text(vocab.id("a"));
  const long long before = model.forward_count();
  const auto a = generate_text(model, vocab, prompt, {}, 20);
  const long long calls = model.forward_count() - before;
  EXPECT_EQ(calls, static_cast<long long>(a.size() - prompt.size()));
  const auto b = generate_text(model, vocab, prompt, {}, 20);
  EXPECT_EQ(a.tokens(), b.tokens());
  EXPECT_LE(a.size(), 20u);
  for (std::size_t i = prompt.size(); i < a.size(); ++i) {
    const int t = a.items[i].token;
    EXPECT_NE(t, vocab.holder_in());
    EXPECT_NE(t, vocab.holder_out());
    EXPECT_NE(t, vocab.pad());
    EXPECT_NE(t, vocab.bos());
    if (i + 1 < a.size()) {
      EXPECT_NE(t, vocab.eos());
      EXPECT_NE(t, vocab.som());
    }
  }
}

TEST(GenerateText, SeededSamplingIsReproducible) {
  const auto vocab = small_vocab();
  Backbone<double> model(config_for(vocab), 14);
  HybridSequence prompt;
  prompt.push_text(vocab.bos());
  TextSampler s{SamplerKind::kTopK, 3, 1.0, 5};
  EXPECT_EQ(generate_text(model, vocab, prompt, s, 15).tokens(), generate_text(model, vocab, prompt, s, 15).tokens());
  s.kind = SamplerKind::kTemperature;
  s.temperature = 2.0;
  EXPECT_EQ(generate_text(model, vocab, prompt, s, 15).tokens(), generate_text(model, vocab, prompt, s, 15).tokens());
}

TEST(Backbone, IsolatedLayersKeepBranchesApart) {
  const auto vocab = small_vocab();
  Backbone<double> isolated(config_for(vocab, {0, 0, 0, 0}), 15);
  Backbone<double> shared(config_for(vocab, {1, 1, 1, 1}), 15);
  Rng rng(16);
  HybridSequence a;
  a.push_text(vocab.bos());
  a.push_motion_input(vocab.holder_in(), random_vector(4, rng));
  a.push_holder(vocab.holder_out());
  HybridSequence b = a;
  b.items[0].token = vocab.id("jumps");
  const auto ia = isolated.forward(std::span<const HybridSequence>(&a, 1)).motion_states.to_vector();
  const auto ib = isolated.forward(std::span<const HybridSequence>(&b, 1)).motion_states.to_vector();
  EXPECT_EQ(ia, ib);
  const auto sa = shared.forward(std::span<const HybridSequence>(&a, 1)).motion_states.to_vector();
  const auto sb = shared.forward(std::span<const HybridSequence>(&b, 1)).motion_states.to_vector();
  EXPECT_NE(sa, sb);
}
