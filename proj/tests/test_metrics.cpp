#include <gtest/gtest.h>

#include <cmath>

#include "bimot/metrics.hpp"
#include "bimot/nn.hpp"

using namespace bimot;

namespace {

// Four-point design per dimension: columns are orthogonal with zero mean, so the
// sample covariance is exactly diag(4/3 * scale^2).
Features box(double a, double b, double ma, double mb) {
  Features f(4, 2);
  f << a + ma, b + mb, a + ma, -b + mb, -a + ma, b + mb, -a + ma, -b + mb;
  return f;
}

Tokens words(const std::string& s) {
  Tokens out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto j = s.find(' ', i);
    out.push_back(s.substr(i, j == std::string::npos ? std::string::npos : j - i));
    if (j == std::string::npos) break;
    i = j + 1;
  }
  return out;
}

}  // namespace

TEST(Fid, MatchesClosedFormForDiagonalCovariances) {
  const double a = 1.5, b = 0.5, c = 0.7, d = 2.0;
  const Features real = box(a, b, 0.0, 1.0);
  const Features gen = box(c, d, 2.0, -1.0);
  const double expected = 4.0 + 4.0 + 4.0 / 3.0 * ((a - c) * (a - c) + (b - d) * (b - d));
  EXPECT_NEAR(fid(real, gen), expected, 1e-9);
}

TEST(Fid, ZeroForIdenticalSetsAndOrderFree) {
  Rng rng(4);
  Features x(40, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng);
  EXPECT_NEAR(fid(x, x), 0.0, 1e-8);
  Features flipped = x.colwise().reverse();
  EXPECT_NEAR(fid(x, flipped), 0.0, 1e-8);
  Features shifted = x.array() + 0.5;
  EXPECT_NEAR(fid(x, shifted), 6 * 0.25, 1e-8);
  EXPECT_THROW(fid(x.topRows(1), x), EvaluationError);
}

TEST(RPrecision, PerfectAndAdversarialPairings) {
  Features text = Features::Identity(16, 16) * 3.0;
  auto r = r_precision(text, text, 8);
  EXPECT_EQ(r.batches, 2u);
  EXPECT_DOUBLE_EQ(r.top1, 1.0);
  EXPECT_DOUBLE_EQ(r.top3, 1.0);

  // Pair each text with the motion one slot over: the matching motion is never the true pair.
  Features motion(16, 16);
  for (int i = 0; i < 16; ++i) motion.row(i) = text.row((i / 8) * 8 + (i % 8 + 1) % 8);
  r = r_precision(text, motion, 8);
  EXPECT_DOUBLE_EQ(r.top1, 0.0);
  EXPECT_THROW(r_precision(text.topRows(4), motion.topRows(4), 8), EvaluationError);
}

TEST(RPrecision, RandomFeaturesSitNearChance) {
  Rng rng(9);
  Features t(4000, 8), m(4000, 8);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = gaussian(rng);
    m.data()[i] = gaussian(rng);
  }
  const auto r = r_precision(t, m, 8);
  EXPECT_NEAR(r.top1, 1.0 / 8, 0.02);
  EXPECT_NEAR(r.top3, 3.0 / 8, 0.03);
}

TEST(MmDist, MeanRowDistance) {
  Features a = Features::Zero(2, 2), b(2, 2);
  b << 3, 4, 0, 1;
  EXPECT_DOUBLE_EQ(mm_dist(a, b), 3.0);
}

TEST(Diversity, ZeroForConstantFeaturesAndScalesLinearly) {
  Features same = Features::Ones(20, 4);
  EXPECT_DOUBLE_EQ(diversity(same, 10, 1), 0.0);
  Rng rng(2);
  Features x(50, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng);
  EXPECT_NEAR(diversity(Features(2.0 * x), 30, 7), 2.0 * diversity(x, 30, 7), 1e-12);
  EXPECT_THROW(diversity(x, 51, 0), EvaluationError);
}

TEST(Multimodality, PairwiseMeanWithinGroups) {
  Features line(3, 1);
  line << 0, 1, 2;
  Features pair(2, 1);
  pair << 0, 5;
  EXPECT_NEAR(multimodality({line}), 4.0 / 3.0, 1e-12);
  EXPECT_NEAR(multimodality({line, pair}), (4.0 / 3.0 + 5.0) / 2, 1e-12);
}

TEST(Bleu, ClippedUnigramPrecision) {
  EXPECT_NEAR(bleu(words("a a a"), {words("a b c")}, 1), 1.0 / 3, 1e-12);
  EXPECT_NEAR(unigram_precision(words("the the the the the the the"), {words("the cat is on the mat")}), 2.0 / 7,
              1e-12);
  EXPECT_DOUBLE_EQ(bleu(words("a person walks forward"), {words("a person walks forward")}, 4), 1.0);
}

TEST(Bleu, BrevityPenaltyUsesClosestReference) {
  EXPECT_NEAR(bleu(words("a b"), {words("a b c d")}, 1), std::exp(-1.0), 1e-12);
  EXPECT_NEAR(bleu(words("a b"), {words("a b c d"), words("a b x")}, 1), std::exp(1.0 - 3.0 / 2.0), 1e-12);
}

TEST(Bleu, MissingHigherOrderMatchGivesZero) {
  EXPECT_DOUBLE_EQ(bleu(words("b a"), {words("a b")}, 2), 0.0);
  EXPECT_DOUBLE_EQ(bleu({}, {words("a b")}, 1), 0.0);
}

TEST(RougeL, LongestCommonSubsequenceF) {
  const double p = 2.0 / 4, r = 2.0 / 3, b2 = 1.44;
  EXPECT_NEAR(rouge_l(words("a b c d"), words("a c e")), (1 + b2) * p * r / (r + b2 * p), 1e-12);
  EXPECT_DOUBLE_EQ(rouge_l(words("x y"), words("a b")), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l(words("a b"), {words("x"), words("a b")}), 1.0);
}

TEST(MeanCi, NormalApproximation) {
  const std::vector<double> v{1, 2, 3};
  const auto m = mean_ci95(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_NEAR(m.ci95, 1.96 / std::sqrt(3.0), 1e-12);
}

TEST(TemplateOracle, LabelsHeldOutClips) {
  CorpusConfig cc;
  cc.count = 300;
  const auto corpus = generate_corpus(cc);
  const auto stats = MotionStats::compute(corpus.train);
  const TemplateOracle oracle(corpus.train, stats);
  for (const auto& r : corpus.train) EXPECT_EQ(oracle.classify(r.clip), r.label);
  int hits = 0;
  for (const auto& r : corpus.val) hits += oracle.classify(r.clip) == r.label;
  EXPECT_GE(hits, static_cast<int>(0.8 * corpus.val.size()));
}

TEST(Fid, SymmetricAndShiftedGaussians) {
  Rng rng(21);
  Features a(2000, 3), b(2000, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = gaussian(rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = 1.0 + gaussian(rng);
  EXPECT_NEAR(fid(a, b), fid(b, a), 1e-8);
  // Unit mean shift in each of 3 dims, matching covariances.
  EXPECT_NEAR(fid(a, b), 3.0, 0.25);
}

TEST(RPrecision, TopKIsMonotone) {
  Rng rng(5);
  Features text(64, 4), motion(64, 4);
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = gaussian(rng);
  for (Eigen::Index i = 0; i < motion.size(); ++i) motion.data()[i] = text.data()[i] + 0.8 * gaussian(rng);
  const auto r = r_precision(text, motion, 8);
  EXPECT_LE(r.top1, r.top2);
  EXPECT_LE(r.top2, r.top3);
  EXPECT_GT(r.top3, 3.0 / 8.0);
}

TEST(Bleu, DisjointVocabularyScoresZero) {
  const std::vector<Tokens> refs{words("a person walks forward"), words("someone walks ahead")};
  EXPECT_DOUBLE_EQ(bleu(words("the cat sat down"), refs, 1), 0.0);
  EXPECT_DOUBLE_EQ(bleu(words("the cat sat down"), refs, 4), 0.0);
  EXPECT_DOUBLE_EQ(unigram_precision(words("the cat"), refs), 0.0);
}
