#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "bimot/checkpoint.hpp"
#include "bimot/gradcheck.hpp"
#include "bimot/nn.hpp"
#include "bimot/ops.hpp"

using namespace bimot;

namespace {

Tensor<double> random_param(Shape shape, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * gaussian(rng);
  Tensor<double> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor<double> random_const(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = gaussian(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Reduces y to a scalar with fixed random weights so no gradient is trivially uniform.
Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_const(y.shape(), rng)));
}

std::vector<double> values_of(const Tensor<double>& t) { return t.to_vector(); }

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values_of(matmul(eye, b)), (std::vector<double>{5, 6, 7, 8}));
  Tensor<double> row({1, 2}, {1, 2});
  Tensor<double> col({2, 1}, {3, 4});
  auto r = matmul(row, col);
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tensor<double> a({3, 4}), b({5, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos);
    EXPECT_NE(msg.find("[5x2]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({4, 2}, rng);
  auto res = grad_check([&] { return weighted_sum(matmul(a, b), 11); }, {{"a", a}, {"b", b}});
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst_param << "[" << res.worst_index << "]";
}

TEST(Softmax, KnownValues) {
  auto s = softmax(Tensor<double>({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.values()[1], 0.5);
  auto big = softmax(Tensor<double>({2}, {1000, 1000}));
  EXPECT_DOUBLE_EQ(big.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(big.values()[1], 0.5);
  auto third = softmax(Tensor<double>({2}, {0, std::log(3.0)}));
  EXPECT_NEAR(third.values()[0], 0.25, 1e-15);
  EXPECT_NEAR(third.values()[1], 0.75, 1e-15);
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 7;
    std::vector<double> v(r * c);
    for (auto& x : v) x = 20.0 * gaussian(rng);
    auto s = softmax(Tensor<double>({r, c}, v));
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const double p = s.at(i, j);
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, NonLastAxis) {
  Tensor<double> x({2, 2}, {0, 1, std::log(3.0), 1});
  auto s = softmax(x, 0);
  EXPECT_NEAR(s.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(s.at(1, 0), 0.75, 1e-15);
  EXPECT_NEAR(s.at(0, 1), 0.5, 1e-15);
}

TEST(LayerNorm, ConstantRowAndUnitVarianceRow) {
  Tensor<double> g({3}, 1.0), b({3}, 0.0);
  auto y = layer_norm(Tensor<double>({1, 3}, {1, 1, 1}), g, b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
  Tensor<double> g2({2}, 1.0), b2({2}, 0.0);
  auto y2 = layer_norm(Tensor<double>({1, 2}, {-1, 1}), g2, b2);
  EXPECT_NEAR(y2.values()[0], -1.0, 1e-5);
  EXPECT_NEAR(y2.values()[1], 1.0, 1e-5);
}

TEST(LayerNorm, Gradcheck) {
  Rng rng(9);
  auto x = random_param({1, 6}, rng);
  auto g = random_param({6}, rng);
  auto b = random_param({6}, rng);
  auto res = grad_check([&] { return weighted_sum(layer_norm(x, g, b), 2); }, {{"x", x}, {"g", g}, {"b", b}});
  EXPECT_LT(res.max_rel_error, 1e-5) << res.worst_param;
}

TEST(Elementwise, GeluAtZero) {
  EXPECT_EQ(gelu(Tensor<double>({1}, {0.0})).item(), 0.0);
}

TEST(Indexing, ScatterReassemblesRows) {
  // rows [A,B] to positions [2,0] of a buffer holding C at row 1 -> [B,C,A]
  Tensor<double> dest({3, 2}, {0, 0, 3, 3, 0, 0});
  Tensor<double> src({2, 2}, {1, 1, 2, 2});
  std::vector<std::size_t> pos{2, 0};
  auto out = scatter_by_index(dest, src, pos);
  EXPECT_EQ(values_of(out), (std::vector<double>{2, 2, 3, 3, 1, 1}));
}

TEST(Indexing, ScatterThenGatherIsIdentity) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 10, c = 1 + rng() % 4;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto src = random_const({n, c}, rng);
    auto merged = scatter_by_index(Tensor<double>({n, c}), src, perm);
    auto back = index_select(merged, perm);
    EXPECT_EQ(values_of(back), values_of(src));
  }
}

TEST(Indexing, RepeatedScatterPositionRejected) {
  std::vector<std::size_t> pos{1, 1};
  EXPECT_THROW(scatter_by_index(Tensor<double>({3, 1}), Tensor<double>({2, 1}), pos), IndexError);
}

TEST(Embedding, OnlyLookedUpRowsReceiveGradient) {
  Rng rng(4);
  auto table = random_param({6, 3}, rng);
  std::vector<int> ids{1, 4, 1};
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(weighted_sum(embedding_lookup(table, ids), 8));
  }
  auto g = table.grad();
  for (std::size_t row = 0; row < 6; ++row) {
    bool any = false;
    for (std::size_t j = 0; j < 3; ++j) any = any || g[row * 3 + j] != 0.0;
    EXPECT_EQ(any, row == 1 || row == 4) << "row " << row;
  }
}

TEST(Embedding, OutOfRangeIdThrows) {
  Tensor<double> table({4, 2});
  std::vector<int> ids{4};
  EXPECT_THROW(embedding_lookup(table, ids), IndexError);
  std::vector<int> neg{-1};
  EXPECT_THROW(embedding_lookup(table, neg), IndexError);
}

TEST(CrossEntropy, AnalyticValues) {
  std::vector<int> tgt{2};
  std::vector<std::uint8_t> on{1};
  auto confident = cross_entropy_masked(Tensor<double>({1, 4}, {-50, -50, 50, -50}), tgt, on);
  EXPECT_NEAR(confident.item(), 0.0, 1e-12);
  auto uniform = cross_entropy_masked(Tensor<double>({1, 4}, 0.0), tgt, on);
  EXPECT_NEAR(uniform.item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, MaskedPositionHasExactlyZeroGradient) {
  Rng rng(12);
  auto logits = random_param({3, 5}, rng);
  std::vector<int> tgt{1, -7, 3};  // masked-out targets are never read
  std::vector<std::uint8_t> mask{1, 0, 1};
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(cross_entropy_masked(logits, tgt, mask));
  }
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(logits.grad()[5 + j], 0.0);
  EXPECT_NE(logits.grad()[0], 0.0);
}

TEST(CrossEntropy, AllMaskedIsAnError) {
  std::vector<int> tgt{0, 0};
  std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(cross_entropy_masked(Tensor<double>({2, 3}), tgt, mask), EmptyLossError);
}

TEST(Backward, SumAndQuadratic) {
  Rng rng(1);
  auto x = random_param({2, 3}, rng);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor<double> v({1, 2}, {1, 2});
  v.set_requires_grad(true);
  Tape<double> tape2;
  {
    TapeScope<double> scope(tape2);
    tape2.backward(matmul_nt(v, v));
  }
  EXPECT_EQ(v.grad()[0], 2.0);
  EXPECT_EQ(v.grad()[1], 4.0);
}

TEST(Backward, NonScalarRootRejected) {
  Tensor<double> x({2, 2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, NothingRecordedWithoutTape) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad(true);
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    Rng rng(77);
    auto w = random_param({4, 4}, rng);
    auto x = random_const({6, 4}, rng);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(weighted_sum(softmax(gelu(matmul(x, w))), 5));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(2);
  auto x = random_param({5}, rng);
  auto res = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
  EXPECT_LT(res.max_rel_error, 1e-9);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  Rng rng(6);
  auto w = random_param({4, 6}, rng, 0.5);
  auto x = random_const({5, 4}, rng);
  std::vector<int> tgt{0, 5, 2, 2, 1};
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  auto res = grad_check([&] { return cross_entropy_masked(matmul(x, w), tgt, mask); }, {{"w", w}});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(GradCheck, NondeterministicFunctionRejected) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad(true);
  int calls = 0;
  EXPECT_THROW(grad_check([&] { return scale(sum(x), double(++calls)); }, {{"x", x}}), OracleInvalidError);
}

// Every primitive against central differences on 50 random shapes.
TEST(GradCheck, AllPrimitivesOnRandomShapes) {
  Rng rng(2024);
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const char* op, const GradCheckResult& r) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_op = op;
    }
  };
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 4, c = 1 + rng() % 5, k = 1 + rng() % 4;
    const std::uint64_t ws = rng();
    auto a = random_param({r, c}, rng);
    auto b = random_param({r, c}, rng);
    auto m = random_param({c, k}, rng);
    auto n = random_param({k, c}, rng);
    auto row = random_param({c}, rng);
    auto col = random_param({r}, rng);
    track("matmul", grad_check([&] { return weighted_sum(matmul(a, m), ws); }, {{"a", a}, {"m", m}}));
    track("matmul_nt", grad_check([&] { return weighted_sum(matmul_nt(a, n), ws); }, {{"a", a}, {"n", n}}));
    track("transpose", grad_check([&] { return weighted_sum(transpose(a), ws); }, {{"a", a}}));
    track("add/sub/mul",
          grad_check([&] { return weighted_sum(mul(add(a, b), sub(a, b)), ws); }, {{"a", a}, {"b", b}}));
    track("scale/add_scalar", grad_check([&] { return weighted_sum(add_scalar(scale(a, 1.7), 0.3), ws); }, {{"a", a}}));
    track("add_row/mul_row",
          grad_check([&] { return weighted_sum(mul_row(add_row(a, row), row), ws); }, {{"a", a}, {"row", row}}));
    track("mul_col", grad_check([&] { return weighted_sum(mul_col(a, col), ws); }, {{"a", a}, {"col", col}}));
    track("gelu", grad_check([&] { return weighted_sum(gelu(a), ws); }, {{"a", a}}));
    track("silu", grad_check([&] { return weighted_sum(silu(a), ws); }, {{"a", a}}));
    track("exp", grad_check([&] { return weighted_sum(exp(a), ws); }, {{"a", a}}));
    track("clamp", grad_check([&] { return weighted_sum(clamp(a, -0.5, 0.5), ws); }, {{"a", a}}));
    track("softmax", grad_check([&] { return weighted_sum(softmax(a), ws); }, {{"a", a}}));
    track("softmax0", grad_check([&] { return weighted_sum(softmax(a, 0), ws); }, {{"a", a}}));
    if (c > 1) {
      track("layer_norm", grad_check([&] { return weighted_sum(layer_norm(a, row, row), ws); }, {{"a", a}, {"row", row}}));
      track("slice_cols", grad_check([&] { return weighted_sum(slice_cols(a, 1, c), ws); }, {{"a", a}}));
    }
    std::vector<int> ids;
    for (std::size_t i = 0; i < r + 2; ++i) ids.push_back(static_cast<int>(rng() % r));
    track("embedding", grad_check([&] { return weighted_sum(embedding_lookup(a, ids), ws); }, {{"a", a}}));
    track("concat_rows", grad_check([&] { return weighted_sum(concat_rows<double>({a, b, a}), ws); }, {{"a", a}, {"b", b}}));
    track("concat_cols", grad_check([&] { return weighted_sum(concat_cols<double>({a, b}), ws); }, {{"a", a}, {"b", b}}));
    track("reshape", grad_check([&] { return weighted_sum(reshape(a, {c, r}), ws); }, {{"a", a}}));
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < r + 1; ++i) rows.push_back(rng() % r);
    track("index_select", grad_check([&] { return weighted_sum(index_select(a, rows), ws); }, {{"a", a}}));
    std::vector<std::size_t> perm(r);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(1 + rng() % r);
    auto src = random_param({perm.size(), c}, rng);
    track("scatter", grad_check([&] { return weighted_sum(scatter_by_index(a, src, perm), ws); }, {{"a", a}, {"src", src}}));
    track("mean", grad_check([&] { return mean(mul(a, a)); }, {{"a", a}}));
    track("row_sum_squares", grad_check([&] { return weighted_sum(row_sum_squares(a), ws); }, {{"a", a}}));
    track("mse", grad_check([&] { return mse(a, b); }, {{"a", a}, {"b", b}}));
    track("smooth_l1", grad_check([&] { return smooth_l1(scale(a, 3.0), b); }, {{"a", a}, {"b", b}}));
    track("l2_normalize", grad_check([&] { return weighted_sum(l2_normalize_rows(a), ws); }, {{"a", a}}));
    std::vector<RowSegment> segs{{0, r}};
    if (r > 1) segs = {{0, 1}, {1, r - 1}};
    track("segment_mean", grad_check([&] { return weighted_sum(segment_mean(a, segs), ws); }, {{"a", a}}));
    std::vector<int> tgt;
    std::vector<std::uint8_t> mask;
    for (std::size_t i = 0; i < r; ++i) {
      tgt.push_back(static_cast<int>(rng() % c));
      mask.push_back(i == 0 || rng() % 2);
    }
    track("cross_entropy", grad_check([&] { return cross_entropy_masked(a, tgt, mask); }, {{"a", a}}));

    const std::size_t heads = 1 + rng() % 2, width = heads * (1 + rng() % 3), len = 1 + rng() % 4;
    auto q = random_param({len + 2, width}, rng);
    auto kk = random_param({len + 2, width}, rng);
    auto vv = random_param({len + 2, width}, rng);
    AttentionLayout layout;
    layout.segments = {{0, len, 0, len}, {len, 2, len, 2}};
    layout.causal = rng() % 2;
    if (rng() % 2) {
      for (std::size_t i = 0; i < len + 2; ++i) layout.stream.push_back(static_cast<std::uint8_t>(rng() % 2));
    }
    track("attention", grad_check([&] { return weighted_sum(attention(q, kk, vv, heads, layout), ws); },
                                  {{"q", q}, {"k", kk}, {"v", vv}}));
  }
  EXPECT_LT(worst, 1e-4) << "worst primitive: " << worst_op;
}

TEST(Attention, CausalMaskBlocksFutureKeys) {
  Tensor<double> q({2, 2}, {1, 0, 0, 1});
  Tensor<double> k({2, 2}, {1, 0, 0, 1});
  Tensor<double> v({2, 2}, {10, 0, 0, 20});
  AttentionLayout layout;
  layout.segments = {{0, 2, 0, 2}};
  layout.causal = true;
  auto out = attention(q, k, v, 1, layout);
  EXPECT_EQ(out.at(0, 0), 10.0);
  EXPECT_EQ(out.at(0, 1), 0.0);
  EXPECT_GT(out.at(1, 0), 0.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(10);
  std::vector<float> f(17);
  std::vector<double> d(6);
  for (auto& x : f) x = static_cast<float>(gaussian(rng));
  for (auto& x : d) x = gaussian(rng);
  d[0] = -0.0;
  d[1] = 1e-310;  // subnormal
  ArrayArchive a;
  a.put("layer.w", std::span<const float>(f), Shape{17});
  a.put("table", std::span<const double>(d), Shape{2, 3});
  a.metadata()["frozen_groups"] = "text.base";
  const auto path = std::filesystem::temp_directory_path() / "bimot_ckpt_roundtrip.bin";
  a.save(path);
  auto b = ArrayArchive::load(path);
  EXPECT_EQ(b.entry("layer.w").bytes, a.entry("layer.w").bytes);
  EXPECT_EQ(b.entry("table").bytes, a.entry("table").bytes);
  EXPECT_EQ(b.entry("table").shape, (Shape{2, 3}));
  EXPECT_EQ(b.entry("layer.w").dtype, DType::kF32);
  EXPECT_EQ(b.metadata().at("frozen_groups"), "text.base");
  std::filesystem::remove(path);
}

TEST(Checkpoint, ParamStoreReloadsValues) {
  Rng rng(1);
  ParamStore<float> store;
  store.normal("w", "g", {3, 2}, 1.0, rng);
  ArrayArchive archive;
  store.save_to(archive);
  ParamStore<float> other;
  other.constant("w", "g", {3, 2}, 0.0f);
  other.load_from(archive);
  EXPECT_EQ(other.find("w").tensor.to_vector(), store.find("w").tensor.to_vector());
  ParamStore<float> wrong;
  wrong.constant("w", "g", {2, 3}, 0.0f);
  EXPECT_THROW(wrong.load_from(archive), DataError);
}
