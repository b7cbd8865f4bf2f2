#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ouro/ops.hpp"
#include "test_util.hpp"

using namespace ouro;
using namespace ouro::testing;

namespace {

// log-sum-exp cross entropy in long double, independent of the library.
double brute_force_ce(const Vec<double>& logits, const std::vector<std::int32_t>& targets, Index V) {
  long double total = 0.0L;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    long double z = 0.0L;
    for (Index v = 0; v < V; ++v) z += std::exp(static_cast<long double>(logits[static_cast<Index>(p) * V + v]));
    total += std::log(z) - logits[static_cast<Index>(p) * V + targets[p]];
  }
  return static_cast<double>(total / static_cast<long double>(targets.size()));
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(eye, m).value(), m.value());
}

TEST(Matmul, RowTimesColumn) {
  Tensor<double> a({1, 2}, {1, 2});
  Tensor<double> b({2, 1}, {3, 4});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c.item(), 11.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  Tensor<double> a({2, 3});
  Tensor<double> b({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto a = randn<double>({4, 5}, rng);
  auto b = randn<double>({5, 3}, rng);
  EXPECT_LT(fd_worst([&] { return sum(matmul(a, b)); }, {a}), 1e-6);
}

// Every differentiable op against central differences on ten random shapes.
TEST(GradCheck, EveryOpOnRandomShapes) {
  for (int trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(100 + trial);
    std::uniform_int_distribution<Index> ext(1, 4);
    const Index B = ext(rng), T = ext(rng), d = ext(rng) + 1, o = ext(rng);
    SCOPED_TRACE("trial " + std::to_string(trial));

    auto x = randn<double>({B, T, d}, rng);
    auto y = randn<double>({B, T, d}, rng);
    auto w = randn<double>({o, d}, rng);
    auto bias = randn<double>({o}, rng);
    auto g = randn<double>({d}, rng);
    auto m1 = randn<double>({B, d}, rng);
    auto m2 = randn<double>({d, o}, rng);

    EXPECT_LT(fd_worst([&] { return weighted_sum(matmul(m1, m2)); }, {m1, m2}), 1e-4) << "matmul";
    EXPECT_LT(fd_worst([&] { return weighted_sum(linear(x, w)); }, {x, w}), 1e-4) << "linear";
    EXPECT_LT(fd_worst([&] { return weighted_sum(linear(x, w, bias)); }, {x, w, bias}), 1e-4) << "linear+bias";
    EXPECT_LT(fd_worst([&] { return weighted_sum(add(x, y)); }, {x, y}), 1e-4) << "add";
    EXPECT_LT(fd_worst([&] { return weighted_sum(sub(x, y)); }, {x, y}), 1e-4) << "sub";
    EXPECT_LT(fd_worst([&] { return weighted_sum(mul(x, y)); }, {x, y}), 1e-4) << "mul";
    EXPECT_LT(fd_worst([&] { return weighted_sum(scale(x, 0.37)); }, {x}), 1e-4) << "scale";
    EXPECT_LT(fd_worst([&] { return weighted_sum(add_bias(x, g)); }, {x, g}), 1e-4) << "add_bias";
    EXPECT_LT(fd_worst([&] { return weighted_sum(sigmoid(x)); }, {x}), 1e-4) << "sigmoid";
    EXPECT_LT(fd_worst([&] { return weighted_sum(silu(x)); }, {x}), 1e-4) << "silu";
    EXPECT_LT(fd_worst([&] { return weighted_sum(blend(sigmoid(x), y, mul(y, y))); }, {x, y}), 1e-4) << "blend";
    EXPECT_LT(fd_worst([&] { return weighted_sum(reshape(x, {B * T, d})); }, {x}), 1e-4) << "reshape";
    EXPECT_LT(fd_worst([&] { return weighted_sum(rms_norm(x, g, 1e-6)); }, {x, g}), 1e-4) << "rms_norm";
    EXPECT_LT(fd_worst([&] { return weighted_sum(concat_last(x, y)); }, {x, y}), 1e-4) << "concat_last";
    EXPECT_LT(fd_worst([&] { return weighted_sum(tile_rows(g, 3)); }, {g}), 1e-4) << "tile_rows";
    EXPECT_LT(fd_worst([&] { return weighted_sum(select_row(x, B - 1)); }, {x}), 1e-4) << "select_row";
    EXPECT_LT(fd_worst([&] { return weighted_sum(select_middle(x, T - 1)); }, {x}), 1e-4) << "select_middle";
    EXPECT_LT(fd_worst([&] { return weighted_sum(scale_rows_per_batch(x, m1)); }, {x, m1}), 1e-4)
        << "scale_rows_per_batch";

    Tensor<double> mask = Tensor<double>::full({B, T}, 1.0);
    if (T > 1) mask.mutable_value()[T - 1] = 0.0;
    EXPECT_LT(fd_worst([&] { return weighted_sum(mean_pool(x, mask)); }, {x}), 1e-4) << "mean_pool";

    const Index V = o + 2;
    auto logits = randn<double>({B, T, V}, rng);
    auto targets = random_tokens(static_cast<std::size_t>(B * T), V, rng);
    EXPECT_LT(fd_worst([&] { return cross_entropy(logits, std::span<const std::int32_t>(targets)); }, {logits}), 1e-4)
        << "cross_entropy";

    auto table = randn<double>({V, d}, rng);
    EXPECT_LT(fd_worst([&] { return weighted_sum(embedding(table, std::span<const std::int32_t>(targets), B, T)); },
                       {table}),
              1e-4)
        << "embedding";

    const Index heads = 2, kv = 1, hd = 2 * ext(rng);
    auto q = randn<double>({B, T, heads * hd}, rng);
    auto k = randn<double>({B, T, kv * hd}, rng);
    auto v = randn<double>({B, T, kv * hd}, rng);
    EXPECT_LT(fd_worst([&] { return weighted_sum(rope(q, hd, 100.0)); }, {q}), 1e-4) << "rope";
    EXPECT_LT(fd_worst([&] { return weighted_sum(causal_attention(q, k, v, heads, kv)); }, {q, k, v}), 1e-4)
        << "causal_attention";
  }
}

TEST(RmsNorm, HandExample) {
  Tensor<double> x({1, 2}, {3, 4});
  Tensor<double> g({2}, {1, 1});
  const auto y = rms_norm(x, g, 0.0);
  EXPECT_NEAR(y[0], 0.848528, 1e-6);
  EXPECT_NEAR(y[1], 1.131371, 1e-6);
}

TEST(RmsNorm, ZeroGammaGivesZero) {
  std::mt19937_64 rng(2);
  const auto y = rms_norm(randn<double>({3, 5}, rng, false), Tensor<double>::zeros({5}), 1e-6);
  EXPECT_EQ(y.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(RmsNorm, UnitGammaGivesUnitRms) {
  std::mt19937_64 rng(3);
  const auto y = rms_norm(randn<double>({1, 9}, rng, false), Tensor<double>::full({9}, 1.0), 0.0);
  EXPECT_NEAR(std::sqrt(y.value().squaredNorm() / 9.0), 1.0, 1e-6);
}

TEST(RmsNorm, WidthMismatchIsDimensionError) {
  EXPECT_THROW(rms_norm(Tensor<double>({2, 3}), Tensor<double>({4}), 1e-6), DimensionError);
}

TEST(MeanPool, ConstantRows) {
  Tensor<double> h({1, 2, 3}, {1, 2, 3, 1, 2, 3});
  const auto p = mean_pool(h, Tensor<double>::full({1, 2}, 1.0));
  EXPECT_EQ(p.shape(), (Shape{1, 3}));
  EXPECT_EQ(p.value(), (Vec<double>(3) << 1, 2, 3).finished());
}

TEST(MeanPool, AveragesRows) {
  Tensor<double> h({1, 2, 2}, {1, 2, 3, 4});
  const auto p = mean_pool(h, Tensor<double>({1, 2}, {1, 1}));
  EXPECT_DOUBLE_EQ(p[0], 2.0);
  EXPECT_DOUBLE_EQ(p[1], 3.0);
}

TEST(MeanPool, MaskExcludesPositions) {
  Tensor<double> h({1, 2, 2}, {1, 2, 9, 9});
  const auto p = mean_pool(h, Tensor<double>({1, 2}, {1, 0}));
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_DOUBLE_EQ(p[1], 2.0);
}

TEST(MeanPool, EmptyMaskRowIsDegenerate) {
  Tensor<double> h({2, 2, 2});
  EXPECT_THROW(mean_pool(h, Tensor<double>({2, 2}, {1, 1, 0, 0})), DegenerateInputError);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tensor<double> logits = Tensor<double>::zeros({1, 2, 256});
  std::vector<std::int32_t> t{5, 200};
  EXPECT_NEAR(cross_entropy(logits, std::span<const std::int32_t>(t)).item(), std::log(256.0), 1e-12);
  EXPECT_NEAR(std::log(256.0), 5.5452, 1e-4);
}

TEST(CrossEntropy, ConfidentCorrectLogitsApproachZero) {
  Tensor<double> logits = Tensor<double>::zeros({1, 1, 4});
  std::vector<std::int32_t> t{2};
  double prev = 1e9;
  for (double m : {1.0, 10.0, 100.0}) {
    logits.mutable_value()[2] = m;
    const double loss = cross_entropy(logits, std::span<const std::int32_t>(t)).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(CrossEntropy, MatchesBruteForceSoftmax) {
  std::mt19937_64 rng(4);
  auto logits = randn<double>({2, 3, 7}, rng, false, 3.0);
  auto t = random_tokens(6, 7, rng);
  const double got = cross_entropy(logits, std::span<const std::int32_t>(t)).item();
  EXPECT_NEAR(got, brute_force_ce(logits.value(), t, 7), 1e-8);
}

TEST(CrossEntropy, IgnoredPositionsDoNotCount) {
  std::mt19937_64 rng(5);
  auto logits = randn<double>({1, 3, 5}, rng, false);
  std::vector<std::int32_t> t{1, 2, 3};
  std::vector<std::uint8_t> ignore{0, 1, 0};
  const double got =
      cross_entropy(logits, std::span<const std::int32_t>(t), std::span<const std::uint8_t>(ignore)).item();
  Vec<double> kept(10);
  kept << logits.value().segment(0, 5), logits.value().segment(10, 5);
  EXPECT_NEAR(got, brute_force_ce(kept, {1, 3}, 5), 1e-12);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  Tensor<double> logits = Tensor<double>::zeros({1, 1, 4});
  std::vector<std::int32_t> t{4};
  EXPECT_THROW(cross_entropy(logits, std::span<const std::int32_t>(t)), IndexError);
  t[0] = -1;
  EXPECT_THROW(cross_entropy(logits, std::span<const std::int32_t>(t)), IndexError);
}

TEST(Embedding, OutOfRangeTokenIsIndexError) {
  Tensor<double> table({4, 2});
  std::vector<std::int32_t> t{0, 4};
  EXPECT_THROW(embedding(table, std::span<const std::int32_t>(t), 1, 2), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x({2, 3}, true);
  Tape<double> tape;
  tape.backward(sum(x));
  EXPECT_EQ(x.grad(), Vec<double>::Ones(6));
}

TEST(Backward, SigmoidSlopeAtZero) {
  Tensor<double> x({1}, {0.0}, true);
  Tape<double> tape;
  tape.backward(sum(sigmoid(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor<double> x({2}, true);
  Tape<double> tape;
  const auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, FrozenInputsReceiveNoGradient) {
  std::mt19937_64 rng(6);
  auto x = randn<double>({3, 2}, rng, true);
  auto w = randn<double>({4, 2}, rng, false);
  Tape<double> tape;
  tape.backward(sum(linear(x, w)));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, NothingRecordedWithoutGradInputs) {
  std::mt19937_64 rng(7);
  auto a = randn<double>({2, 2}, rng, false);
  Tape<double> tape;
  const auto c = matmul(a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(c.requires_grad());
}

TEST(Backward, FanOutAccumulatesBothPaths) {
  std::mt19937_64 rng(8);
  auto x = randn<double>({5}, rng);
  auto w1 = randn<double>({5}, rng, false);
  auto w2 = randn<double>({5}, rng, false);
  {
    Tape<double> tape;
    tape.backward(sum(add(mul(x, w1), sigmoid(mul(x, w2)))));
  }
  const Vec<double> both = x.grad();
  x.zero_grad();
  {
    Tape<double> tape;
    tape.backward(sum(mul(x, w1)));
  }
  const Vec<double> first = x.grad();
  x.zero_grad();
  {
    Tape<double> tape;
    tape.backward(sum(sigmoid(mul(x, w2))));
  }
  EXPECT_LT(max_abs_diff(both, first + x.grad()), 1e-14);
}

TEST(Backward, DeterministicValuesAndGradients) {
  auto run = [] {
    std::mt19937_64 rng(9);
    auto q = randn<double>({2, 4, 8}, rng);
    auto k = randn<double>({2, 4, 4}, rng);
    Tape<double> tape;
    const auto out = causal_attention(rope(q, 4, 1e4), rope(k, 4, 1e4), k, 2, 1);
    tape.backward(weighted_sum(out));
    return std::make_pair(out.value(), q.grad());
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Activations, StableForLargeInputs) {
  Tensor<double> x({4}, {-1000.0, -50.0, 50.0, 1000.0});
  const auto s = sigmoid(x);
  const auto z = silu(x);
  EXPECT_TRUE(s.value().allFinite());
  EXPECT_TRUE(z.value().allFinite());
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[3], 1.0);
  EXPECT_EQ(z[3], 1000.0);
  Tensor<float> xf({2}, {-200.0f, 200.0f});
  EXPECT_TRUE(sigmoid(xf).value().allFinite());
  EXPECT_TRUE(silu(xf).value().allFinite());
}

TEST(Shapes, ElementwiseMismatchIsDimensionError) {
  EXPECT_THROW(add(Tensor<double>({2, 3}), Tensor<double>({3, 2})), DimensionError);
  EXPECT_THROW(add_bias(Tensor<double>({2, 3}), Tensor<double>({2})), DimensionError);
  EXPECT_THROW(reshape(Tensor<double>({2, 3}), {4}), DimensionError);
}
