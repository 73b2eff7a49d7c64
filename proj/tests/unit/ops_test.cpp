#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numbers>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "pop/ops.hpp"

namespace pop {
namespace {

using testing::random_tensor;
using D = double;

// Scalar probe sum(y . r), r random [cols x k].
Tensor<D> probe(Tape<D>& tape, const Tensor<D>& y, const Tensor<D>& r) {
  return ops::sum(tape, ops::matmul(tape, y, r));
}

TEST(Tensor, FactoriesAndAliasing) {
  auto a = Tensor<D>::full({2, 3}, 1.5);
  EXPECT_EQ(a.numel(), 6u);
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.cols(), 3u);
  auto b = a;
  b.at(0) = 7;
  EXPECT_EQ(a.at(0), 7);
  auto c = a.clone();
  c.at(0) = 1;
  EXPECT_EQ(a.at(0), 7);
  EXPECT_FALSE(c.same_storage(a));
  EXPECT_THROW(Tensor<D>::from({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, PrecisionNames) {
  EXPECT_EQ(parse_precision("f32"), Precision::F32);
  EXPECT_EQ(parse_precision("f64"), Precision::F64);
  EXPECT_EQ(precision_name(Precision::F64), "f64");
  EXPECT_THROW(parse_precision("f16"), InvalidArgument);
}

TEST(Matmul, IdentityAndScalar) {
  Tape<D> tape(false);
  Rng rng(1);
  auto b = random_tensor<D>({3, 3}, rng);
  auto eye = Tensor<D>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::matmul(tape, eye, b);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.at(i), b.at(i));
  auto s = ops::matmul(tape, Tensor<D>::from({1, 1}, {2}), Tensor<D>::from({1, 1}, {3}));
  EXPECT_EQ(s.at(0), 6);
}

template <typename T>
void matmul_vs_triple_loop(std::size_t m, std::size_t k, std::size_t n, double tol) {
  Tape<T> tape(false);
  Rng rng(m * 100 + k * 10 + n);
  auto a = random_tensor<T>({m, k}, rng);
  auto b = random_tensor<T>({k, n}, rng);
  auto y = ops::matmul(tape, a, b);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double ref = 0, mag = 0;
      for (std::size_t p = 0; p < k; ++p) {
        ref += double(a.at(i * k + p)) * double(b.at(p * n + j));
        mag += std::abs(double(a.at(i * k + p)) * double(b.at(p * n + j)));
      }
      EXPECT_NEAR(y.at(i * n + j), ref, tol * std::max(1.0, mag)) << i << "," << j;
    }
  }
}

TEST(Matmul, MatchesTripleLoop) {
  matmul_vs_triple_loop<double>(5, 4, 3, 1e-12);
  matmul_vs_triple_loop<float>(5, 4, 3, 1e-6);
  // shapes that exercise the wide/narrow register tiles and every tail
  matmul_vs_triple_loop<float>(67, 33, 131, 1e-6);
  matmul_vs_triple_loop<double>(9, 17, 70, 1e-12);
}

TEST(Matmul, RejectsMismatchedExtents) {
  Tape<D> tape(false);
  EXPECT_THROW(ops::matmul(tape, Tensor<D>::zeros({2, 3}), Tensor<D>::zeros({2, 3})), DimensionError);
}

TEST(Softmax, TrivialCases) {
  Tape<D> tape(false);
  auto u = ops::softmax(tape, Tensor<D>::zeros({1, 3}), 1);
  for (auto v : u.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  auto big = ops::softmax(tape, Tensor<D>::from({1, 2}, {1000, 0}), 1);
  EXPECT_NEAR(big.at(0), 1.0, 1e-12);
  EXPECT_NEAR(big.at(1), 0.0, 1e-12);
  EXPECT_THROW(ops::softmax(tape, Tensor<D>::from({1, 2}, {NAN, 0}), 1), InvalidArgument);
}

TEST(Softmax, MatchesExpOverSum) {
  Tape<D> tape(false);
  Rng rng(7);
  auto x = random_tensor<D>({4, 9}, rng, 3.0);
  auto rows = ops::softmax(tape, x, 1);
  auto cols = ops::softmax(tape, x, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < 9; ++j) z += std::exp(x.at(i * 9 + j));
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(rows.at(i * 9 + j), std::exp(x.at(i * 9 + j)) / z, 1e-12);
  }
  for (std::size_t j = 0; j < 9; ++j) {
    double z = 0;
    for (std::size_t i = 0; i < 4; ++i) z += std::exp(x.at(i * 9 + j));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(cols.at(i * 9 + j), std::exp(x.at(i * 9 + j)) / z, 1e-12);
  }
}

TEST(LayerNorm, TrivialCases) {
  Tape<D> tape(false);
  auto ones = Tensor<D>::full({5}, 1.0);
  auto zeros = Tensor<D>::zeros({5});
  auto y = ops::layer_norm(tape, Tensor<D>::full({2, 5}, 3.25), ones, zeros);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
  Rng rng(2);
  auto beta = random_tensor<D>({5}, rng);
  auto z = ops::layer_norm(tape, random_tensor<D>({3, 5}, rng), zeros, beta);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(z.at(i), beta.at(i % 5));
}

TEST(LayerNorm, MomentsBeforeAffine) {
  Tape<D> tape(false);
  Rng rng(3);
  const std::size_t d = 64;
  auto x = random_tensor<D>({6, d}, rng, 4.0);
  auto y = ops::layer_norm(tape, x, Tensor<D>::full({d}, 1.0), Tensor<D>::zeros({d}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mean += y.at(r * d + c);
    mean /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y.at(r * d + c) - mean) * (y.at(r * d + c) - mean);
    var /= d;
    EXPECT_LE(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Gelu, Values) {
  Tape<D> tape(false);
  auto y = ops::gelu(tape, Tensor<D>::from({1, 3}, {0.0, 10.0, -1.0}));
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_NEAR(y.at(1), 10.0, 1e-6);
  EXPECT_NEAR(y.at(2), -1.0 * 0.5 * std::erfc(1.0 / std::numbers::sqrt2), 1e-15);
}

TEST(Gelu, FloatPathTracksExactErf) {
  Tape<float> tape(false);
  std::vector<float> xs;
  for (int i = -800; i <= 800; ++i) xs.push_back(static_cast<float>(i) / 100.0f);
  auto y = ops::gelu(tape, Tensor<float>::from({1, xs.size()}, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = xs[i];
    const double ref = x * 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    EXPECT_NEAR(y.at(i), ref, 2e-6 * std::max(1.0, std::abs(x))) << x;
  }
}

TEST(Gelu, GradientAtSamplePoints) {
  std::vector<D> xs{-3.0, -1.2, -0.3, 0.0, 0.4, 1.1, 2.5};
  auto x = Tensor<D>::from({1, xs.size()}, xs, true);
  auto loss = [&](Tape<D>& t) { return ops::sum(t, ops::gelu(t, x)); };
  const auto r = testing::gradcheck({{"x", x}}, loss, 100, 1);
  EXPECT_LE(r[0].max_abs, 1e-6);
}

TEST(CrossEntropy, TrivialCases) {
  Tape<D> tape(false);
  std::vector<int> target{2};
  EXPECT_NEAR(ops::cross_entropy(tape, Tensor<D>::zeros({1, 4}), target).item(), std::log(4.0), 1e-15);
  auto confident = Tensor<D>::from({1, 4}, {0, 0, 20, 0});
  EXPECT_LE(ops::cross_entropy(tape, confident, target).item(), 1e-8);
  std::vector<int> bad{4};
  EXPECT_THROW(ops::cross_entropy(tape, Tensor<D>::zeros({1, 4}), bad), InvalidArgument);
}

TEST(CrossEntropy, MatchesPerSampleReference) {
  Tape<D> tape(false);
  Rng rng(11);
  auto logits = random_tensor<D>({6, 5}, rng, 2.0);
  std::vector<int> targets{0, 4, 2, 2, 1, 3};
  double ref = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits.at(i * 5 + j));
    ref += -std::log(std::exp(logits.at(i * 5 + targets[i])) / z);
  }
  EXPECT_NEAR(ops::cross_entropy(tape, logits, targets).item(), ref / 6, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor<D>::zeros({2, 3, 4}, true);
  Tape<D> tape;
  auto l = ops::sum(tape, x);
  tape.backward(l);
  ASSERT_TRUE(x.has_grad());
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, UnrelatedInputGetsNoGradient) {
  auto x = Tensor<D>::full({3}, 1.0, true);
  auto y = Tensor<D>::full({3}, 2.0, true);
  Tape<D> tape;
  auto l = ops::sum(tape, y);
  tape.backward(l);
  EXPECT_TRUE(!x.has_grad() || std::all_of(x.grad().begin(), x.grad().end(), [](D g) { return g == 0; }));
}

TEST(Backward, NoRecordTapeRecordsNothing) {
  auto x = Tensor<D>::full({3}, 1.0, true);
  Tape<D> tape(false);
  auto l = ops::sum(tape, ops::scale(tape, x, 2.0));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(l.requires_grad());
}

TEST(Backward, VisitsEachNodeOnce) {
  auto x = Tensor<D>::full({1, 4}, 0.5, true);
  Tape<D> tape;
  auto a = ops::gelu(tape, x);
  auto b = ops::add(tape, a, a);
  auto l = ops::sum(tape, ops::add(tape, b, a));
  tape.backward(l);
  EXPECT_EQ(tape.last_backward_visits(), tape.size());
}

// Reference multi-head attention, computed per (sample, head, query).
std::vector<D> attention_reference(const Tensor<D>& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const std::size_t d = qkv.cols() / 3, dh = d / heads;
  std::vector<D> out(batch * tokens * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tokens; ++i) {
        std::vector<D> s(tokens);
        D mx = -1e300;
        for (std::size_t j = 0; j < tokens; ++j) {
          D dot = 0;
          for (std::size_t c = 0; c < dh; ++c) {
            dot += qkv.at((b * tokens + i) * 3 * d + h * dh + c) * qkv.at((b * tokens + j) * 3 * d + d + h * dh + c);
          }
          s[j] = dot / std::sqrt(D(dh));
          mx = std::max(mx, s[j]);
        }
        D z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (std::size_t c = 0; c < dh; ++c) {
          D acc = 0;
          for (std::size_t j = 0; j < tokens; ++j) acc += s[j] / z * qkv.at((b * tokens + j) * 3 * d + 2 * d + h * dh + c);
          out[(b * tokens + i) * d + h * dh + c] = acc;
        }
      }
    }
  }
  return out;
}

TEST(SelfAttention, MatchesReference) {
  Tape<D> tape(false);
  Rng rng(5);
  auto qkv = random_tensor<D>({3 * 5, 3 * 8}, rng);
  auto y = ops::self_attention(tape, qkv, 3, 5, 2);
  const auto ref = attention_reference(qkv, 3, 5, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-12);
  const auto w = ops::attention_weights(qkv, 3, 5, 2);
  for (std::size_t r = 0; r < 3 * 2 * 5; ++r) {
    D s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += w[r * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(TokenOps, AssembleTakeGroupConcatMax) {
  Tape<D> tape(false);
  Rng rng(9);
  const std::size_t batch = 2, d = 3;
  auto per = random_tensor<D>({batch * 2, d}, rng);
  auto shared = random_tensor<D>({1, d}, rng);
  std::vector<ops::TokenSegment<D>> segs{{per, false}, {shared, true}};
  auto x = ops::assemble_tokens<D>(tape, batch, segs);
  ASSERT_EQ(x.rows(), batch * 3);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_EQ(x.at((b * 3 + 0) * d + c), per.at((b * 2 + 0) * d + c));
      EXPECT_EQ(x.at((b * 3 + 1) * d + c), per.at((b * 2 + 1) * d + c));
      EXPECT_EQ(x.at((b * 3 + 2) * d + c), shared.at(c));
    }
  }
  auto tail = ops::take_tokens(tape, x, batch, 3, 1, 2);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < 2 * d; ++c) EXPECT_EQ(tail.at(b * 2 * d + c), x.at((b * 3 + 1) * d + c));
  }
  auto gm = ops::group_mean(tape, per, 2);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_NEAR(gm.at(b * d + c), (per.at((b * 2) * d + c) + per.at((b * 2 + 1) * d + c)) / 2, 1e-15);
    }
  }
  std::vector<Tensor<D>> parts{gm, ops::scale(tape, gm, 2.0)};
  auto cat = ops::concat_cols<D>(tape, parts);
  ASSERT_EQ(cat.cols(), 2 * d);
  EXPECT_EQ(cat.at(d), 2 * gm.at(0));
  auto mx = ops::elementwise_max<D>(tape, parts);
  for (std::size_t i = 0; i < gm.numel(); ++i) EXPECT_EQ(mx.at(i), std::max(gm.at(i), 2 * gm.at(i)));
  EXPECT_THROW(ops::take_tokens(tape, x, batch, 3, 2, 2), DimensionError);
}

TEST(GradCheck, FlagsAWrongBackwardRule) {
  auto x = Tensor<D>::from({1, 3}, {0.2, -0.7, 1.3}, true);
  auto doubled_with_bad_rule = [&](Tape<D>& t) {
    auto y = Tensor<D>::zeros({1, 3});
    for (std::size_t i = 0; i < 3; ++i) y.at(i) = 2 * x.at(i);
    if (t.needs_grad({&x})) {
      const std::array<Tensor<D>, 1> ins{x};
      t.record("bad", ins, y, [x, y]() mutable {
        auto dx = x.grad_buffer();
        for (std::size_t i = 0; i < 3; ++i) dx[i] += y.grad()[i];  // should be 2 * g
      });
    }
    return ops::sum(t, y);
  };
  EXPECT_GT(testing::worst(testing::gradcheck({{"x", x}}, doubled_with_bad_rule, 8, 1)), 0.4);
}

// Every differentiable op against 64-bit central differences.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchCentralDifferences) {
  const auto seed = GetParam();
  Rng rng(seed);
  constexpr double tol = 1e-5;
  auto check = [&](const char* op, std::vector<std::pair<std::string, Tensor<D>>> params, auto&& f) {
    const auto r = testing::gradcheck(params, f, 64, seed);
    EXPECT_LE(testing::worst(r), tol) << op;
  };
  auto a = random_tensor<D>({4, 5}, rng, 1.0, true);
  auto b = random_tensor<D>({5, 3}, rng, 1.0, true);
  auto bias = random_tensor<D>({3}, rng, 1.0, true);
  auto r3 = random_tensor<D>({3, 2}, rng);
  auto r5 = random_tensor<D>({5, 2}, rng);
  check("matmul", {{"a", a}, {"b", b}}, [&](Tape<D>& t) { return probe(t, ops::matmul(t, a, b), r3); });
  check("linear", {{"x", a}, {"w", b}, {"bias", bias}},
        [&](Tape<D>& t) { return probe(t, ops::linear(t, a, b, bias), r3); });
  auto a2 = random_tensor<D>({4, 5}, rng, 1.0, true);
  check("add", {{"a", a}, {"b", a2}}, [&](Tape<D>& t) { return probe(t, ops::add(t, a, a2), r5); });
  check("scale", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::scale(t, a, 1.7), r5); });
  auto blk = random_tensor<D>({2, 5}, rng, 1.0, true);
  check("add_blockwise", {{"x", a}, {"rows", blk}},
        [&](Tape<D>& t) { return probe(t, ops::add_blockwise(t, a, blk), r5); });
  check("softmax", {{"x", a}}, [&](Tape<D>& t) {
    return ops::add(t, probe(t, ops::softmax(t, a, 1), r5), probe(t, ops::softmax(t, a, 0), r5));
  });
  auto gamma = random_tensor<D>({5}, rng, 1.0, true);
  auto beta = random_tensor<D>({5}, rng, 1.0, true);
  check("layer_norm", {{"x", a}, {"gamma", gamma}, {"beta", beta}},
        [&](Tape<D>& t) { return probe(t, ops::layer_norm(t, a, gamma, beta), r5); });
  check("gelu", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::gelu(t, a), r5); });
  std::vector<int> targets{0, 4, 2, 1};
  check("cross_entropy", {{"logits", a}}, [&](Tape<D>& t) { return ops::cross_entropy(t, a, targets); });
  auto s1 = random_tensor<D>({1}, rng, 1.0, true);
  auto s2 = random_tensor<D>({1}, rng, 1.0, true);
  const std::vector<D> w{0.3, -1.4};
  check("weighted_sum", {{"s1", s1}, {"s2", s2}}, [&](Tape<D>& t) {
    std::vector<Tensor<D>> terms{ops::gelu(t, s1), ops::gelu(t, s2)};
    return ops::weighted_sum<D>(t, terms, w);
  });
  auto qkv = random_tensor<D>({2 * 4, 3 * 6}, rng, 1.0, true);
  auto r6 = random_tensor<D>({6, 2}, rng);
  check("self_attention", {{"qkv", qkv}},
        [&](Tape<D>& t) { return probe(t, ops::self_attention(t, qkv, 2, 4, 3), r6); });
  auto per = random_tensor<D>({2 * 2, 5}, rng, 1.0, true);
  auto shared = random_tensor<D>({1, 5}, rng, 1.0, true);
  check("assemble_tokens", {{"per", per}, {"shared", shared}}, [&](Tape<D>& t) {
    std::vector<ops::TokenSegment<D>> segs{{shared, true}, {per, false}};
    auto x = ops::assemble_tokens<D>(t, 2, segs);
    return probe(t, ops::take_tokens(t, ops::gelu(t, x), 2, 3, 1, 2), r5);
  });
  check("group_mean", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::group_mean(t, a, 2), r5); });
  auto c1 = random_tensor<D>({4, 2}, rng, 1.0, true);
  auto c2 = random_tensor<D>({4, 3}, rng, 1.0, true);
  check("concat_cols", {{"a", c1}, {"b", c2}}, [&](Tape<D>& t) {
    std::vector<Tensor<D>> parts{c1, c2};
    return probe(t, ops::concat_cols<D>(t, parts), r5);
  });
  auto m1 = random_tensor<D>({4, 5}, rng, 1.0, true);
  check("elementwise_max", {{"a", a}, {"b", m1}}, [&](Tape<D>& t) {
    std::vector<Tensor<D>> parts{a, m1};
    return probe(t, ops::elementwise_max<D>(t, parts), r5);
  });
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Values(1u, 2u, 3u));

}  // namespace
}  // namespace pop
