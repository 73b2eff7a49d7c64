#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "fusion_oracle.hpp"
#include "pop/adam.hpp"
#include "pop/container.hpp"
#include "pop/fusion.hpp"
#include "pop/hash.hpp"
#include "pop/prompt_store.hpp"

namespace pop {
namespace {

using D = double;

TEST(PromptStore, FirstTaskHoldsPopAndP1) {
  PromptStore<float> s(PromptMode::SPT, 64, 4, 1, 1);
  EXPECT_EQ(s.current_task(), 0);
  s.begin_task(1, 1);
  ASSERT_TRUE(s.has_pop());
  EXPECT_TRUE(s.pop().requires_grad());
  EXPECT_TRUE(s.task(1).requires_grad());
  EXPECT_EQ(s.trainable().size(), 2u);
  EXPECT_EQ(s.pop().shape(), (Shape{1, 64}));
}

TEST(PromptStore, ParameterCounts) {
  PromptStore<float> spt(PromptMode::SPT, 64, 4, 1, 1);
  for (int t = 1; t <= 3; ++t) spt.begin_task(t, 1);
  EXPECT_EQ(spt.total_parameter_count(), (3u + 1) * 64);
  EXPECT_EQ(spt.trainable_parameter_count(), 2u * 64);
  PromptStore<float> dpt(PromptMode::DPT, 64, 4, 1, 1);
  for (int t = 1; t <= 3; ++t) dpt.begin_task(t, 2);
  EXPECT_EQ(dpt.total_parameter_count(), (3u * 2 + 1) * 64 * 4);
  EXPECT_EQ(dpt.task(2).shape(), (Shape{4 * 2, 64}));
}

TEST(PromptStore, TasksBeginInOrder) {
  PromptStore<float> s(PromptMode::SPT, 8, 2, 1, 1);
  EXPECT_THROW(s.begin_task(2, 1), InvalidArgument);
  s.begin_task(1, 1);
  EXPECT_THROW(s.begin_task(1, 1), InvalidArgument);
  EXPECT_THROW(s.task(2), InvalidArgument);
}

TEST(PromptStore, ZeroPromptTasksAndNoPop) {
  PromptStore<float> s(PromptMode::SPT, 8, 2, 0, 1);
  s.begin_task(1, 0);
  EXPECT_FALSE(s.has_pop());
  EXPECT_EQ(s.task_tokens(1), 0u);
  EXPECT_EQ(s.total_parameter_count(), 0u);
}

TEST(PromptStore, EarlierSetsStayFrozenUnderTraining) {
  PromptStore<D> s(PromptMode::SPT, 16, 2, 1, 4);
  s.begin_task(1, 2);
  s.begin_task(2, 2);
  s.begin_task(3, 2);
  const auto p1 = sha256_hex(tensor_bytes(s.task(1)));
  const auto p2 = sha256_hex(tensor_bytes(s.task(2)));
  const auto pop0 = sha256_hex(tensor_bytes(s.pop()));
  EXPECT_FALSE(s.task(1).requires_grad());
  EXPECT_FALSE(s.task(2).requires_grad());
  // an optimizer handed every set only moves the trainable ones
  std::vector<Tensor<D>> all{s.task(1), s.task(2), s.task(3), s.pop()};
  auto state = AdamState<D>::create(all, {.lr = 0.01});
  Rng rng(1);
  for (int step = 0; step < 100; ++step) {
    for (auto& p : all) {
      p.zero_grad();
      auto g = p.grad_buffer();
      for (auto& v : g) v = std::normal_distribution<D>()(rng);
    }
    adam_step<D>(all, state);
  }
  EXPECT_EQ(sha256_hex(tensor_bytes(s.task(1))), p1);
  EXPECT_EQ(sha256_hex(tensor_bytes(s.task(2))), p2);
  EXPECT_NE(sha256_hex(tensor_bytes(s.pop())), pop0);
}

TEST(PromptStore, SaveLoadRoundTrip) {
  PromptStore<float> s(PromptMode::DPT, 8, 3, 2, 5);
  s.begin_task(1, 1);
  s.begin_task(2, 3);
  Container c;
  s.save(c);
  const auto r = PromptStore<float>::load(c);
  EXPECT_EQ(r.mode(), PromptMode::DPT);
  EXPECT_EQ(r.current_task(), 2);
  EXPECT_EQ(r.task_tokens(2), 3u);
  EXPECT_EQ(tensor_bytes(r.task(2)), tensor_bytes(s.task(2)));
  EXPECT_EQ(tensor_bytes(r.pop()), tensor_bytes(s.pop()));
  EXPECT_FALSE(r.task(1).requires_grad());
  EXPECT_TRUE(r.task(2).requires_grad());
}

TEST(Fusion, NamesRoundTrip) {
  for (auto m : kAllFusionMethods) EXPECT_EQ(parse_fusion(fusion_name(m)), m);
  EXPECT_THROW(parse_fusion("sum"), InvalidArgument);
  EXPECT_FALSE(fusion_uses_pop(FusionMethod::FFCat));
  EXPECT_TRUE(fusion_uses_pop(FusionMethod::MeanOfAll));
}

TEST(Fusion, DimensionLaw) {
  for (int t = 1; t <= 8; ++t) {
    EXPECT_EQ(fused_dim(FusionMethod::MeanAndCat, 64, t), static_cast<std::size_t>(t + 1) * 64);
    EXPECT_EQ(fused_dim(FusionMethod::FFCat, 64, t), static_cast<std::size_t>(t) * 64);
    EXPECT_EQ(fused_dim(FusionMethod::MeanOfAll, 64, t), 64u);
    EXPECT_EQ(fused_dim(FusionMethod::MaxPooling, 64, t), 64u);
    EXPECT_EQ(fused_dim(FusionMethod::PopTokenOnly, 64, t), 64u);
  }
  EXPECT_EQ(fused_block_layout(FusionMethod::MeanAndCat, 3), (std::vector<int>{1, 2, 3, 0}));
  EXPECT_EQ(fused_block_layout(FusionMethod::FFCat, 2), (std::vector<int>{1, 2}));
  EXPECT_EQ(fused_block_layout(FusionMethod::MaxPooling, 2), (std::vector<int>{-1}));
}

TEST(Fusion, SingleRowMeansAreTheRow) {
  Rng rng(1);
  const auto out = testing::random_encode_output<D>(3, 4, 1, {1, 2}, 5, rng);
  Tape<D> tape(false);
  const auto f1 = task_feature(tape, out, 1);
  const auto fc = cross_feature(tape, out);
  EXPECT_EQ(tensor_bytes(f1), tensor_bytes(out.task_outputs[0]));
  EXPECT_EQ(tensor_bytes(fc), tensor_bytes(out.pop));
}

TEST(Fusion, IdenticalRowsAndZeroPop) {
  Rng rng(2);
  auto out = testing::random_encode_output<D>(2, 4, 2, {2}, 3, rng);
  auto& p = out.task_outputs[0];
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) p.at((b * 2 + 1) * 3 + c) = p.at((b * 2) * 3 + c);
  out.pop = Tensor<D>::zeros(out.pop.shape());
  Tape<D> tape(false);
  const auto f = task_feature(tape, out, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(f.at(b * 3 + c), p.at(b * 2 * 3 + c));
  const auto fc = cross_feature(tape, out);
  for (auto v : fc.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fusion, MeanAndCatLayout) {
  Rng rng(3);
  const auto out = testing::random_encode_output<D>(2, 4, 1, {1, 1, 1}, 64, rng);
  Tape<D> tape(false);
  const auto f = fuse(tape, out, FusionMethod::MeanAndCat, 3);
  ASSERT_EQ(f.cols(), 256u);
  const auto f1 = task_feature(tape, out, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(f.at(b * 256 + c), f1.at(b * 64 + c));
}

TEST(Fusion, EqualSegmentsCollapse) {
  const std::size_t d = 4, n = 3;
  std::vector<D> v{0.5, -1.0, 2.0, 0.25};
  Rng rng(4);
  auto out = testing::random_encode_output<D>(1, n, 2, {1, 3}, d, rng);
  for (std::size_t r = 1 + n; r < out.tokens_per_sample; ++r)
    for (std::size_t c = 0; c < d; ++c) out.tokens.at(r * d + c) = v[c];
  for (auto* seg : {&out.pop, &out.task_outputs[0], &out.task_outputs[1]})
    for (std::size_t i = 0; i < seg->numel(); ++i) seg->at(i) = v[i % d];
  Tape<D> tape(false);
  for (auto m : {FusionMethod::MeanOfAll, FusionMethod::MaxPooling, FusionMethod::PopTokenOnly}) {
    const auto f = fuse(tape, out, m, 2);
    for (std::size_t c = 0; c < d; ++c) EXPECT_DOUBLE_EQ(f.at(c), v[c]) << fusion_name(m);
  }
}

class FusionOracle : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(FusionOracle, AllMethodsMatchBruteForce) {
  Rng rng(GetParam());
  for (int t = 1; t <= 4; ++t) {
    std::vector<std::size_t> counts;
    for (int i = 0; i < t; ++i) counts.push_back(1 + rng() % 3);
    const auto out = testing::random_encode_output<D>(3, 5, 1 + rng() % 2, counts, 6, rng);
    Tape<D> tape(false);
    for (auto m : {FusionMethod::MeanAndCat, FusionMethod::MeanOfAll, FusionMethod::MaxPooling,
                   FusionMethod::PopTokenOnly}) {
      EXPECT_LE(testing::max_deviation(fuse(tape, out, m, t), testing::oracle_fuse(out, m, t)), 1e-7)
          << fusion_name(m) << " t=" << t;
    }
    std::vector<vit::EncodeOutput<D>> passes;
    for (int i = 1; i <= t; ++i) {
      std::vector<std::size_t> only(static_cast<std::size_t>(i), 0);
      only.back() = counts[static_cast<std::size_t>(i - 1)];
      passes.push_back(testing::random_encode_output<D>(3, 5, 0, only, 6, rng));
    }
    EXPECT_LE(testing::max_deviation(fuse_ffcat<D>(tape, passes, t), testing::oracle_ffcat(passes)), 1e-7);
    EXPECT_THROW(fuse(tape, out, FusionMethod::FFCat, t), InvalidArgument);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FusionOracle, ::testing::Values(1u, 2u, 3u));

}  // namespace
}  // namespace pop
