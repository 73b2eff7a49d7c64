// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "fixtures.hpp"
#include "fusion_oracle.hpp"
#include "gradcheck.hpp"
#include "pop/continual.hpp"
#include "pop/hash.hpp"
#include "pop/objective.hpp"
#include "pop/ops.hpp"

namespace pop {
namespace {

namespace fs = std::filesystem;
using D = double;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------ 1: gradients

Tensor<D> probe(Tape<D>& t, const Tensor<D>& y, const Tensor<D>& r) { return ops::sum(t, ops::matmul(t, y, r)); }

using Params = std::vector<std::pair<std::string, Tensor<D>>>;

struct GradTally {
  double worst = 0;
  std::size_t probes = 0;
  std::string worst_name;

  void add(const std::string& what, const std::vector<testing::GradReport>& reports) {
    for (const auto& r : reports) {
      probes += r.checked;
      if (r.max_rel >= worst) {
        worst = r.max_rel;
        worst_name = what + "/" + r.name;
      }
    }
  }
};

void op_gradients(std::uint64_t seed, GradTally& tally) {
  Rng rng(seed);
  auto check = [&](const char* op, Params params, auto&& f) { tally.add(op, testing::gradcheck(params, f, 64, seed)); };
  using testing::random_tensor;
  auto a = random_tensor<D>({4, 5}, rng, 1.0, true), b = random_tensor<D>({5, 3}, rng, 1.0, true);
  auto bias = random_tensor<D>({3}, rng, 1.0, true);
  auto r3 = random_tensor<D>({3, 2}, rng), r5 = random_tensor<D>({5, 2}, rng);
  check("matmul", {{"a", a}, {"b", b}}, [&](Tape<D>& t) { return probe(t, ops::matmul(t, a, b), r3); });
  check("linear", {{"x", a}, {"w", b}, {"b", bias}}, [&](Tape<D>& t) { return probe(t, ops::linear(t, a, b, bias), r3); });
  auto a2 = random_tensor<D>({4, 5}, rng, 1.0, true);
  check("add", {{"a", a}, {"b", a2}}, [&](Tape<D>& t) { return probe(t, ops::add(t, a, a2), r5); });
  check("scale", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::scale(t, a, 1.7), r5); });
  auto blk = random_tensor<D>({2, 5}, rng, 1.0, true);
  check("add_blockwise", {{"x", a}, {"rows", blk}}, [&](Tape<D>& t) { return probe(t, ops::add_blockwise(t, a, blk), r5); });
  check("softmax", {{"x", a}}, [&](Tape<D>& t) {
    return ops::add(t, probe(t, ops::softmax(t, a, 1), r5), probe(t, ops::softmax(t, a, 0), r5));
  });
  auto gamma = random_tensor<D>({5}, rng, 1.0, true), beta = random_tensor<D>({5}, rng, 1.0, true);
  check("layer_norm", {{"x", a}, {"gamma", gamma}, {"beta", beta}},
        [&](Tape<D>& t) { return probe(t, ops::layer_norm(t, a, gamma, beta), r5); });
  check("gelu", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::gelu(t, a), r5); });
  const std::vector<int> targets{0, 4, 2, 1};
  check("cross_entropy", {{"logits", a}}, [&](Tape<D>& t) { return ops::cross_entropy(t, a, targets); });
  auto s1 = random_tensor<D>({1}, rng, 1.0, true), s2 = random_tensor<D>({1}, rng, 1.0, true);
  const std::vector<D> w{0.3, -1.4};
  check("weighted_sum", {{"s1", s1}, {"s2", s2}}, [&](Tape<D>& t) {
    std::vector<Tensor<D>> terms{ops::gelu(t, s1), ops::gelu(t, s2)};
    return ops::weighted_sum<D>(t, terms, w);
  });
  auto qkv = random_tensor<D>({2 * 4, 3 * 6}, rng, 1.0, true);
  auto r6 = random_tensor<D>({6, 2}, rng);
  check("self_attention", {{"qkv", qkv}}, [&](Tape<D>& t) { return probe(t, ops::self_attention(t, qkv, 2, 4, 3), r6); });
  auto per = random_tensor<D>({2 * 2, 5}, rng, 1.0, true), shared = random_tensor<D>({1, 5}, rng, 1.0, true);
  check("tokens", {{"per", per}, {"shared", shared}}, [&](Tape<D>& t) {
    std::vector<ops::TokenSegment<D>> segs{{shared, true}, {per, false}};
    const auto x = ops::assemble_tokens<D>(t, 2, segs);
    return probe(t, ops::take_tokens(t, ops::gelu(t, x), 2, 3, 1, 2), r5);
  });
  check("group_mean", {{"x", a}}, [&](Tape<D>& t) { return probe(t, ops::group_mean(t, a, 2), r5); });
  auto c1 = random_tensor<D>({4, 2}, rng, 1.0, true), c2 = random_tensor<D>({4, 3}, rng, 1.0, true);
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

// Full objective at t = 2, probed from inside a run after its first update.
void full_step_gradients(std::uint64_t seed, PromptMode mode, FusionMethod fusion, GradTally& tally) {
  const auto g = data::generate(testing::tiny_spec());
  const auto tasks = data::split_tasks(g.cl_train, g.cl_test, 4);
  const auto backbone = testing::frozen_backbone<D>(testing::tiny_backbone(), seed);
  ClConfig cfg;
  cfg.tasks = 4;
  cfg.mode = mode;
  cfg.fusion = fusion;
  cfg.prompts_per_task = 2;
  cfg.pop_tokens = fusion_uses_pop(fusion) ? 2 : 0;
  cfg.weights = {0.7, 1.3};
  cfg.buffer_capacity = 8;
  cfg.schedule.epochs = 1;
  cfg.schedule.milestones = {};
  cfg.schedule.batch_size = 8;
  cfg.schedule.tuning_epochs = 0;
  cfg.seed = seed;
  ContinualLearner<D> learner(backbone, cfg);
  bool fired = false;
  const std::string what = std::string(prompt_mode_name(mode)) + "/" + std::string(fusion_name(fusion));
  learner.set_step_observer([&](const StepInfo& s, const ContinualLearner<D>& l) {
    if (s.task != 2 || s.step != 0) return;
    fired = true;
    Rng rng(seed);
    Params params;
    int k = 0;
    for (auto p : l.trainable()) {
      testing::fill_random(p, rng, 0.3);
      params.push_back({"param" + std::to_string(k++), p});
    }
    std::vector<const data::LabeledImage*> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(&tasks[1].train.samples[i * 3]);
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(&l.buffer().samples[i * 2]);
    tally.add(what, testing::gradcheck(params, [&](Tape<D>& t) { return l.batch_loss(t, batch); }, 24, seed));
  });
  learner.run_task(tasks[0]);
  learner.run_task(tasks[1]);
  if (!fired) throw std::runtime_error("full-step probe did not run for " + what);
}

Verdict criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  GradTally tally;
  for (std::uint64_t seed : {1, 2, 3}) {
    op_gradients(seed, tally);
    for (auto f : kAllFusionMethods) full_step_gradients(seed, PromptMode::SPT, f, tally);
    full_step_gradients(seed, PromptMode::DPT, FusionMethod::MeanAndCat, tally);
  }
  const double secs = seconds_since(t0);
  return {tally.worst <= 1e-5 && secs < 120,
          fmt("worst relative error %.2e (%s) over %zu probes, 3 seeds, %.1f s", tally.worst, tally.worst_name.c_str(),
              tally.probes, secs)};
}

// ------------------------------------------------------------ 2: freeze audit

struct TinyRun {
  data::GeneratedData g = data::generate(testing::tiny_spec(10, 6, 4));
  std::vector<data::TaskSpec> tasks = data::split_tasks(g.cl_train, g.cl_test, 5);
};

ClConfig tiny_five_task(PromptMode mode) {
  ClConfig c;
  c.mode = mode;
  c.tasks = 5;
  c.buffer_capacity = 20;
  c.schedule.epochs = 2;
  c.schedule.milestones = {1};
  c.schedule.batch_size = 8;
  c.schedule.lr = 1e-2;
  c.schedule.tuning_epochs = 1;
  return c;
}

Verdict criterion_freeze() {
  TinyRun run;
  std::size_t steps = 0, hashes = 0, violations = 0;
  for (auto mode : {PromptMode::SPT, PromptMode::DPT}) {
    const auto backbone = testing::frozen_backbone<float>(testing::tiny_backbone(), 11);
    const auto backbone_sha = backbone.weights_sha256();
    ContinualLearner<float> learner(backbone, tiny_five_task(mode));
    std::vector<std::string> finished;  // hash of P_i when task i ended
    learner.set_step_observer([&](const StepInfo& s, const ContinualLearner<float>& l) {
      ++steps;
      violations += l.backbone().weights_sha256() != backbone_sha;
      ++hashes;
      for (int i = 1; i < s.task; ++i) {
        violations += sha256_hex(tensor_bytes(l.prompts().task(i))) != finished[static_cast<std::size_t>(i - 1)];
        ++hashes;
      }
    });
    for (const auto& t : run.tasks) {
      learner.run_task(t);
      finished.push_back(sha256_hex(tensor_bytes(learner.prompts().task(t.task))));
    }
  }
  return {violations == 0 && steps > 0,
          fmt("%zu steps (SPT and DPT, 5 tasks), %zu hashes compared, %zu changed", steps, hashes, violations)};
}

// ------------------------------------------------------------ 3: reduction

Verdict criterion_reduction() {
  std::size_t checked = 0, failures = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto cfg = testing::tiny_backbone(3);
    const auto b = testing::frozen_backbone<D>(cfg, seed);
    Rng rng(seed);
    const auto patches = testing::random_tensor<D>({4 * cfg.num_patches(), cfg.patch_dim()}, rng);
    Tape<D> tape(false);
    const auto plain = b.forward_plain(tape, patches);
    for (auto mode : {PromptMode::SPT, PromptMode::DPT}) {
      PromptStore<D> store(mode, cfg.embed_dim, cfg.depth, 0, seed);
      store.begin_task(1, 0);
      failures += tensor_bytes(b.encode(tape, patches, store).tokens) != tensor_bytes(plain);
      ++checked;
    }
    // DPT: prompt rows leaving a block are discarded, so perturbing the layer-0
    // prompts moves the patch stream while the prompt rows entering block 1
    // and beyond stay exactly the stored layer parameters.
    PromptStore<D> store(PromptMode::DPT, cfg.embed_dim, cfg.depth, 1, seed, 0.5);
    store.begin_task(1, 2);
    std::vector<Tensor<D>> before, after;
    const auto ref = b.encode(tape, patches, store, {}, &before);
    auto p1 = store.task(1);
    p1.at(0) += 0.75;
    const auto moved = b.encode(tape, patches, store, {}, &after);
    const std::size_t tokens = ref.tokens_per_sample, base = cfg.num_patches() + 1, d = cfg.embed_dim;
    bool patch_moved = false;
    for (std::size_t l = 1; l < cfg.depth; ++l) {
      for (std::size_t s = 0; s < 4; ++s) {
        for (std::size_t r = 0; r < 3; ++r) {
          for (std::size_t c = 0; c < d; ++c) {
            const auto row = (s * tokens + base + r) * d + c;
            const D want = r == 0 ? store.pop().at(l * d + c) : store.task(1).at((l * 2 + r - 1) * d + c);
            failures += after[l].at(row) != want || before[l].at(row) != want;
          }
        }
        for (std::size_t c = 0; c < base * d; ++c)
          patch_moved |= after[l].at(s * tokens * d + c) != before[l].at(s * tokens * d + c);
      }
    }
    failures += !patch_moved;
    ++checked;
  }
  return {failures == 0, fmt("%zu bitwise zero-prompt and DPT perturbation checks, %zu failures", checked, failures)};
}

// ------------------------------------------------------------ 4: fusion

Verdict criterion_fusion() {
  double worst = 0;
  std::size_t cases = 0;
  bool law = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    for (int t = 1; t <= 8; ++t) {
      std::vector<std::size_t> counts;
      for (int i = 0; i < t; ++i) counts.push_back(1 + rng() % 3);
      const auto out = testing::random_encode_output<D>(3, 5, 1 + rng() % 2, counts, 6, rng);
      Tape<D> tape(false);
      for (auto m : kAllFusionMethods) {
        if (m == FusionMethod::FFCat) continue;
        worst = std::max(worst, testing::max_deviation(fuse(tape, out, m, t), testing::oracle_fuse(out, m, t)));
        ++cases;
      }
      std::vector<vit::EncodeOutput<D>> passes;
      for (int i = 1; i <= t; ++i) {
        std::vector<std::size_t> only(static_cast<std::size_t>(i), 0);
        only.back() = counts[static_cast<std::size_t>(i - 1)];
        passes.push_back(testing::random_encode_output<D>(3, 5, 0, only, 6, rng));
      }
      worst = std::max(worst, testing::max_deviation(fuse_ffcat<D>(tape, passes, t), testing::oracle_ffcat(passes)));
      ++cases;
      law &= fused_dim(FusionMethod::MeanAndCat, 64, t) == static_cast<std::size_t>(t + 1) * 64;
      law &= fuse(tape, out, FusionMethod::MeanAndCat, t).cols() == static_cast<std::size_t>(t + 1) * 6;
    }
  }
  return {worst <= 1e-7 && law,
          fmt("max deviation %.2e over %zu cases, 5 methods; (t+1)d law for t=1..8 %s", worst, cases,
              law ? "holds" : "BROKEN")};
}

// ------------------------------------------------------------ 5: protocol

Verdict criterion_protocol() {
  std::size_t grid = 0, grid_bad = 0;
  for (int t = 1; t <= 6; ++t)
    for (int k = 1; k <= t; ++k)
      for (int y = 0; y < 8; ++y) {
        const int want = k < t ? 0 : y + 1;
        grid_bad += aux_target(y, k, t) != want;
        ++grid;
      }

  // hand-built logs: AA = mean of A_1..A_T
  const std::vector<std::pair<std::vector<double>, double>> logs{
      {{1.0}, 1.0}, {{1.0, 0.5}, 0.75}, {{0.9, 0.6, 0.3}, 0.6}, {{0.8, 0.7, 0.6, 0.5, 0.4}, 0.6}};
  std::size_t aa_bad = 0;
  for (const auto& [acc, want] : logs) {
    MetricLog log;
    log.accuracies = acc;
    aa_bad += std::abs(log.average() - want) > 1e-12;
  }

  // buffer balance after every task, inside a real run and on the desk-size buffer
  std::size_t balance_checks = 0, unbalanced = 0;
  auto balanced = [&](const MemoryBuffer& b) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (int c : b.classes()) {
      lo = std::min(lo, b.count_class(c));
      hi = std::max(hi, b.count_class(c));
    }
    ++balance_checks;
    unbalanced += hi - lo > 1 || b.size() > b.capacity;
  };
  TinyRun run;
  const auto backbone = testing::frozen_backbone<float>(testing::tiny_backbone(), 5);
  ContinualLearner<float> learner(backbone, tiny_five_task(PromptMode::SPT));
  for (const auto& t : run.tasks) {
    learner.run_task(t);
    balanced(learner.buffer());
  }
  const auto big = data::generate(data::DatasetSpec{});
  const auto desk_tasks = data::split_tasks(big.cl_train, big.cl_test, 5);
  MemoryBuffer desk{200, {}};
  for (const auto& t : desk_tasks) {
    update_buffer(desk, t.train.samples, 1, t.task);
    balanced(desk);
  }
  return {grid_bad == 0 && aa_bad == 0 && unbalanced == 0,
          fmt("aux grid %zu/%zu, AA logs %zu/%zu, buffer balance %zu/%zu", grid - grid_bad, grid,
              logs.size() - aa_bad, logs.size(), balance_checks - unbalanced, balance_checks)};
}

// ------------------------------------------------------------ desk benchmark

struct Desk {
  data::GeneratedData g;
  std::vector<data::TaskSpec> tasks;  // CL training set subsampled per class
  std::optional<vit::Backbone<float>> backbone;
  double heldout = 0;
  double pretrain_seconds = 0;
};

std::size_t g_cl_per_class = 60;

Desk& desk() {
  static std::optional<Desk> d;
  if (d) return *d;
  d.emplace();
  const auto t0 = std::chrono::steady_clock::now();
  d->g = data::generate(data::DatasetSpec{});
  const auto cl = d->g.cl_train.class_ids();
  auto r = vit::pretrain_backbone<float>(d->g.pretrain_train, &d->g.pretrain_test, vit::BackboneConfig{},
                                         vit::PretrainSchedule{}, 1, cl);
  d->backbone.emplace(std::move(r.backbone));
  d->heldout = r.heldout_accuracy;
  d->pretrain_seconds = seconds_since(t0);
  data::Dataset train{d->g.cl_train.dims, balanced_subsample(d->g.cl_train.samples, g_cl_per_class, 1, 0)};
  d->tasks = data::split_tasks(train, d->g.cl_test, 5);
  std::printf("  desk benchmark: pretrain held-out %.4f in %.0f s, CL train %zu samples (%zu per class)\n", d->heldout,
              d->pretrain_seconds, train.size(), g_cl_per_class);
  std::fflush(stdout);
  return *d;
}

MetricLog run_desk(const ClConfig& cfg, const std::vector<data::TaskSpec>& tasks) {
  ContinualLearner<float> learner(*desk().backbone, cfg);
  for (const auto& t : tasks) learner.run_task(t);
  return learner.log();
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

ClConfig naive_config() {
  ClConfig c;
  c.prompts_per_task = 0;
  c.fusion = FusionMethod::PopTokenOnly;
  c.weights = {0, 0};
  c.buffer_capacity = 0;
  return c;
}

// ------------------------------------------------------------ 6: forgetting

Verdict criterion_forgetting() {
  const auto t0 = std::chrono::steady_clock::now();
  auto& d = desk();
  std::vector<double> pop_t1, naive_t1, pop_aa, naive_aa;
  for (std::uint64_t seed : {1, 2, 3}) {
    ClConfig pop;
    pop.seed = seed;
    auto naive = naive_config();
    naive.seed = seed;
    const auto a = run_desk(pop, d.tasks), b = run_desk(naive, d.tasks);
    pop_t1.push_back(a.task_accuracy.back().front());
    naive_t1.push_back(b.task_accuracy.back().front());
    pop_aa.push_back(a.average());
    naive_aa.push_back(b.average());
    std::printf("  seed %llu: POP task-1 %.4f AA %.4f | naive task-1 %.4f AA %.4f\n",
                static_cast<unsigned long long>(seed), pop_t1.back(), pop_aa.back(), naive_t1.back(), naive_aa.back());
    std::fflush(stdout);
  }
  const double t1_gap = 100 * (mean(pop_t1) - mean(naive_t1)), aa_gap = 100 * (mean(pop_aa) - mean(naive_aa));
  const double secs = seconds_since(t0);
  return {d.heldout >= 0.9 && t1_gap >= 10 && aa_gap > 0 && secs < 1800,
          fmt("final task-1 accuracy gap %+.1f points (need >= 10), AA gap %+.1f points (POP %.4f vs naive %.4f), "
              "pretrain held-out %.4f, %.0f s",
              t1_gap, aa_gap, mean(pop_aa), mean(naive_aa), d.heldout, secs)};
}

// ------------------------------------------------------------ 7: low shot

Verdict criterion_kshot() {
  const auto t0 = std::chrono::steady_clock::now();
  auto& d = desk();
  const std::vector<std::size_t> ks{5, 20, 50, 0};
  std::vector<double> aa;
  for (auto k : ks) {
    std::vector<double> runs;
    for (std::uint64_t seed : {1, 2, 3}) {
      ClConfig c;
      c.kshot = k;
      c.seed = seed;
      runs.push_back(run_desk(c, d.tasks).average());
    }
    aa.push_back(mean(runs));
    std::printf("  k=%s: AA %.4f\n", k ? std::to_string(k).c_str() : "full", aa.back());
    std::fflush(stdout);
  }
  bool ok = true;
  double worst_drop = 0;
  for (std::size_t i = 1; i < aa.size(); ++i) {
    const double drop = 100 * (aa[i - 1] - aa[i]);
    worst_drop = std::max(worst_drop, drop);
    ok &= drop <= 2.0;
  }
  return {ok, fmt("AA k=5 %.4f, k=20 %.4f, k=50 %.4f, full %.4f; largest drop %.2f points (limit 2), %.0f s", aa[0],
                  aa[1], aa[2], aa[3], worst_drop, seconds_since(t0))};
}

// ------------------------------------------------------------ 8: buffer-only

Verdict criterion_buffer_only() {
  const auto t0 = std::chrono::steady_clock::now();
  auto& d = desk();
  data::Dataset train{d.g.cl_train.dims, balanced_subsample(d.g.cl_train.samples, 20, 2, 0)};
  const auto tasks = data::split_tasks(train, d.g.cl_test, 5);
  double worst = 0;
  std::vector<double> bo_aa, joint_aa;
  for (std::uint64_t seed : {1, 2, 3}) {
    ClConfig bo;
    bo.buffer_only = true;
    bo.buffer_capacity = train.size();
    bo.seed = seed;
    ClConfig joint;
    joint.joint = true;
    joint.buffer_capacity = 0;
    joint.seed = seed;
    bo_aa.push_back(run_desk(bo, tasks).average());
    joint_aa.push_back(run_desk(joint, tasks).average());
    worst = std::max(worst, 100 * std::abs(bo_aa.back() - joint_aa.back()));
  }
  return {worst <= 0.5, fmt("buffer-only AA %.4f vs joint AA %.4f, largest per-seed gap %.3f points (limit 0.5), "
                            "buffer %zu = full training set, %.0f s",
                            mean(bo_aa), mean(joint_aa), worst, train.size(), seconds_since(t0))};
}

// ------------------------------------------------------------ 9: determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict criterion_determinism(const fs::path& work) {
  const auto root = work / "determinism";
  fs::remove_all(root);
  const std::string data = (root / "data").string(), backbone = (root / "backbone.bin").string();
  std::vector<std::string> gen{"gen",   "--out", data,    "--set", "image_size=16", "--set", "channels=1",
                               "--set", "pretrain_classes=4", "--set", "cl_classes=8", "--set", "train_per_class=12",
                               "--set", "test_per_class=6"};
  std::vector<std::string> pre{"pretrain", "--data",  data,          "--out",   backbone, "--set", "embed_dim=16",
                               "--set",    "depth=2", "--set",       "heads=2", "--set",  "mlp_ratio=2",
                               "--epochs", "2"};
  if (cli::run(gen) != cli::kOk || cli::run(pre) != cli::kOk) return {false, "could not prepare data/backbone"};
  std::vector<std::string> csvs;
  for (const char* out : {"a", "b"}) {
    const auto metrics = (root / out).string();
    std::vector<std::string> cil{"cil",   "--data",           data,    "--backbone", backbone,     "--out",
                                 metrics, "--tasks",          "4",     "--epochs",   "3",          "--buffer",
                                 "16",    "--set",            "batch_size=16", "--seeds", "7", "--quiet"};
    if (cli::run(cil) != cli::kOk) return {false, "cil run failed"};
    for (const auto& e : fs::recursive_directory_iterator(metrics))
      if (e.path().filename() == "metrics.csv") csvs.push_back(slurp(e.path()));
  }
  const bool same = csvs.size() == 2 && !csvs[0].empty() && csvs[0] == csvs[1];
  return {same, fmt("two cil executions, seed 7: metrics CSVs %s (%zu bytes, blob %s)",
                    same ? "byte-identical" : "DIFFER", csvs.empty() ? 0 : csvs[0].size(),
                    csvs.empty() ? "-" : git_blob_hash(csvs[0]).substr(0, 12).c_str())};
}

}  // namespace
}  // namespace pop

int main(int argc, char** argv) {
  using namespace pop;
  CLI::App app("POP acceptance suite");
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "pop_acceptance").string();
  app.add_option("criteria", only, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "scratch directory");
  app.add_option("--cl-per-class", g_cl_per_class, "CL training samples per class for the desk experiments");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient suite", criterion_gradients},
      {"freeze audit", criterion_freeze},
      {"reduction equivalence", criterion_reduction},
      {"fusion oracles", criterion_fusion},
      {"protocol oracles", criterion_protocol},
      {"desk-scale forgetting", criterion_forgetting},
      {"low-shot direction", criterion_kshot},
      {"buffer-only limit", criterion_buffer_only},
      {"determinism", [&] { return criterion_determinism(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", n, criteria[i].first, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
