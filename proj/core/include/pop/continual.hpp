#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pop/adam.hpp"
#include "pop/container.hpp"
#include "pop/data.hpp"
#include "pop/fusion.hpp"
#include "pop/kvconfig.hpp"
#include "pop/objective.hpp"
#include "pop/prompt_store.hpp"
#include "pop/vit.hpp"

namespace pop {

struct Schedule {
  std::size_t epochs = 30;
  std::vector<std::size_t> milestones{12, 20, 25};  // lr x0.1 from each of these epochs on
  std::size_t batch_size = 64;
  double lr = 5e-4;
  double weight_decay = 1e-6;
  std::size_t tuning_epochs = 5;
  double tuning_lr_scale = 0.1;

  static Schedule desk() { return {}; }
  static Schedule full_length() { return {170, {60, 100, 120}, 64, 5e-4, 1e-6, 20, 0.1}; }

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

struct ClConfig {
  PromptMode mode = PromptMode::SPT;
  std::size_t tasks = 5;
  std::size_t prompts_per_task = 1;
  std::size_t pop_tokens = 1;
  FusionMethod fusion = FusionMethod::MeanAndCat;
  LossWeights weights;
  std::size_t buffer_capacity = 200;
  std::size_t kshot = 0;  // 0: every training sample of a task
  bool buffer_only = false;
  bool joint = false;  // reference mode: train on D_1..D_t, no buffer
  Schedule schedule;
  double prompt_init_std = 0.02;
  std::uint64_t seed = 1;

  static KvConfig schema();
  static ClConfig from_config(const KvConfig& cfg);
  KvConfig to_config() const;
  void validate() const;
  std::size_t feature_dim(std::size_t embed_dim, int t) const { return fused_dim(fusion, embed_dim, t); }
};

/// Class-balanced rehearsal memory kept in canonical (class, sample id) order.
struct MemoryBuffer {
  std::size_t capacity = 0;
  std::vector<data::LabeledImage> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::vector<int> classes() const;
  std::size_t count_class(int class_id) const;
};

/// floor(capacity / classes), plus one for the first capacity % classes classes
/// in the given (ascending) order.
std::vector<std::size_t> class_quotas(std::size_t capacity, std::size_t classes);

/// Re-balances the buffer over its classes plus those of `incoming`, keeping a
/// seeded uniform subset of each class. Zero capacity leaves the buffer empty.
void update_buffer(MemoryBuffer& buffer, std::span<const data::LabeledImage> incoming, std::uint64_t seed, int task);

/// Seeded uniform subset of min(k, available) samples per class, canonical order.
std::vector<data::LabeledImage> subsample_kshot(std::span<const data::LabeledImage> samples, std::size_t k,
                                                std::uint64_t seed, int task);

/// Per-class seeded subsample of at most `per_class` samples (the tuning-set
/// rule), canonical order.
std::vector<data::LabeledImage> balanced_subsample(std::span<const data::LabeledImage> samples,
                                                   std::size_t per_class, std::uint64_t seed, int task);

double average_accuracy(std::span<const double> accuracies);

struct MetricRow {
  std::string task;  // task index or "all"
  std::string split;
  std::string metric;
  double value = 0;
};

struct MetricLog {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<double> accuracies;                 // A_1..A_t on cumulative test sets
  std::vector<std::vector<double>> task_accuracy;  // [step][task i]
  std::vector<double> wall_clock;                 // seconds per task step
  std::vector<MetricRow> rows;

  void add(std::string task, std::string split, std::string metric, double value);
  double average() const { return average_accuracy(accuracies); }
  /// Columns run_id,seed,task,split,metric,value; the summary AA row last.
  std::string to_csv() const;
};

enum class Stage { Main, Tuning };

struct StepInfo {
  int task = 0;
  Stage stage = Stage::Main;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0;
};

struct TaskReport {
  int task = 0;
  std::size_t train_samples = 0;
  std::size_t tuning_samples = 0;
  double main_loss = 0;    // mean loss over the last main epoch
  double tuning_loss = 0;  // NaN without a tuning stage
  double accuracy = 0;     // A_t
  std::vector<double> task_accuracy;
};

/// Class-incremental POP learner over a frozen backbone.
template <typename T>
class ContinualLearner {
 public:
  using StepObserver = std::function<void(const StepInfo&, const ContinualLearner&)>;

  ContinualLearner(const vit::Backbone<T>& backbone, ClConfig config, std::string run_id = "run");

  /// Trains task `spec.task` (which must be the next task), updates the buffer
  /// and evaluates on the test sets of every task seen so far.
  TaskReport run_task(const data::TaskSpec& spec);

  /// Fused features [batch x feature_dim] and, when the auxiliary loss is
  /// active, f_t [batch x d].
  struct Features {
    Tensor<T> fused;
    Tensor<T> current;
  };
  Features features(Tape<T>& tape, std::span<const data::LabeledImage* const> batch, bool need_current) const;

  /// Global class id predicted by phi_class for each image.
  std::vector<int> predict(std::span<const data::LabeledImage> images) const;
  /// Top-1 accuracy of phi_class; empty set throws.
  double evaluate(std::span<const data::LabeledImage> test) const;

  /// Total loss of one batch; gradients land in the grad slots when the tape records.
  Tensor<T> batch_loss(Tape<T>& tape, std::span<const data::LabeledImage* const> batch) const;

  std::vector<Tensor<T>> trainable() const;

  void set_step_observer(StepObserver fn) { observer_ = std::move(fn); }

  int task() const { return task_; }
  const ClConfig& config() const { return config_; }
  const vit::Backbone<T>& backbone() const { return backbone_; }
  const PromptStore<T>& prompts() const { return prompts_; }
  const HeadSet<T>& heads() const { return heads_; }
  const MemoryBuffer& buffer() const { return buffer_; }
  const MetricLog& log() const { return log_; }
  MetricLog& log() { return log_; }

  /// Prompts, heads, buffer-free learner state and resolved config.
  void save(Container& c) const;

 private:
  double train_stage(std::span<const data::LabeledImage> samples, Stage stage, std::size_t epochs,
                     const std::function<double(std::size_t)>& lr_of_epoch);

  const vit::Backbone<T>& backbone_;
  ClConfig config_;
  PromptStore<T> prompts_;
  HeadSet<T> heads_;
  MemoryBuffer buffer_;
  std::vector<data::LabeledImage> seen_train_;  // joint mode only
  std::vector<data::Dataset> seen_test_;
  MetricLog log_;
  StepObserver observer_;
  int task_ = 0;
};

extern template class ContinualLearner<float>;
extern template class ContinualLearner<double>;

}  // namespace pop
