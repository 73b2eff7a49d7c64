#include "pop/continual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "pop/errors.hpp"
#include "pop/ops.hpp"
#include "pop/random.hpp"

namespace pop {

double Schedule::lr_at(std::size_t epoch) const {
  double lr_now = lr;
  for (auto m : milestones) {
    if (epoch >= m) lr_now *= 0.1;
  }
  return lr_now;
}

void Schedule::validate() const {
  if (epochs == 0) throw InvalidArgument("schedule: epochs must be positive");
  if (batch_size == 0) throw InvalidArgument("schedule: batch_size must be positive");
  if (!(lr > 0)) throw InvalidArgument("schedule: lr must be positive");
  if (weight_decay < 0) throw InvalidArgument("schedule: weight_decay must be non-negative");
  if (!(tuning_lr_scale > 0)) throw InvalidArgument("schedule: tuning_lr_scale must be positive");
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw InvalidArgument("schedule: milestones must be ascending");
  }
}

KvConfig ClConfig::schema() {
  const ClConfig c;
  auto list = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
  };
  return KvConfig({
      {"mode", KvType::String, std::string(prompt_mode_name(c.mode)), "spt or dpt"},
      {"tasks", KvType::Int, std::to_string(c.tasks), "number of tasks T"},
      {"prompts_per_task", KvType::Int, std::to_string(c.prompts_per_task), "prompt tokens per task set (m)"},
      {"pop_tokens", KvType::Int, std::to_string(c.pop_tokens), "POP tokens"},
      {"fusion", KvType::String, std::string(fusion_name(c.fusion)),
       "ff-cat|mean-of-all|max-pool|pop-only|mean-and-cat"},
      {"lambda_task", KvType::Real, format_real(c.weights.task), "weight of the task-id loss"},
      {"lambda_aux", KvType::Real, format_real(c.weights.aux), "weight of the auxiliary loss"},
      {"buffer", KvType::Int, std::to_string(c.buffer_capacity), "memory buffer capacity (0: none)"},
      {"kshot", KvType::Int, std::to_string(c.kshot), "training samples per new class (0: all)"},
      {"buffer_only", KvType::Bool, "false", "train on buffer contents only"},
      {"joint", KvType::Bool, "false", "train on the union of all tasks seen so far"},
      {"epochs", KvType::Int, std::to_string(c.schedule.epochs), "main-stage epochs per task"},
      {"milestones", KvType::IntList, list(c.schedule.milestones), "epochs where lr drops x0.1"},
      {"batch_size", KvType::Int, std::to_string(c.schedule.batch_size), "minibatch size"},
      {"lr", KvType::Real, format_real(c.schedule.lr), "Adam learning rate"},
      {"weight_decay", KvType::Real, format_real(c.schedule.weight_decay), "L2 weight decay"},
      {"tuning_epochs", KvType::Int, std::to_string(c.schedule.tuning_epochs), "class-balanced tuning epochs"},
      {"tuning_lr_scale", KvType::Real, format_real(c.schedule.tuning_lr_scale), "tuning lr relative to lr"},
      {"prompt_init_std", KvType::Real, format_real(c.prompt_init_std), "prompt init std"},
      {"seed", KvType::Int, std::to_string(c.seed), "run seed"},
  });
}

ClConfig ClConfig::from_config(const KvConfig& cfg) {
  auto count = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0) throw InvalidArgument(std::string("config: ") + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  ClConfig c;
  c.mode = parse_prompt_mode(cfg.get_string("mode"));
  c.tasks = count("tasks");
  c.prompts_per_task = count("prompts_per_task");
  c.pop_tokens = count("pop_tokens");
  c.fusion = parse_fusion(cfg.get_string("fusion"));
  c.weights.task = cfg.get_real("lambda_task");
  c.weights.aux = cfg.get_real("lambda_aux");
  c.buffer_capacity = count("buffer");
  c.kshot = count("kshot");
  c.buffer_only = cfg.get_bool("buffer_only");
  c.joint = cfg.get_bool("joint");
  c.schedule.epochs = count("epochs");
  c.schedule.milestones.clear();
  for (auto m : cfg.get_int_list("milestones")) {
    if (m < 0) throw InvalidArgument("config: milestones must be non-negative");
    c.schedule.milestones.push_back(static_cast<std::size_t>(m));
  }
  c.schedule.batch_size = count("batch_size");
  c.schedule.lr = cfg.get_real("lr");
  c.schedule.weight_decay = cfg.get_real("weight_decay");
  c.schedule.tuning_epochs = count("tuning_epochs");
  c.schedule.tuning_lr_scale = cfg.get_real("tuning_lr_scale");
  c.prompt_init_std = cfg.get_real("prompt_init_std");
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  c.validate();
  return c;
}

KvConfig ClConfig::to_config() const {
  auto cfg = schema();
  std::string ms;
  for (auto m : schedule.milestones) ms += (ms.empty() ? "" : ",") + std::to_string(m);
  cfg.set("mode", prompt_mode_name(mode));
  cfg.set("tasks", std::to_string(tasks));
  cfg.set("prompts_per_task", std::to_string(prompts_per_task));
  cfg.set("pop_tokens", std::to_string(pop_tokens));
  cfg.set("fusion", fusion_name(fusion));
  cfg.set("lambda_task", format_real(weights.task));
  cfg.set("lambda_aux", format_real(weights.aux));
  cfg.set("buffer", std::to_string(buffer_capacity));
  cfg.set("kshot", std::to_string(kshot));
  cfg.set("buffer_only", buffer_only ? "true" : "false");
  cfg.set("joint", joint ? "true" : "false");
  cfg.set("epochs", std::to_string(schedule.epochs));
  cfg.set("milestones", ms);
  cfg.set("batch_size", std::to_string(schedule.batch_size));
  cfg.set("lr", format_real(schedule.lr));
  cfg.set("weight_decay", format_real(schedule.weight_decay));
  cfg.set("tuning_epochs", std::to_string(schedule.tuning_epochs));
  cfg.set("tuning_lr_scale", format_real(schedule.tuning_lr_scale));
  cfg.set("prompt_init_std", format_real(prompt_init_std));
  cfg.set("seed", std::to_string(seed));
  return cfg;
}

void ClConfig::validate() const {
  schedule.validate();
  weights.validate();
  if (tasks == 0) throw InvalidArgument("config: tasks must be positive");
  if (buffer_only && joint) throw InvalidArgument("config: buffer_only and joint are exclusive");
  if (buffer_only && buffer_capacity == 0) throw InvalidArgument("config: buffer_only needs a buffer");
  const bool needs_task_prompts = fusion == FusionMethod::MeanAndCat || fusion == FusionMethod::FFCat ||
                                  fusion == FusionMethod::MaxPooling;
  if (prompts_per_task == 0 && needs_task_prompts) {
    throw InvalidArgument("config: fusion " + std::string(fusion_name(fusion)) + " needs prompts_per_task >= 1");
  }
  if (prompts_per_task == 0 && weights.aux > 0) {
    throw InvalidArgument("config: the auxiliary loss needs prompts_per_task >= 1 (set lambda_aux = 0)");
  }
  if (fusion_uses_pop(fusion) && pop_tokens == 0) {
    throw InvalidArgument("config: fusion " + std::string(fusion_name(fusion)) + " needs pop_tokens >= 1");
  }
  if (prompts_per_task == 0 && pop_tokens == 0) throw InvalidArgument("config: no prompts to train");
}

std::vector<int> MemoryBuffer::classes() const {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.class_id);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t MemoryBuffer::count_class(int class_id) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const auto& s) { return s.class_id == class_id; }));
}

std::vector<std::size_t> class_quotas(std::size_t capacity, std::size_t classes) {
  if (classes == 0) return {};
  if (capacity < classes) {
    throw InvalidArgument("buffer capacity " + std::to_string(capacity) + " is below the class count " +
                          std::to_string(classes) + " (quota would be 0)");
  }
  std::vector<std::size_t> q(classes, capacity / classes);
  for (std::size_t i = 0; i < capacity % classes; ++i) ++q[i];
  return q;
}

namespace {

bool canonical_less(const data::LabeledImage& a, const data::LabeledImage& b) {
  return a.class_id != b.class_id ? a.class_id < b.class_id : a.sample_id < b.sample_id;
}

std::map<int, std::vector<const data::LabeledImage*>> by_class(std::span<const data::LabeledImage> samples) {
  std::map<int, std::vector<const data::LabeledImage*>> out;
  for (const auto& s : samples) out[s.class_id].push_back(&s);
  for (auto& [c, v] : out) {
    std::sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->sample_id < b->sample_id; });
  }
  return out;
}

// Uniform subset of `count` items in canonical order, from a per-class stream.
std::vector<const data::LabeledImage*> pick(const std::vector<const data::LabeledImage*>& pool, std::size_t count,
                                            std::uint64_t stream_seed) {
  if (count >= pool.size()) return pool;
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(stream_seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<const data::LabeledImage*> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

std::uint64_t class_stream(std::uint64_t seed, std::uint64_t purpose, int task, int class_id) {
  return derive_seed(seed, purpose, (static_cast<std::uint64_t>(task) << 32) | static_cast<std::uint32_t>(class_id));
}

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

void update_buffer(MemoryBuffer& buffer, std::span<const data::LabeledImage> incoming, std::uint64_t seed, int task) {
  if (buffer.capacity == 0) {
    buffer.samples.clear();
    return;
  }
  auto old_pools = by_class(buffer.samples);
  auto new_pools = by_class(incoming);
  for (const auto& [c, v] : new_pools) {
    if (old_pools.count(c)) throw InvalidArgument("update_buffer: class " + std::to_string(c) + " already buffered");
  }
  std::vector<int> classes;
  for (const auto& [c, v] : old_pools) classes.push_back(c);
  for (const auto& [c, v] : new_pools) classes.push_back(c);
  std::sort(classes.begin(), classes.end());
  const auto quotas = class_quotas(buffer.capacity, classes.size());
  std::vector<data::LabeledImage> next;
  for (std::size_t r = 0; r < classes.size(); ++r) {
    const int c = classes[r];
    const auto& pool = old_pools.count(c) ? old_pools[c] : new_pools[c];
    for (const auto* s : pick(pool, quotas[r], class_stream(seed, stream::kBuffer, task, c))) next.push_back(*s);
  }
  buffer.samples = std::move(next);
}

std::vector<data::LabeledImage> subsample_kshot(std::span<const data::LabeledImage> samples, std::size_t k,
                                                std::uint64_t seed, int task) {
  if (k == 0) throw InvalidArgument("subsample_kshot: k must be >= 1");
  std::vector<data::LabeledImage> out;
  for (const auto& [c, pool] : by_class(samples)) {
    for (const auto* s : pick(pool, k, class_stream(seed, stream::kKShot, task, c))) out.push_back(*s);
  }
  return out;
}

std::vector<data::LabeledImage> balanced_subsample(std::span<const data::LabeledImage> samples,
                                                   std::size_t per_class, std::uint64_t seed, int task) {
  std::vector<data::LabeledImage> out;
  for (const auto& [c, pool] : by_class(samples)) {
    for (const auto* s : pick(pool, per_class, class_stream(seed, stream::kBalance, task, c))) out.push_back(*s);
  }
  return out;
}

double average_accuracy(std::span<const double> accuracies) {
  if (accuracies.empty()) throw InvalidArgument("average_accuracy: no task steps logged");
  double s = 0;
  for (double a : accuracies) s += a;
  return s / static_cast<double>(accuracies.size());
}

void MetricLog::add(std::string task, std::string split, std::string metric, double value) {
  rows.push_back({std::move(task), std::move(split), std::move(metric), value});
}

std::string MetricLog::to_csv() const {
  std::string out = "run_id,seed,task,split,metric,value\n";
  char buf[64];
  auto line = [&](const MetricRow& r) {
    std::snprintf(buf, sizeof buf, "%.6f", r.value);
    out += run_id + "," + std::to_string(seed) + "," + r.task + "," + r.split + "," + r.metric + "," + buf + "\n";
  };
  for (const auto& r : rows) line(r);
  if (!accuracies.empty()) line({"all", "test", "AA", average()});
  return out;
}

template <typename T>
ContinualLearner<T>::ContinualLearner(const vit::Backbone<T>& backbone, ClConfig config, std::string run_id)
    : backbone_(backbone),
      config_(std::move(config)),
      prompts_(config_.mode, backbone.config().embed_dim, backbone.config().depth,
               fusion_uses_pop(config_.fusion) ? config_.pop_tokens : 0,
               derive_seed(config_.seed, stream::kPromptInit), config_.prompt_init_std),
      heads_(backbone.config().embed_dim, config_.fusion) {
  config_.validate();
  if (!backbone.frozen()) throw InvalidArgument("ContinualLearner: backbone must be frozen");
  log_.run_id = std::move(run_id);
  log_.seed = config_.seed;
}

template <typename T>
typename ContinualLearner<T>::Features ContinualLearner<T>::features(
    Tape<T>& tape, std::span<const data::LabeledImage* const> batch, bool need_current) const {
  const auto patches = vit::patchify<T>(batch, backbone_.config());
  Features f;
  if (config_.fusion == FusionMethod::FFCat) {
    std::vector<vit::EncodeOutput<T>> passes;
    for (int i = 1; i <= task_; ++i) {
      passes.push_back(backbone_.encode(tape, patches, prompts_, vit::EncodeSelection::only_task(i)));
    }
    f.fused = fuse_ffcat<T>(tape, passes, task_);
    if (need_current) f.current = task_feature(tape, passes.back(), task_);
  } else {
    const auto out = backbone_.encode(tape, patches, prompts_);
    f.fused = fuse(tape, out, config_.fusion, task_);
    if (need_current) f.current = task_feature(tape, out, task_);
  }
  return f;
}

template <typename T>
Tensor<T> ContinualLearner<T>::batch_loss(Tape<T>& tape, std::span<const data::LabeledImage* const> batch) const {
  const bool use_aux = config_.weights.aux > 0;
  const auto f = features(tape, batch, use_aux);
  std::vector<int> task_ids, class_ids, aux_targets;
  for (const auto* s : batch) {
    task_ids.push_back(s->task_id);
    class_ids.push_back(s->class_id);
    if (use_aux) {
      aux_targets.push_back(aux_target(s->task_id == task_ ? heads_.local_index(s->class_id) : 0, s->task_id, task_));
    }
  }
  const auto cil = cil_losses(tape, f.fused, task_ids, class_ids, heads_);
  const auto l_aux = use_aux ? aux_loss(tape, f.current, aux_targets, heads_) : Tensor<T>::zeros({1});
  return total_loss(tape, cil.klass, cil.task, l_aux, config_.weights);
}

template <typename T>
std::vector<Tensor<T>> ContinualLearner<T>::trainable() const {
  auto params = prompts_.trainable();
  for (auto& h : heads_.trainable()) params.push_back(h);
  return params;
}

template <typename T>
double ContinualLearner<T>::train_stage(std::span<const data::LabeledImage> samples, Stage stage, std::size_t epochs,
                                        const std::function<double(std::size_t)>& lr_of_epoch) {
  if (samples.empty() || epochs == 0) return std::numeric_limits<double>::quiet_NaN();
  auto params = trainable();
  AdamConfig adam;
  adam.weight_decay = config_.schedule.weight_decay;
  auto state = AdamState<T>::create(params, adam);
  const std::size_t bs = config_.schedule.batch_size;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double epoch_loss = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    state.config.lr = lr_of_epoch(epoch);
    Rng rng(derive_seed(config_.seed, stream::kEpochShuffle,
                        (static_cast<std::uint64_t>(task_) << 32) | (static_cast<std::uint64_t>(stage) << 24) | epoch));
    shuffle(order, rng);
    double loss_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      std::vector<const data::LabeledImage*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&samples[order[i]]);
      for (auto& p : params) p.zero_grad();
      Tape<T> tape;
      const auto loss = batch_loss(tape, batch);
      if (loss.requires_grad()) tape.backward(loss);
      adam_step<T>(params, state);
      const double l = static_cast<double>(loss.item());
      loss_sum += l * static_cast<double>(end - begin);
      if (observer_) observer_({task_, stage, epoch, step, l}, *this);
      ++step;
    }
    epoch_loss = loss_sum / static_cast<double>(order.size());
  }
  for (auto& p : params) p.zero_grad();
  return epoch_loss;
}

template <typename T>
TaskReport ContinualLearner<T>::run_task(const data::TaskSpec& spec) {
  const int t = task_ + 1;
  if (spec.task != t) {
    throw InvalidArgument("run_task: expected task " + std::to_string(t) + ", got task " + std::to_string(spec.task));
  }
  if (static_cast<std::size_t>(t) > config_.tasks) {
    throw InvalidArgument("run_task: configured for " + std::to_string(config_.tasks) + " tasks");
  }
  for (const auto& s : spec.train.samples) {
    if (s.task_id != t) throw InvalidArgument("run_task: training sample not stamped with task " + std::to_string(t));
  }
  const auto started = std::chrono::steady_clock::now();

  prompts_.begin_task(t, config_.prompts_per_task);
  heads_.expand(spec.classes, t);
  task_ = t;

  std::vector<data::LabeledImage> current =
      config_.kshot > 0 ? subsample_kshot(spec.train.samples, config_.kshot, config_.seed, t) : spec.train.samples;
  std::sort(current.begin(), current.end(), canonical_less);

  TaskReport report;
  report.task = t;
  std::vector<data::LabeledImage> train;
  if (config_.joint) {
    seen_train_.insert(seen_train_.end(), current.begin(), current.end());
    std::sort(seen_train_.begin(), seen_train_.end(), canonical_less);
    train = seen_train_;
  } else if (config_.buffer_only) {
    buffer_.capacity = config_.buffer_capacity;
    update_buffer(buffer_, current, config_.seed, t);
    for (int c : heads_.classes()) {
      if (buffer_.count_class(c) == 0) throw InvalidArgument("buffer-only: class " + std::to_string(c) + " missing");
    }
    train = buffer_.samples;
  } else {
    train = current;
    train.insert(train.end(), buffer_.samples.begin(), buffer_.samples.end());
  }
  report.train_samples = train.size();
  const auto& sched = config_.schedule;
  report.main_loss = train_stage(train, Stage::Main, sched.epochs, [&](std::size_t e) { return sched.lr_at(e); });

  report.tuning_loss = std::numeric_limits<double>::quiet_NaN();
  if (!config_.joint && !config_.buffer_only && !buffer_.empty() && sched.tuning_epochs > 0) {
    std::size_t per_class = std::numeric_limits<std::size_t>::max();
    for (int c : buffer_.classes()) per_class = std::min(per_class, buffer_.count_class(c));
    auto tuning = balanced_subsample(current, per_class, config_.seed, t);
    tuning.insert(tuning.end(), buffer_.samples.begin(), buffer_.samples.end());
    report.tuning_samples = tuning.size();
    const double lr = sched.lr * sched.tuning_lr_scale;
    report.tuning_loss = train_stage(tuning, Stage::Tuning, sched.tuning_epochs, [&](std::size_t) { return lr; });
  }

  if (!config_.joint && !config_.buffer_only) {
    buffer_.capacity = config_.buffer_capacity;
    update_buffer(buffer_, current, config_.seed, t);
  }

  seen_test_.push_back(spec.test);
  std::vector<data::LabeledImage> cumulative;
  for (const auto& ds : seen_test_) cumulative.insert(cumulative.end(), ds.samples.begin(), ds.samples.end());
  report.accuracy = evaluate(cumulative);
  for (const auto& ds : seen_test_) report.task_accuracy.push_back(evaluate(ds.samples));

  const auto ts = std::to_string(t);
  log_.accuracies.push_back(report.accuracy);
  log_.task_accuracy.push_back(report.task_accuracy);
  log_.add(ts, "test", "acc_cumulative", report.accuracy);
  for (std::size_t i = 0; i < report.task_accuracy.size(); ++i) {
    log_.add(ts, "test", "acc_task_" + std::to_string(i + 1), report.task_accuracy[i]);
  }
  log_.add(ts, "train", "loss_main", report.main_loss);
  if (!std::isnan(report.tuning_loss)) log_.add(ts, "train", "loss_tuning", report.tuning_loss);
  log_.wall_clock.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
  return report;
}

template <typename T>
std::vector<int> ContinualLearner<T>::predict(std::span<const data::LabeledImage> images) const {
  if (task_ == 0) throw InvalidArgument("predict: no task trained yet");
  constexpr std::size_t kEvalBatch = 256;
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(images.size(), begin + kEvalBatch);
    std::vector<const data::LabeledImage*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&images[i]);
    Tape<T> tape(false);
    const auto f = features(tape, batch, false);
    const auto logits = heads_.class_head.forward(tape, f.fused);
    const std::size_t classes = logits.cols();
    const auto v = logits.data();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (v[r * classes + c] > v[r * classes + best]) best = c;
      }
      out.push_back(heads_.classes()[best]);
    }
  }
  return out;
}

template <typename T>
double ContinualLearner<T>::evaluate(std::span<const data::LabeledImage> test) const {
  if (test.empty()) throw InvalidArgument("evaluate: empty test set");
  const auto pred = predict(test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += pred[i] == test[i].class_id;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

template <typename T>
void ContinualLearner<T>::save(Container& c) const {
  for (const auto& [k, v] : parse_kv_text(config_.to_config().to_text())) c.header["cl." + k] = v;
  c.header["cl.task"] = std::to_string(task_);
  c.header["cl.backbone_sha256"] = backbone_.weights_sha256();
  prompts_.save(c);
  heads_.save(c);
}

template class ContinualLearner<float>;
template class ContinualLearner<double>;

}  // namespace pop
