#include "pop/prompt_store.hpp"

#include "pop/random.hpp"

namespace pop {

std::string_view prompt_mode_name(PromptMode mode) { return mode == PromptMode::SPT ? "spt" : "dpt"; }

PromptMode parse_prompt_mode(std::string_view name) {
  if (name == "spt" || name == "SPT" || name == "shallow") return PromptMode::SPT;
  if (name == "dpt" || name == "DPT" || name == "deep") return PromptMode::DPT;
  throw InvalidArgument("unknown prompt mode '" + std::string(name) + "' (expected spt|dpt)");
}

template <typename T>
PromptStore<T>::PromptStore(PromptMode mode, std::size_t embed_dim, std::size_t depth, std::size_t pop_tokens,
                            std::uint64_t seed, double init_std)
    : mode_(mode), embed_dim_(embed_dim), depth_(depth), pop_tokens_(pop_tokens), seed_(seed), init_std_(init_std) {
  if (embed_dim == 0 || depth == 0) throw InvalidArgument("PromptStore: embed_dim and depth must be positive");
}

template <typename T>
Tensor<T> PromptStore<T>::make_set(std::size_t m, std::uint64_t stream_index) const {
  Rng rng(derive_seed(seed_, stream::kPromptInit, stream_index));
  std::vector<T> values(layers() * m * embed_dim_);
  for (auto& v : values) v = truncated_normal<T>(rng, init_std_);
  return Tensor<T>::from({layers() * m, embed_dim_}, std::move(values), true);
}

template <typename T>
void PromptStore<T>::begin_task(int t, std::size_t m) {
  if (t != current_task() + 1) {
    throw InvalidArgument("begin_task(" + std::to_string(t) + "): expected task " +
                          std::to_string(current_task() + 1) + (t <= current_task() ? " (task already begun)" : ""));
  }
  for (auto& p : tasks_) {
    if (p.defined()) p.set_requires_grad(false);
  }
  if (t == 1 && pop_tokens_ > 0) pop_ = make_set(pop_tokens_, 0);
  tasks_.push_back(m > 0 ? make_set(m, static_cast<std::uint64_t>(t)) : Tensor<T>{});
  task_tokens_.push_back(m);
}

template <typename T>
std::size_t PromptStore<T>::task_tokens(int i) const {
  if (i < 1 || i > current_task()) {
    throw InvalidArgument("prompt task index " + std::to_string(i) + " outside [1, " +
                          std::to_string(current_task()) + "]");
  }
  return task_tokens_[static_cast<std::size_t>(i - 1)];
}

template <typename T>
const Tensor<T>& PromptStore<T>::task(int i) const {
  if (task_tokens(i) == 0) throw InvalidArgument("task " + std::to_string(i) + " has no prompts");
  return tasks_[static_cast<std::size_t>(i - 1)];
}

template <typename T>
std::vector<Tensor<T>> PromptStore<T>::trainable() const {
  std::vector<Tensor<T>> out;
  if (!tasks_.empty() && tasks_.back().defined()) out.push_back(tasks_.back());
  if (pop_.defined()) out.push_back(pop_);
  return out;
}

template <typename T>
std::size_t PromptStore<T>::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : trainable()) n += p.numel();
  return n;
}

template <typename T>
std::size_t PromptStore<T>::total_parameter_count() const {
  std::size_t n = pop_.defined() ? pop_.numel() : 0;
  for (const auto& p : tasks_)
    if (p.defined()) n += p.numel();
  return n;
}

template <typename T>
void PromptStore<T>::save(Container& c) const {
  c.header["prompt.mode"] = std::string(prompt_mode_name(mode_));
  c.header["prompt.embed_dim"] = std::to_string(embed_dim_);
  c.header["prompt.depth"] = std::to_string(depth_);
  c.header["prompt.pop_tokens"] = std::to_string(pop_tokens_);
  c.header["prompt.seed"] = std::to_string(seed_);
  c.header["prompt.tasks"] = std::to_string(tasks_.size());
  std::string counts;
  for (auto m : task_tokens_) counts += (counts.empty() ? "" : ",") + std::to_string(m);
  c.header["prompt.task_tokens"] = counts;
  if (pop_.defined()) c.put("prompt/pop", pop_);
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i].defined()) c.put("prompt/task/" + std::to_string(i + 1), tasks_[i]);
  }
}

template <typename T>
PromptStore<T> PromptStore<T>::load(const Container& c) {
  auto field = [&](const char* key) -> const std::string& {
    auto it = c.header.find(key);
    if (it == c.header.end()) throw DataError(std::string("checkpoint lacks header field ") + key);
    return it->second;
  };
  PromptStore store(parse_prompt_mode(field("prompt.mode")), std::stoull(field("prompt.embed_dim")),
                    std::stoull(field("prompt.depth")), std::stoull(field("prompt.pop_tokens")),
                    std::stoull(field("prompt.seed")));
  const auto tasks = std::stoull(field("prompt.tasks"));
  const auto& counts = field("prompt.task_tokens");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < tasks; ++i) {
    const auto comma = counts.find(',', pos);
    const auto m = std::stoull(counts.substr(pos, comma - pos));
    pos = comma == std::string::npos ? counts.size() : comma + 1;
    const std::string name = "prompt/task/" + std::to_string(i + 1);
    store.tasks_.push_back(m > 0 ? c.get<T>(name, i + 1 == tasks) : Tensor<T>{});
    store.task_tokens_.push_back(m);
  }
  if (store.pop_tokens_ > 0 && tasks > 0) store.pop_ = c.get<T>("prompt/pop", true);
  return store;
}

template class PromptStore<float>;
template class PromptStore<double>;

}  // namespace pop
