#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pop/container.hpp"
#include "pop/tensor.hpp"

namespace pop {

enum class PromptMode { SPT, DPT };

std::string_view prompt_mode_name(PromptMode mode);
PromptMode parse_prompt_mode(std::string_view name);

/// Task prompt sets P_1..P_t plus the continually trained POP set.
///
/// Each set is stored as a [layers*m x d] tensor, where layers is 1 under
/// shallow prompting and the backbone depth under deep prompting; rows
/// [l*m, (l+1)*m) are the prompts fed to block l. Only P_t and POP are
/// trainable during task t; earlier sets are frozen when the next task begins.
template <typename T>
class PromptStore {
 public:
  PromptStore(PromptMode mode, std::size_t embed_dim, std::size_t depth, std::size_t pop_tokens,
              std::uint64_t seed, double init_std = 0.02);

  /// Freezes P_1..P_{t-1}, allocates P_t with m prompts (m may be 0), and
  /// creates POP on the first task. Tasks must begin in order.
  void begin_task(int t, std::size_t m);

  PromptMode mode() const { return mode_; }
  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t layers() const { return mode_ == PromptMode::DPT ? depth_ : 1; }
  std::size_t depth() const { return depth_; }
  int current_task() const { return static_cast<int>(tasks_.size()); }

  bool has_pop() const { return pop_.defined(); }
  std::size_t pop_tokens() const { return pop_tokens_; }
  const Tensor<T>& pop() const { return pop_; }

  std::size_t task_tokens(int i) const;
  const Tensor<T>& task(int i) const;

  /// P_t and POP, the only tensors updated during the current task.
  std::vector<Tensor<T>> trainable() const;
  std::size_t trainable_parameter_count() const;
  std::size_t total_parameter_count() const;

  // Checkpoint names "prompt/task/{i}" and "prompt/pop".
  void save(Container& c) const;
  static PromptStore load(const Container& c);

 private:
  Tensor<T> make_set(std::size_t m, std::uint64_t stream_index) const;

  PromptMode mode_;
  std::size_t embed_dim_;
  std::size_t depth_;
  std::size_t pop_tokens_;
  std::uint64_t seed_;
  double init_std_;
  Tensor<T> pop_;
  std::vector<Tensor<T>> tasks_;
  std::vector<std::size_t> task_tokens_;
};

extern template class PromptStore<float>;
extern template class PromptStore<double>;

}  // namespace pop
