#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pop/tensor.hpp"

namespace pop {

struct AdamConfig {
  double lr = 5e-4;
  double weight_decay = 1e-6;  // added to the gradient (L2 form), not decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Shape> shapes;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  // Zeroed moments sized for `params`.
  static AdamState create(std::span<const Tensor<T>> params, AdamConfig config = {});
};

/// One Adam update of every trainable tensor in `params` from its grad slot.
/// A missing grad slot counts as a zero gradient; frozen tensors are skipped.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

extern template struct AdamState<float>;
extern template struct AdamState<double>;
extern template void adam_step(std::span<Tensor<float>>, AdamState<float>&);
extern template void adam_step(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace pop
