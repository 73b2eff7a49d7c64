#include "pop/adam.hpp"

#include <cmath>
#include <string>

namespace pop {

template <typename T>
AdamState<T> AdamState<T>::create(std::span<const Tensor<T>> params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.shapes.push_back(p.shape());
    s.first_moment.emplace_back(p.numel(), T(0));
    s.second_moment.emplace_back(p.numel(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (params.size() != state.shapes.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but state tracks " +
                         std::to_string(state.shapes.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.shapes[i]) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " has shape " +
                           shape_str(params[i].shape()) + ", state expects " + shape_str(state.shapes[i]));
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T bias1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
  const T bias2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
  const T lr = static_cast<T>(c.lr), wd = static_cast<T>(c.weight_decay);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2), eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) continue;
    auto w = p.data();
    const auto g = p.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = (g.empty() ? T(0) : g[j]) + wd * w[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const T mhat = m[j] / bias1;
      const T vhat = v[j] / bias2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace pop
