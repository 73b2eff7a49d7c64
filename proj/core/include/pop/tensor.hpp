#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pop/errors.hpp"

namespace pop {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Precision { F32, F64 };

std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations in
/// `pop::ops` never write into their inputs; they allocate fresh outputs, so
/// a value is immutable once produced inside a step. Parameters are the only
/// tensors updated in place, and only by an optimizer between steps.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim() const { return impl_->shape.size(); }
  // Matrix view: cols is the last extent, rows is everything before it.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;
  T& at(std::size_t i) { return impl_->data.at(i); }
  T at(std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<T> grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  int node_id() const { return impl_->node_id; }
  void set_node_id(int id) { impl_->node_id = id; }

  // Deep copy without gradient or graph identity.
  Tensor clone(bool requires_grad = false) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    int node_id = -1;
  };
  std::shared_ptr<Impl> impl_;
};

/// One recorded operation on the tape.
template <typename T>
struct TapeNode {
  std::string op;
  std::vector<int> inputs;  // node ids; -1 for leaves
  int output = -1;
  std::function<void()> backward;
};

/// Per-step recording of differentiable operations (the computation graph).
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape built with `record = false` records nothing and is used for
/// evaluation. Tapes are not reused across steps.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  // True when an op over these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const;
  bool needs_grad(std::span<const Tensor<T>> inputs) const;

  // Appends a node and assigns `output` its node id.
  void record(std::string_view op, std::span<const Tensor<T>> inputs, Tensor<T>& output,
              std::function<void()> backward);

  /// Fills gradient slots of every requires_grad tensor reachable from `loss`.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  const TapeNode<T>& node(std::size_t i) const { return nodes_.at(i); }
  // Number of node visits performed by the last backward().
  std::size_t last_backward_visits() const { return visits_; }

 private:
  bool record_;
  bool backward_done_ = false;
  std::size_t visits_ = 0;
  std::vector<TapeNode<T>> nodes_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace pop
