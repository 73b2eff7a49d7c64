#include "pop/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace pop {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32" || name == "float32" || name == "32") return Precision::F32;
  if (name == "f64" || name == "float64" || name == "64") return Precision::F64;
  throw InvalidArgument("unknown precision '" + std::string(name) + "' (expected f32|f64)");
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->data.assign(shape_numel(shape), value);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return impl_->shape.empty() ? 1 : impl_->shape.back();
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : numel() / c;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return from(impl_->shape, impl_->data, requires_grad);
}

template <typename T>
bool Tape<T>::needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!record_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

template <typename T>
bool Tape<T>::needs_grad(std::span<const Tensor<T>> inputs) const {
  if (!record_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
}

template <typename T>
void Tape<T>::record(std::string_view op, std::span<const Tensor<T>> inputs, Tensor<T>& output,
                     std::function<void()> backward) {
  if (backward_done_) throw InvariantError("tape reused after backward(); build a new tape per step");
  TapeNode<T> node;
  node.op = std::string(op);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.node_id());
  node.output = static_cast<int>(nodes_.size());
  node.backward = std::move(backward);
  output.set_requires_grad(true);
  output.set_node_id(node.output);
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  visits_ = 0;
  if (!loss.requires_grad()) return;
  const int root = loss.node_id();
  if (root < 0 || root >= static_cast<int>(nodes_.size()) || nodes_[root].output != root) {
    throw InvariantError("loss was not recorded on this tape");
  }
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  for (int i = root; i >= 0; --i) {
    nodes_[static_cast<std::size_t>(i)].backward();
    ++visits_;
  }
  backward_done_ = true;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace pop
