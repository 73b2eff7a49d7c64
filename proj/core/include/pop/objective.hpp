#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "pop/container.hpp"
#include "pop/fusion.hpp"
#include "pop/tensor.hpp"

namespace pop {

struct LossWeights {
  double task = 1.0;
  double aux = 1.0;
  void validate() const;
};

template <typename T>
struct LinearHead {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [out]

  bool defined() const { return w.defined(); }
  std::size_t in_dim() const { return defined() ? w.shape()[0] : 0; }
  std::size_t out_dim() const { return defined() ? w.shape()[1] : 0; }
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const;
  static LinearHead zeros(std::size_t in, std::size_t out);
};

/// phi_aux (current task, d -> |Y_t|+1), phi_task (fused -> t) and
/// phi_class (fused -> all classes seen). Head inputs follow the width of the
/// configured fusion method.
template <typename T>
class HeadSet {
 public:
  HeadSet(std::size_t embed_dim, FusionMethod method);

  /// Grows the heads for task `new_t` with classes `new_classes`. phi_aux is
  /// replaced by a fresh zero head; phi_task/phi_class keep every weight
  /// linking an existing feature block to an existing output and zero the rest.
  void expand(std::span<const int> new_classes, int new_t);

  int task() const { return task_; }
  FusionMethod method() const { return method_; }
  std::size_t embed_dim() const { return embed_dim_; }

  const std::vector<int>& classes() const { return classes_; }
  std::size_t class_count() const { return classes_.size(); }
  /// Output index of a global class id in phi_class.
  int class_index(int class_id) const;
  /// Number of classes of the current task (|Y_t|).
  std::size_t current_task_classes() const { return current_classes_.size(); }
  /// Within-task index of a class of the current task.
  int local_index(int class_id) const;

  std::vector<Tensor<T>> trainable() const;

  void save(Container& c) const;
  void load(const Container& c);

  LinearHead<T> aux;
  std::vector<LinearHead<T>> past_aux;  // kept for checkpoints, unused at inference
  LinearHead<T> task_head;
  LinearHead<T> class_head;

 private:
  std::size_t embed_dim_;
  FusionMethod method_;
  int task_ = 0;
  std::vector<int> classes_;
  std::vector<int> current_classes_;
  std::map<int, int> class_index_;
};

/// Eq.-style auxiliary target: 0 ("none of the above") for samples of an
/// earlier task k < t, y_local + 1 for samples of the current task.
int aux_target(int y_local, int k, int t);

/// CE(phi_aux(f_t), y_hat) over the batch.
template <typename T>
Tensor<T> aux_loss(Tape<T>& tape, const Tensor<T>& f_t, std::span<const int> aux_targets, const HeadSet<T>& heads);

template <typename T>
struct CilLosses {
  Tensor<T> task;   // CE(phi_task(f), k - 1); constant 0 at t == 1
  Tensor<T> klass;  // CE(phi_class(f), class index)
};

/// `task_ids` are 1-based task indices k, `class_ids` global class ids.
template <typename T>
CilLosses<T> cil_losses(Tape<T>& tape, const Tensor<T>& f, std::span<const int> task_ids,
                        std::span<const int> class_ids, const HeadSet<T>& heads);

/// L_class + w.task * L_task + w.aux * L_aux
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_class, const Tensor<T>& l_task, const Tensor<T>& l_aux,
                     const LossWeights& w);

extern template class HeadSet<float>;
extern template class HeadSet<double>;

}  // namespace pop
