#include "pop/objective.hpp"

#include <algorithm>
#include <string>

#include "pop/ops.hpp"

namespace pop {

void LossWeights::validate() const {
  if (task < 0 || aux < 0) throw InvalidArgument("loss weights must be non-negative");
}

template <typename T>
Tensor<T> LinearHead<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  return ops::linear(tape, x, w, b);
}

template <typename T>
LinearHead<T> LinearHead<T>::zeros(std::size_t in, std::size_t out) {
  return {Tensor<T>::zeros({in, out}, true), Tensor<T>::zeros({out}, true)};
}

namespace {

// Copies old[in_old x out_old] into new[in_new x out_new] block by block,
// matching feature blocks by identity and outputs by position.
template <typename T>
void copy_head(const LinearHead<T>& old, LinearHead<T>& fresh, const std::vector<int>& old_layout,
               const std::vector<int>& new_layout, std::size_t block) {
  if (!old.defined()) return;
  const std::size_t out_old = old.out_dim(), out_new = fresh.out_dim();
  auto dst = fresh.w.data();
  const auto src = old.w.data();
  for (std::size_t nb = 0; nb < new_layout.size(); ++nb) {
    const auto it = std::find(old_layout.begin(), old_layout.end(), new_layout[nb]);
    if (it == old_layout.end()) continue;
    const auto ob = static_cast<std::size_t>(it - old_layout.begin());
    for (std::size_t r = 0; r < block; ++r)
      for (std::size_t c = 0; c < out_old; ++c) dst[(nb * block + r) * out_new + c] = src[(ob * block + r) * out_old + c];
  }
  std::copy(old.b.data().begin(), old.b.data().end(), fresh.b.data().begin());
}

}  // namespace

template <typename T>
HeadSet<T>::HeadSet(std::size_t embed_dim, FusionMethod method) : embed_dim_(embed_dim), method_(method) {
  if (embed_dim == 0) throw InvalidArgument("HeadSet: embed_dim must be positive");
}

template <typename T>
void HeadSet<T>::expand(std::span<const int> new_classes, int new_t) {
  if (new_t != task_ + 1) {
    throw InvalidArgument("expand_heads(" + std::to_string(new_t) + "): heads are at task " + std::to_string(task_) +
                          (new_t <= task_ ? " (already expanded)" : ""));
  }
  if (new_classes.empty()) throw InvalidArgument("expand_heads: task has no classes");
  for (int c : new_classes) {
    if (class_index_.count(c)) throw InvalidArgument("expand_heads: class " + std::to_string(c) + " already seen");
  }
  const auto old_layout = task_ > 0 ? fused_block_layout(method_, task_) : std::vector<int>{};
  const auto new_layout = fused_block_layout(method_, new_t);
  const std::size_t in_new = fused_dim(method_, embed_dim_, new_t);

  for (int c : new_classes) {
    class_index_[c] = static_cast<int>(classes_.size());
    classes_.push_back(c);
  }
  current_classes_.assign(new_classes.begin(), new_classes.end());

  auto task_head_new = LinearHead<T>::zeros(in_new, static_cast<std::size_t>(new_t));
  auto class_head_new = LinearHead<T>::zeros(in_new, classes_.size());
  copy_head(task_head, task_head_new, old_layout, new_layout, embed_dim_);
  copy_head(class_head, class_head_new, old_layout, new_layout, embed_dim_);
  task_head = task_head_new;
  class_head = class_head_new;

  if (aux.defined()) {
    aux.w.set_requires_grad(false);
    aux.b.set_requires_grad(false);
    past_aux.push_back(aux);
  }
  aux = LinearHead<T>::zeros(embed_dim_, new_classes.size() + 1);
  task_ = new_t;
}

template <typename T>
int HeadSet<T>::class_index(int class_id) const {
  const auto it = class_index_.find(class_id);
  if (it == class_index_.end()) throw InvalidArgument("class " + std::to_string(class_id) + " not covered by heads");
  return it->second;
}

template <typename T>
int HeadSet<T>::local_index(int class_id) const {
  const auto it = std::find(current_classes_.begin(), current_classes_.end(), class_id);
  if (it == current_classes_.end()) {
    throw InvalidArgument("class " + std::to_string(class_id) + " is not in the current task");
  }
  return static_cast<int>(it - current_classes_.begin());
}

template <typename T>
std::vector<Tensor<T>> HeadSet<T>::trainable() const {
  if (task_ == 0) return {};
  return {aux.w, aux.b, task_head.w, task_head.b, class_head.w, class_head.b};
}

template <typename T>
void HeadSet<T>::save(Container& c) const {
  c.header["head.task"] = std::to_string(task_);
  c.header["head.fusion"] = std::string(fusion_name(method_));
  std::string cls, cur;
  for (int x : classes_) cls += (cls.empty() ? "" : ",") + std::to_string(x);
  for (int x : current_classes_) cur += (cur.empty() ? "" : ",") + std::to_string(x);
  c.header["head.classes"] = cls;
  c.header["head.current_classes"] = cur;
  for (std::size_t i = 0; i < past_aux.size(); ++i) {
    c.put("head/aux_" + std::to_string(i + 1) + "/w", past_aux[i].w);
    c.put("head/aux_" + std::to_string(i + 1) + "/b", past_aux[i].b);
  }
  if (task_ > 0) {
    c.put("head/aux_" + std::to_string(task_) + "/w", aux.w);
    c.put("head/aux_" + std::to_string(task_) + "/b", aux.b);
    c.put("head/task/w", task_head.w);
    c.put("head/task/b", task_head.b);
    c.put("head/class/w", class_head.w);
    c.put("head/class/b", class_head.b);
  }
}

template <typename T>
void HeadSet<T>::load(const Container& c) {
  auto field = [&](const char* key) -> const std::string& {
    auto it = c.header.find(key);
    if (it == c.header.end()) throw DataError(std::string("checkpoint lacks header field ") + key);
    return it->second;
  };
  auto ints = [](const std::string& s) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
      const auto comma = s.find(',', pos);
      out.push_back(std::stoi(s.substr(pos, comma - pos)));
      pos = comma == std::string::npos ? s.size() : comma + 1;
    }
    return out;
  };
  if (parse_fusion(field("head.fusion")) != method_) throw DataError("checkpoint heads use a different fusion method");
  task_ = std::stoi(field("head.task"));
  classes_ = ints(field("head.classes"));
  current_classes_ = ints(field("head.current_classes"));
  class_index_.clear();
  for (std::size_t i = 0; i < classes_.size(); ++i) class_index_[classes_[i]] = static_cast<int>(i);
  past_aux.clear();
  for (int i = 1; i < task_; ++i) {
    past_aux.push_back({c.get<T>("head/aux_" + std::to_string(i) + "/w"), c.get<T>("head/aux_" + std::to_string(i) + "/b")});
  }
  if (task_ > 0) {
    aux = {c.get<T>("head/aux_" + std::to_string(task_) + "/w", true),
           c.get<T>("head/aux_" + std::to_string(task_) + "/b", true)};
    task_head = {c.get<T>("head/task/w", true), c.get<T>("head/task/b", true)};
    class_head = {c.get<T>("head/class/w", true), c.get<T>("head/class/b", true)};
  }
}

int aux_target(int y_local, int k, int t) {
  if (k > t) {
    throw InvalidArgument("aux_target: sample task " + std::to_string(k) + " is ahead of current task " +
                          std::to_string(t));
  }
  if (k < 1) throw InvalidArgument("aux_target: task index must be >= 1");
  if (k < t) return 0;
  if (y_local < 0) throw InvalidArgument("aux_target: negative within-task label");
  return y_local + 1;
}

template <typename T>
Tensor<T> aux_loss(Tape<T>& tape, const Tensor<T>& f_t, std::span<const int> aux_targets, const HeadSet<T>& heads) {
  if (!heads.aux.defined()) throw InvalidArgument("aux_loss: heads not expanded for any task");
  if (f_t.cols() != heads.embed_dim()) {
    throw DimensionError("aux_loss: feature width " + std::to_string(f_t.cols()) + " != " +
                         std::to_string(heads.embed_dim()));
  }
  const auto outputs = static_cast<int>(heads.aux.out_dim());
  for (std::size_t i = 0; i < aux_targets.size(); ++i) {
    if (aux_targets[i] < 0 || aux_targets[i] >= outputs) {
      throw InvalidArgument("aux_loss: target " + std::to_string(aux_targets[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(outputs - 1) + "]");
    }
  }
  return ops::cross_entropy(tape, heads.aux.forward(tape, f_t), aux_targets);
}

template <typename T>
CilLosses<T> cil_losses(Tape<T>& tape, const Tensor<T>& f, std::span<const int> task_ids,
                        std::span<const int> class_ids, const HeadSet<T>& heads) {
  const int t = heads.task();
  if (t < 1) throw InvalidArgument("cil_losses: heads not expanded for any task");
  if (f.cols() != heads.class_head.in_dim()) {
    throw DimensionError("cil_losses: feature width " + std::to_string(f.cols()) + " != head input " +
                         std::to_string(heads.class_head.in_dim()));
  }
  std::vector<int> cls(class_ids.size());
  for (std::size_t i = 0; i < class_ids.size(); ++i) cls[i] = heads.class_index(class_ids[i]);
  CilLosses<T> out;
  out.klass = ops::cross_entropy(tape, heads.class_head.forward(tape, f), cls);
  if (t == 1) {
    for (int k : task_ids) {
      if (k != 1) throw InvalidArgument("cil_losses: task label " + std::to_string(k) + " outside [1, 1]");
    }
    out.task = Tensor<T>::zeros({1});
  } else {
    std::vector<int> tk(task_ids.size());
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
      if (task_ids[i] < 1 || task_ids[i] > t) {
        throw InvalidArgument("cil_losses: task label " + std::to_string(task_ids[i]) + " outside [1, " +
                              std::to_string(t) + "]");
      }
      tk[i] = task_ids[i] - 1;
    }
    out.task = ops::cross_entropy(tape, heads.task_head.forward(tape, f), tk);
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_class, const Tensor<T>& l_task, const Tensor<T>& l_aux,
                     const LossWeights& w) {
  w.validate();
  const std::array<Tensor<T>, 3> terms{l_class, l_task, l_aux};
  const std::array<T, 3> weights{T(1), static_cast<T>(w.task), static_cast<T>(w.aux)};
  return ops::weighted_sum<T>(tape, terms, weights);
}

template struct LinearHead<float>;
template struct LinearHead<double>;
template class HeadSet<float>;
template class HeadSet<double>;
template Tensor<float> aux_loss(Tape<float>&, const Tensor<float>&, std::span<const int>, const HeadSet<float>&);
template Tensor<double> aux_loss(Tape<double>&, const Tensor<double>&, std::span<const int>, const HeadSet<double>&);
template CilLosses<float> cil_losses(Tape<float>&, const Tensor<float>&, std::span<const int>, std::span<const int>,
                                     const HeadSet<float>&);
template CilLosses<double> cil_losses(Tape<double>&, const Tensor<double>&, std::span<const int>, std::span<const int>,
                                      const HeadSet<double>&);
template Tensor<float> total_loss(Tape<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                  const LossWeights&);
template Tensor<double> total_loss(Tape<double>&, const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                   const LossWeights&);

}  // namespace pop
