#include "pop/fusion.hpp"

#include <string>

#include "pop/ops.hpp"

namespace pop {

std::string_view fusion_name(FusionMethod method) {
  switch (method) {
    case FusionMethod::FFCat: return "ff-cat";
    case FusionMethod::MeanOfAll: return "mean-of-all";
    case FusionMethod::MaxPooling: return "max-pool";
    case FusionMethod::PopTokenOnly: return "pop-only";
    case FusionMethod::MeanAndCat: return "mean-and-cat";
  }
  throw InvalidArgument("unknown fusion method");
}

FusionMethod parse_fusion(std::string_view name) {
  for (auto m : kAllFusionMethods) {
    if (fusion_name(m) == name) return m;
  }
  throw InvalidArgument("unknown fusion method '" + std::string(name) +
                        "' (expected ff-cat|mean-of-all|max-pool|pop-only|mean-and-cat)");
}

bool fusion_uses_pop(FusionMethod method) { return method != FusionMethod::FFCat; }

std::size_t fused_dim(FusionMethod method, std::size_t embed_dim, int t) {
  if (t < 1) throw InvalidArgument("fused_dim: task index must be >= 1");
  const auto tasks = static_cast<std::size_t>(t);
  switch (method) {
    case FusionMethod::MeanAndCat: return (tasks + 1) * embed_dim;
    case FusionMethod::FFCat: return tasks * embed_dim;
    default: return embed_dim;
  }
}

std::vector<int> fused_block_layout(FusionMethod method, int t) {
  std::vector<int> layout;
  switch (method) {
    case FusionMethod::MeanAndCat:
      for (int i = 1; i <= t; ++i) layout.push_back(i);
      layout.push_back(0);
      break;
    case FusionMethod::FFCat:
      for (int i = 1; i <= t; ++i) layout.push_back(i);
      break;
    default:
      layout.push_back(-1);
  }
  return layout;
}

template <typename T>
Tensor<T> task_feature(Tape<T>& tape, const vit::EncodeOutput<T>& out, int i) {
  if (!out.has_task(i)) throw InvalidArgument("task_feature: task " + std::to_string(i) + " not in encode output");
  return ops::group_mean(tape, out.task_output(i), out.task_count(i));
}

template <typename T>
Tensor<T> cross_feature(Tape<T>& tape, const vit::EncodeOutput<T>& out) {
  if (!out.pop.defined()) throw InvalidArgument("cross_feature: encode output has no POP segment");
  return ops::group_mean(tape, out.pop, out.pop_tokens);
}

template <typename T>
Tensor<T> fuse(Tape<T>& tape, const vit::EncodeOutput<T>& out, FusionMethod method, int t) {
  if (t < 1) throw InvalidArgument("fuse: task index must be >= 1");
  for (int i = 1; i <= t; ++i) {
    if (method != FusionMethod::PopTokenOnly && !out.has_task(i)) {
      throw InvalidArgument("fuse: encode output does not cover task " + std::to_string(i));
    }
  }
  switch (method) {
    case FusionMethod::MeanAndCat: {
      std::vector<Tensor<T>> parts;
      for (int i = 1; i <= t; ++i) parts.push_back(task_feature(tape, out, i));
      parts.push_back(cross_feature(tape, out));
      return ops::concat_cols<T>(tape, parts);
    }
    case FusionMethod::MeanOfAll: {
      if (!out.pop.defined()) throw InvalidArgument("fuse: mean-of-all needs the POP segment");
      // Prompt outputs follow the class token and the patch tokens.
      const std::size_t first = 1 + out.patches.rows() / out.batch;
      const std::size_t count = out.tokens_per_sample - first;
      const auto rows = ops::take_tokens(tape, out.tokens, out.batch, out.tokens_per_sample, first, count);
      return ops::group_mean(tape, rows, count);
    }
    case FusionMethod::MaxPooling: {
      std::vector<Tensor<T>> parts;
      for (int i = 1; i <= t; ++i) parts.push_back(task_feature(tape, out, i));
      parts.push_back(cross_feature(tape, out));
      return ops::elementwise_max<T>(tape, parts);
    }
    case FusionMethod::PopTokenOnly:
      return cross_feature(tape, out);
    case FusionMethod::FFCat:
      throw InvalidArgument("fuse: ff-cat needs one encode pass per task; use fuse_ffcat");
  }
  throw InvalidArgument("fuse: unknown fusion method");
}

template <typename T>
Tensor<T> fuse_ffcat(Tape<T>& tape, std::span<const vit::EncodeOutput<T>> per_task_passes, int t) {
  if (t < 1 || per_task_passes.size() != static_cast<std::size_t>(t)) {
    throw InvalidArgument("fuse_ffcat: need exactly one pass per task 1.." + std::to_string(t));
  }
  std::vector<Tensor<T>> parts;
  for (int i = 1; i <= t; ++i) parts.push_back(task_feature(tape, per_task_passes[static_cast<std::size_t>(i - 1)], i));
  return ops::concat_cols<T>(tape, parts);
}

template Tensor<float> task_feature(Tape<float>&, const vit::EncodeOutput<float>&, int);
template Tensor<double> task_feature(Tape<double>&, const vit::EncodeOutput<double>&, int);
template Tensor<float> cross_feature(Tape<float>&, const vit::EncodeOutput<float>&);
template Tensor<double> cross_feature(Tape<double>&, const vit::EncodeOutput<double>&);
template Tensor<float> fuse(Tape<float>&, const vit::EncodeOutput<float>&, FusionMethod, int);
template Tensor<double> fuse(Tape<double>&, const vit::EncodeOutput<double>&, FusionMethod, int);
template Tensor<float> fuse_ffcat(Tape<float>&, std::span<const vit::EncodeOutput<float>>, int);
template Tensor<double> fuse_ffcat(Tape<double>&, std::span<const vit::EncodeOutput<double>>, int);

}  // namespace pop
