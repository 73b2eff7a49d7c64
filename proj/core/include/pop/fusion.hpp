#pragma once

#include <string_view>
#include <vector>

#include "pop/vit.hpp"

namespace pop {

enum class FusionMethod { FFCat, MeanOfAll, MaxPooling, PopTokenOnly, MeanAndCat };

inline constexpr FusionMethod kAllFusionMethods[] = {FusionMethod::FFCat, FusionMethod::MeanOfAll,
                                                      FusionMethod::MaxPooling, FusionMethod::PopTokenOnly,
                                                      FusionMethod::MeanAndCat};

// CLI spellings: ff-cat, mean-of-all, max-pool, pop-only, mean-and-cat.
std::string_view fusion_name(FusionMethod method);
FusionMethod parse_fusion(std::string_view name);

/// Whether the method reads the POP segment (FFCat does not).
bool fusion_uses_pop(FusionMethod method);

/// Output width of `fuse` at task t.
std::size_t fused_dim(FusionMethod method, std::size_t embed_dim, int t);

/// Identity of each d-wide block of a fused feature. Task blocks carry their
/// task index, the POP block is 0, and single-block fusions return {-1}.
std::vector<int> fused_block_layout(FusionMethod method, int t);

/// f_i = mean over the m_i prompt outputs of task i: [batch x d].
template <typename T>
Tensor<T> task_feature(Tape<T>& tape, const vit::EncodeOutput<T>& out, int i);

/// f_c = mean over the POP outputs: [batch x d].
template <typename T>
Tensor<T> cross_feature(Tape<T>& tape, const vit::EncodeOutput<T>& out);

/// Fused feature of one POP-layout encode pass covering tasks 1..t.
///   MeanAndCat   f_1 (+) ... (+) f_t (+) f_c
///   MeanOfAll    flat mean of every prompt-output token, POP included
///   MaxPooling   coordinate-wise max over f_1..f_t, f_c
///   PopTokenOnly f_c
/// FFCat needs one pass per task and is built with `fuse_ffcat`.
template <typename T>
Tensor<T> fuse(Tape<T>& tape, const vit::EncodeOutput<T>& out, FusionMethod method, int t);

/// FFCat: f_1 (+) ... (+) f_t where f_i comes from a pass with only P_i injected.
template <typename T>
Tensor<T> fuse_ffcat(Tape<T>& tape, std::span<const vit::EncodeOutput<T>> per_task_passes, int t);

}  // namespace pop
