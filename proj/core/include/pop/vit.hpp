#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pop/container.hpp"
#include "pop/data.hpp"
#include "pop/prompt_store.hpp"
#include "pop/tensor.hpp"

namespace pop::vit {

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;

  void validate() const;
  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }

  void write_header(Container& c) const;
  static BackboneConfig read_header(const Container& c);
  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> qkv_w, qkv_b;    // [d x 3d], [3d]
  Tensor<T> proj_w, proj_b;  // [d x d], [d]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_w, fc1_b;  // [d x mlp], [mlp]
  Tensor<T> fc2_w, fc2_b;  // [mlp x d], [d]
};

/// Final-layer outputs split along the input token layout
/// [cls, patches, POP, P_1, ..., P_t]. Each segment is an order-preserving
/// slice of `tokens`.
template <typename T>
struct EncodeOutput {
  std::size_t batch = 0;
  std::size_t tokens_per_sample = 0;
  Tensor<T> tokens;   // [batch*tokens_per_sample x d]
  Tensor<T> cls;      // r_0: [batch x d]
  Tensor<T> patches;  // R: [batch*n x d]
  Tensor<T> pop;      // R_POP: [batch*m_pop x d]; undefined without POP
  std::size_t pop_tokens = 0;
  std::vector<int> task_ids;             // task prompt segments present, in layout order
  std::vector<std::size_t> task_counts;  // m_i per present segment
  std::vector<Tensor<T>> task_outputs;   // R_{P_i}: [batch*m_i x d]

  bool has_task(int i) const;
  const Tensor<T>& task_output(int i) const;
  std::size_t task_count(int i) const;
};

/// Which prompt sets to inject. By default POP (when present) and every task
/// set that has prompts.
struct EncodeSelection {
  bool include_pop = true;
  std::vector<int> tasks;  // empty: all tasks
  bool all_tasks = true;

  static EncodeSelection only_task(int i) { return {false, {i}, false}; }
  static EncodeSelection none() { return {false, {}, false}; }
};

/// Pre-norm ViT encoder. Once frozen, every weight has requires_grad == false
/// and the backbone may be shared read-only across threads.
template <typename T>
class Backbone {
 public:
  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  /// Linear projection of flattened patches [batch*n x patch_dim] -> [batch*n x d].
  Tensor<T> patch_embed(Tape<T>& tape, const Tensor<T>& patches) const;
  /// [s_0 + e_0, s_1 + e_1, ...] per sample: [batch*(n+1) x d].
  Tensor<T> embed(Tape<T>& tape, const Tensor<T>& patches) const;
  Tensor<T> block_forward(Tape<T>& tape, std::size_t block, const Tensor<T>& x, std::size_t batch,
                          std::size_t tokens) const;
  /// QKV projections entering block `block`'s attention, for inspection.
  Tensor<T> block_qkv(Tape<T>& tape, std::size_t block, const Tensor<T>& x) const;
  Tensor<T> final_norm(Tape<T>& tape, const Tensor<T>& x) const;

  /// Prompt-free transformer: final tokens [batch*(n+1) x d].
  Tensor<T> forward_plain(Tape<T>& tape, const Tensor<T>& patches) const;

  /// Prompted forward pass. In DPT mode the prompt rows leaving block l are
  /// dropped and replaced by the layer-(l+1) prompts before the next block.
  /// `block_inputs`, when given, receives the token matrix entering each block.
  EncodeOutput<T> encode(Tape<T>& tape, const Tensor<T>& patches, const PromptStore<T>& prompts,
                         const EncodeSelection& selection = {},
                         std::vector<Tensor<T>>* block_inputs = nullptr) const;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;
  void freeze();
  bool frozen() const;
  std::string weights_sha256() const;

  void save(Container& c) const;
  static Backbone load(const Container& c);

  Tensor<T> patch_w, patch_b;  // [patch_dim x d], [d]
  Tensor<T> cls_token;         // [1 x d]
  Tensor<T> pos_embed;         // [(n+1) x d]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> norm_gamma, norm_beta;

 private:
  BackboneConfig cfg_;
};

/// Flattens images into non-overlapping patches in row-major patch order; each
/// patch vector is laid out (channel, row, col). Returns [batch*n x patch_dim].
template <typename T>
Tensor<T> patchify(std::span<const data::LabeledImage* const> images, const BackboneConfig& cfg);

struct PretrainSchedule {
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-6;
};

template <typename T>
struct PretrainResult {
  Backbone<T> backbone;
  double train_accuracy = 0;
  double heldout_accuracy = 0;  // NaN without a held-out set
};

/// Supervised training of the whole backbone plus a temporary linear head on
/// the class-token output. The head is discarded and the backbone returned
/// frozen. epochs == 0 returns the frozen random initialization.
template <typename T>
PretrainResult<T> pretrain_backbone(const data::Dataset& train, const data::Dataset* heldout,
                                    const BackboneConfig& cfg, const PretrainSchedule& schedule,
                                    std::uint64_t seed, std::span<const int> cl_classes,
                                    const std::function<void(std::size_t, double)>& on_epoch = {});

/// Top-1 accuracy of a linear head on class-token features (used for probes).
template <typename T>
double class_token_accuracy(const Backbone<T>& backbone, const data::Dataset& ds, const Tensor<T>& head_w,
                            const Tensor<T>& head_b, std::span<const int> label_of_class);

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace pop::vit
