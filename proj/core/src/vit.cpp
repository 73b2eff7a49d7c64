#include "pop/vit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pop/adam.hpp"
#include "pop/hash.hpp"
#include "pop/ops.hpp"
#include "pop/random.hpp"

namespace pop::vit {
namespace {

template <typename T>
Tensor<T> normal_tensor(Rng& rng, Shape shape, double std) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = truncated_normal<T>(rng, std);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

std::size_t header_size(const Container& c, const char* key) {
  auto it = c.header.find(key);
  if (it == c.header.end()) throw DataError(std::string("checkpoint lacks header field ") + key);
  return std::stoull(it->second);
}

int label_index(std::span<const int> classes, int class_id) {
  const auto it = std::lower_bound(classes.begin(), classes.end(), class_id);
  if (it == classes.end() || *it != class_id) throw InvalidArgument("class " + std::to_string(class_id) + " not labeled");
  return static_cast<int>(it - classes.begin());
}

}  // namespace

void BackboneConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw InvalidArgument("backbone: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                          std::to_string(patch_size));
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    throw InvalidArgument("backbone: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                          std::to_string(heads));
  }
  if (depth == 0 || channels == 0 || mlp_ratio == 0) throw InvalidArgument("backbone: zero depth/channels/mlp_ratio");
}

void BackboneConfig::write_header(Container& c) const {
  c.header["backbone.image_size"] = std::to_string(image_size);
  c.header["backbone.patch_size"] = std::to_string(patch_size);
  c.header["backbone.channels"] = std::to_string(channels);
  c.header["backbone.embed_dim"] = std::to_string(embed_dim);
  c.header["backbone.depth"] = std::to_string(depth);
  c.header["backbone.heads"] = std::to_string(heads);
  c.header["backbone.mlp_ratio"] = std::to_string(mlp_ratio);
}

BackboneConfig BackboneConfig::read_header(const Container& c) {
  BackboneConfig cfg;
  cfg.image_size = header_size(c, "backbone.image_size");
  cfg.patch_size = header_size(c, "backbone.patch_size");
  cfg.channels = header_size(c, "backbone.channels");
  cfg.embed_dim = header_size(c, "backbone.embed_dim");
  cfg.depth = header_size(c, "backbone.depth");
  cfg.heads = header_size(c, "backbone.heads");
  cfg.mlp_ratio = header_size(c, "backbone.mlp_ratio");
  cfg.validate();
  return cfg;
}

template <typename T>
bool EncodeOutput<T>::has_task(int i) const {
  return std::find(task_ids.begin(), task_ids.end(), i) != task_ids.end();
}

template <typename T>
const Tensor<T>& EncodeOutput<T>::task_output(int i) const {
  const auto it = std::find(task_ids.begin(), task_ids.end(), i);
  if (it == task_ids.end()) throw InvalidArgument("encode output has no segment for task " + std::to_string(i));
  return task_outputs[static_cast<std::size_t>(it - task_ids.begin())];
}

template <typename T>
std::size_t EncodeOutput<T>::task_count(int i) const {
  const auto it = std::find(task_ids.begin(), task_ids.end(), i);
  if (it == task_ids.end()) throw InvalidArgument("encode output has no segment for task " + std::to_string(i));
  return task_counts[static_cast<std::size_t>(it - task_ids.begin())];
}

template <typename T>
Backbone<T> Backbone<T>::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, stream::kBackboneInit));
  const std::size_t d = cfg.embed_dim, hid = cfg.mlp_dim();
  Backbone b;
  b.cfg_ = cfg;
  b.patch_w = normal_tensor<T>(rng, {cfg.patch_dim(), d}, 0.02);
  b.patch_b = Tensor<T>::zeros({d});
  b.cls_token = normal_tensor<T>(rng, {1, d}, 0.02);
  b.pos_embed = normal_tensor<T>(rng, {cfg.num_patches() + 1, d}, 0.02);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    BlockWeights<T> w;
    w.ln1_gamma = Tensor<T>::full({d}, T(1));
    w.ln1_beta = Tensor<T>::zeros({d});
    w.qkv_w = normal_tensor<T>(rng, {d, 3 * d}, 0.02);
    w.qkv_b = Tensor<T>::zeros({3 * d});
    w.proj_w = normal_tensor<T>(rng, {d, d}, 0.02);
    w.proj_b = Tensor<T>::zeros({d});
    w.ln2_gamma = Tensor<T>::full({d}, T(1));
    w.ln2_beta = Tensor<T>::zeros({d});
    w.fc1_w = normal_tensor<T>(rng, {d, hid}, 0.02);
    w.fc1_b = Tensor<T>::zeros({hid});
    w.fc2_w = normal_tensor<T>(rng, {hid, d}, 0.02);
    w.fc2_b = Tensor<T>::zeros({d});
    b.blocks.push_back(std::move(w));
  }
  b.norm_gamma = Tensor<T>::full({d}, T(1));
  b.norm_beta = Tensor<T>::zeros({d});
  for (auto& [name, p] : b.named_parameters()) p.set_requires_grad(true);
  return b;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Backbone<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out{
      {"backbone/patch/w", patch_w}, {"backbone/patch/b", patch_b}, {"backbone/cls", cls_token},
      {"backbone/pos", pos_embed}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& w = blocks[l];
    const std::string p = "backbone/block/" + std::to_string(l) + "/";
    out.insert(out.end(), {{p + "ln1/gamma", w.ln1_gamma},
                           {p + "ln1/beta", w.ln1_beta},
                           {p + "attn/qkv/w", w.qkv_w},
                           {p + "attn/qkv/b", w.qkv_b},
                           {p + "attn/proj/w", w.proj_w},
                           {p + "attn/proj/b", w.proj_b},
                           {p + "ln2/gamma", w.ln2_gamma},
                           {p + "ln2/beta", w.ln2_beta},
                           {p + "mlp/fc1/w", w.fc1_w},
                           {p + "mlp/fc1/b", w.fc1_b},
                           {p + "mlp/fc2/w", w.fc2_w},
                           {p + "mlp/fc2/b", w.fc2_b}});
  }
  out.emplace_back("backbone/norm/gamma", norm_gamma);
  out.emplace_back("backbone/norm/beta", norm_beta);
  return out;
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

template <typename T>
void Backbone<T>::freeze() {
  for (auto& [name, p] : named_parameters()) p.set_requires_grad(false);
}

template <typename T>
bool Backbone<T>::frozen() const {
  const auto params = parameters();
  return std::none_of(params.begin(), params.end(), [](const Tensor<T>& p) { return p.requires_grad(); });
}

template <typename T>
std::string Backbone<T>::weights_sha256() const {
  std::string bytes;
  for (const auto& [name, p] : named_parameters()) bytes += name + tensor_bytes(p);
  return sha256_hex(bytes);
}

template <typename T>
void Backbone<T>::save(Container& c) const {
  cfg_.write_header(c);
  for (const auto& [name, p] : named_parameters()) c.put(name, p);
}

template <typename T>
Backbone<T> Backbone<T>::load(const Container& c) {
  const auto cfg = BackboneConfig::read_header(c);
  auto b = init(cfg, 0);
  auto assign = [&](const std::string& name, Tensor<T>& slot) {
    auto t = c.get<T>(name);
    if (t.shape() != slot.shape()) {
      throw DataError("checkpoint entry '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(slot.shape()));
    }
    slot = t;
  };
  assign("backbone/patch/w", b.patch_w);
  assign("backbone/patch/b", b.patch_b);
  assign("backbone/cls", b.cls_token);
  assign("backbone/pos", b.pos_embed);
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    auto& w = b.blocks[l];
    const std::string p = "backbone/block/" + std::to_string(l) + "/";
    assign(p + "ln1/gamma", w.ln1_gamma);
    assign(p + "ln1/beta", w.ln1_beta);
    assign(p + "attn/qkv/w", w.qkv_w);
    assign(p + "attn/qkv/b", w.qkv_b);
    assign(p + "attn/proj/w", w.proj_w);
    assign(p + "attn/proj/b", w.proj_b);
    assign(p + "ln2/gamma", w.ln2_gamma);
    assign(p + "ln2/beta", w.ln2_beta);
    assign(p + "mlp/fc1/w", w.fc1_w);
    assign(p + "mlp/fc1/b", w.fc1_b);
    assign(p + "mlp/fc2/w", w.fc2_w);
    assign(p + "mlp/fc2/b", w.fc2_b);
  }
  assign("backbone/norm/gamma", b.norm_gamma);
  assign("backbone/norm/beta", b.norm_beta);
  b.freeze();
  return b;
}

template <typename T>
Tensor<T> Backbone<T>::patch_embed(Tape<T>& tape, const Tensor<T>& patches) const {
  if (patches.dim() != 2 || patches.cols() != cfg_.patch_dim() || patches.rows() % cfg_.num_patches() != 0) {
    throw DimensionError("patch_embed: patches " + shape_str(patches.shape()) + " do not match " +
                         std::to_string(cfg_.num_patches()) + " patches of width " +
                         std::to_string(cfg_.patch_dim()));
  }
  return ops::linear(tape, patches, patch_w, patch_b);
}

template <typename T>
Tensor<T> Backbone<T>::embed(Tape<T>& tape, const Tensor<T>& patches) const {
  const auto s = patch_embed(tape, patches);
  const std::size_t batch = patches.rows() / cfg_.num_patches();
  const std::array<ops::TokenSegment<T>, 2> segs{ops::TokenSegment<T>{cls_token, true},
                                                 ops::TokenSegment<T>{s, false}};
  const auto x = ops::assemble_tokens<T>(tape, batch, segs);
  return ops::add_blockwise(tape, x, pos_embed);
}

template <typename T>
Tensor<T> Backbone<T>::block_qkv(Tape<T>& tape, std::size_t block, const Tensor<T>& x) const {
  const auto& w = blocks.at(block);
  const auto h = ops::layer_norm(tape, x, w.ln1_gamma, w.ln1_beta);
  return ops::linear(tape, h, w.qkv_w, w.qkv_b);
}

template <typename T>
Tensor<T> Backbone<T>::block_forward(Tape<T>& tape, std::size_t block, const Tensor<T>& x, std::size_t batch,
                                     std::size_t tokens) const {
  const auto& w = blocks.at(block);
  const auto qkv = block_qkv(tape, block, x);
  const auto att = ops::self_attention(tape, qkv, batch, tokens, cfg_.heads);
  const auto x1 = ops::add(tape, x, ops::linear(tape, att, w.proj_w, w.proj_b));
  const auto h2 = ops::layer_norm(tape, x1, w.ln2_gamma, w.ln2_beta);
  const auto mlp = ops::linear(tape, ops::gelu(tape, ops::linear(tape, h2, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
  return ops::add(tape, x1, mlp);
}

template <typename T>
Tensor<T> Backbone<T>::final_norm(Tape<T>& tape, const Tensor<T>& x) const {
  return ops::layer_norm(tape, x, norm_gamma, norm_beta);
}

template <typename T>
Tensor<T> Backbone<T>::forward_plain(Tape<T>& tape, const Tensor<T>& patches) const {
  const std::size_t batch = patches.rows() / cfg_.num_patches();
  const std::size_t tokens = cfg_.num_patches() + 1;
  auto x = embed(tape, patches);
  for (std::size_t l = 0; l < blocks.size(); ++l) x = block_forward(tape, l, x, batch, tokens);
  return final_norm(tape, x);
}

template <typename T>
EncodeOutput<T> Backbone<T>::encode(Tape<T>& tape, const Tensor<T>& patches, const PromptStore<T>& prompts,
                                    const EncodeSelection& selection,
                                    std::vector<Tensor<T>>* block_inputs) const {
  if (prompts.embed_dim() != cfg_.embed_dim) {
    throw DimensionError("encode: prompt width " + std::to_string(prompts.embed_dim()) + " != embed_dim " +
                         std::to_string(cfg_.embed_dim));
  }
  if (prompts.mode() == PromptMode::DPT && prompts.depth() != cfg_.depth) {
    throw DimensionError("encode: deep prompts cover " + std::to_string(prompts.depth()) + " blocks, backbone has " +
                         std::to_string(cfg_.depth));
  }
  const std::size_t n = cfg_.num_patches();
  const std::size_t batch = patches.rows() / n;
  const std::size_t base_tokens = n + 1;

  // Ordered prompt sets: POP first, then tasks in increasing index.
  struct Set {
    const Tensor<T>* values;
    std::size_t count;
    int task;  // 0 for POP
  };
  std::vector<Set> sets;
  if (selection.include_pop && prompts.has_pop()) sets.push_back({&prompts.pop(), prompts.pop_tokens(), 0});
  std::vector<int> wanted = selection.tasks;
  if (selection.all_tasks) {
    wanted.clear();
    for (int i = 1; i <= prompts.current_task(); ++i) wanted.push_back(i);
  }
  for (int i : wanted) {
    const std::size_t m = prompts.task_tokens(i);
    if (m > 0) sets.push_back({&prompts.task(i), m, i});
  }
  for (const auto& s : sets) {
    if (s.values->rows() != prompts.layers() * s.count) {
      throw DimensionError("encode: prompt set for " + (s.task ? "task " + std::to_string(s.task) : std::string("POP")) +
                           " holds " + std::to_string(s.values->rows()) + " rows, expected " +
                           std::to_string(prompts.layers() * s.count) + " (one array per block)");
    }
  }
  std::size_t prompt_tokens = 0;
  for (const auto& s : sets) prompt_tokens += s.count;
  const std::size_t tokens = base_tokens + prompt_tokens;

  auto layer_rows = [&](const Set& s, std::size_t layer) -> Tensor<T> {
    if (prompts.layers() == 1) return *s.values;
    return ops::take_tokens(tape, *s.values, 1, s.values->rows(), layer * s.count, s.count);
  };
  auto with_prompts = [&](const Tensor<T>& base, std::size_t layer) {
    std::vector<ops::TokenSegment<T>> segs{{base, false}};
    for (const auto& s : sets) segs.push_back({layer_rows(s, layer), true});
    return ops::assemble_tokens<T>(tape, batch, segs);
  };

  auto x = with_prompts(embed(tape, patches), 0);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    if (l > 0 && prompts.mode() == PromptMode::DPT && !sets.empty()) {
      x = with_prompts(ops::take_tokens(tape, x, batch, tokens, 0, base_tokens), l);
    }
    if (block_inputs) block_inputs->push_back(x);
    x = block_forward(tape, l, x, batch, tokens);
  }
  x = final_norm(tape, x);

  EncodeOutput<T> out;
  out.batch = batch;
  out.tokens_per_sample = tokens;
  out.tokens = x;
  out.cls = ops::take_tokens(tape, x, batch, tokens, 0, 1);
  out.patches = ops::take_tokens(tape, x, batch, tokens, 1, n);
  std::size_t offset = base_tokens;
  for (const auto& s : sets) {
    auto seg = ops::take_tokens(tape, x, batch, tokens, offset, s.count);
    offset += s.count;
    if (s.task == 0) {
      out.pop = seg;
      out.pop_tokens = s.count;
    } else {
      out.task_ids.push_back(s.task);
      out.task_counts.push_back(s.count);
      out.task_outputs.push_back(seg);
    }
  }
  return out;
}

template <typename T>
Tensor<T> patchify(std::span<const data::LabeledImage* const> images, const BackboneConfig& cfg) {
  const std::size_t p = cfg.patch_size, s = cfg.image_size, c = cfg.channels;
  const std::size_t grid = s / p, n = cfg.num_patches(), pd = cfg.patch_dim();
  std::vector<T> out(images.size() * n * pd);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& px = images[b]->pixels;
    if (px.size() != c * s * s) {
      throw DimensionError("patchify: image has " + std::to_string(px.size()) + " values, expected " +
                           std::to_string(c * s * s) + " (" + std::to_string(c) + "x" + std::to_string(s) + "x" +
                           std::to_string(s) + ")");
    }
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = out.data() + ((b * n) + gy * grid + gx) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              *dst++ = static_cast<T>(px[(ch * s + gy * p + y) * s + gx * p + x]);
      }
    }
  }
  return Tensor<T>::from({images.size() * n, pd}, std::move(out));
}

template <typename T>
double class_token_accuracy(const Backbone<T>& backbone, const data::Dataset& ds, const Tensor<T>& head_w,
                            const Tensor<T>& head_b, std::span<const int> label_of_class) {
  if (ds.samples.empty()) throw InvalidArgument("class_token_accuracy: empty dataset");
  std::size_t correct = 0;
  const std::size_t chunk = 128;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    std::vector<const data::LabeledImage*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&ds.samples[i]);
    Tape<T> tape(false);
    const auto toks = backbone.forward_plain(tape, patchify<T>(batch, backbone.config()));
    const auto cls = ops::take_tokens(tape, toks, batch.size(), backbone.config().num_patches() + 1, 0, 1);
    const auto logits = ops::linear(tape, cls, head_w, head_b);
    const std::size_t k = logits.cols();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = logits.data().subspan(i * k, k);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == label_index(label_of_class, batch[i]->class_id)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

template <typename T>
PretrainResult<T> pretrain_backbone(const data::Dataset& train, const data::Dataset* heldout,
                                    const BackboneConfig& cfg, const PretrainSchedule& schedule, std::uint64_t seed,
                                    std::span<const int> cl_classes,
                                    const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  const auto classes = train.class_ids();
  for (int c : cl_classes) {
    if (std::binary_search(classes.begin(), classes.end(), c)) {
      throw InvalidArgument("pretrain: class " + std::to_string(c) + " belongs to the continual-learning split");
    }
  }
  if (schedule.batch_size == 0) throw InvalidArgument("pretrain: batch_size must be positive");
  auto backbone = Backbone<T>::init(cfg, seed);
  PretrainResult<T> result{backbone, 0.0, std::numeric_limits<double>::quiet_NaN()};
  if (schedule.epochs == 0 || train.samples.empty()) {
    result.backbone.freeze();
    return result;
  }
  Rng head_rng(derive_seed(seed, stream::kHeadInit));
  auto head_w = normal_tensor<T>(head_rng, {cfg.embed_dim, classes.size()}, 0.02);
  auto head_b = Tensor<T>::zeros({classes.size()});
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);
  auto params = backbone.parameters();
  params.push_back(head_w);
  params.push_back(head_b);
  AdamConfig adam_cfg;
  adam_cfg.lr = schedule.lr;
  adam_cfg.weight_decay = schedule.weight_decay;
  auto adam = AdamState<T>::create(params, adam_cfg);

  std::vector<std::size_t> order(train.size());
  const std::size_t tokens = cfg.num_patches() + 1;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    // Cosine decay over the run.
    const double progress = static_cast<double>(epoch) / static_cast<double>(schedule.epochs);
    adam.config.lr = schedule.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, stream::kPretrainShuffle, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      std::vector<const data::LabeledImage*> batch;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train.samples[order[i]]);
        targets.push_back(label_index(classes, batch.back()->class_id));
      }
      Tape<T> tape;
      const auto toks = backbone.forward_plain(tape, patchify<T>(batch, cfg));
      const auto cls = ops::take_tokens(tape, toks, batch.size(), tokens, 0, 1);
      const auto loss = ops::cross_entropy(tape, ops::linear(tape, cls, head_w, head_b), targets);
      tape.backward(loss);
      adam_step(std::span<Tensor<T>>(params), adam);
      for (auto& p : params) p.zero_grad();
      loss_sum += static_cast<double>(loss.item());
      ++steps;
    }
    if (on_epoch) on_epoch(epoch, loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1)));
  }
  result.train_accuracy = class_token_accuracy(backbone, train, head_w, head_b, classes);
  if (heldout && !heldout->samples.empty()) {
    result.heldout_accuracy = class_token_accuracy(backbone, *heldout, head_w, head_b, classes);
  }
  backbone.freeze();
  result.backbone = backbone;
  return result;
}

template struct EncodeOutput<float>;
template struct EncodeOutput<double>;
template class Backbone<float>;
template class Backbone<double>;
template Tensor<float> patchify(std::span<const data::LabeledImage* const>, const BackboneConfig&);
template Tensor<double> patchify(std::span<const data::LabeledImage* const>, const BackboneConfig&);
template PretrainResult<float> pretrain_backbone(const data::Dataset&, const data::Dataset*, const BackboneConfig&,
                                                 const PretrainSchedule&, std::uint64_t, std::span<const int>,
                                                 const std::function<void(std::size_t, double)>&);
template PretrainResult<double> pretrain_backbone(const data::Dataset&, const data::Dataset*, const BackboneConfig&,
                                                  const PretrainSchedule&, std::uint64_t, std::span<const int>,
                                                  const std::function<void(std::size_t, double)>&);
template double class_token_accuracy(const Backbone<float>&, const data::Dataset&, const Tensor<float>&,
                                     const Tensor<float>&, std::span<const int>);
template double class_token_accuracy(const Backbone<double>&, const data::Dataset&, const Tensor<double>&,
                                     const Tensor<double>&, std::span<const int>);

}  // namespace pop::vit
