#pragma once

#include <random>
#include <span>
#include <vector>

#include "pop/data.hpp"
#include "pop/random.hpp"
#include "pop/tensor.hpp"
#include "pop/vit.hpp"

namespace pop::testing {

// Small grating benchmark: 8x8 single-channel images.
inline data::DatasetSpec tiny_spec(std::size_t cl_classes = 8, std::size_t train_per_class = 6,
                                   std::size_t test_per_class = 4, std::uint64_t seed = 3) {
  data::DatasetSpec s;
  s.image_size = 8;
  s.channels = 1;
  s.pretrain_classes = 4;
  s.cl_classes = cl_classes;
  s.train_per_class = train_per_class;
  s.test_per_class = test_per_class;
  s.orientations = 4;
  s.frequencies = 4;
  s.min_cycles = 1.0;
  s.max_cycles = 3.0;
  s.seed = seed;
  return s;
}

inline vit::BackboneConfig tiny_backbone(std::size_t depth = 2) {
  vit::BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 8;
  c.depth = depth;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

template <typename T>
vit::Backbone<T> frozen_backbone(const vit::BackboneConfig& cfg, std::uint64_t seed) {
  auto b = vit::Backbone<T>::init(cfg, seed);
  b.freeze();
  return b;
}

inline std::vector<const data::LabeledImage*> pointers(std::span<const data::LabeledImage> s) {
  std::vector<const data::LabeledImage*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
void fill_random(Tensor<T>& t, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& x : t.data()) x = static_cast<T>(dist(rng));
}

}  // namespace pop::testing
