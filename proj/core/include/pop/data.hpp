#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pop/kvconfig.hpp"

namespace pop::data {

struct ImageDims {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t pixels() const { return channels * height * width; }
  bool operator==(const ImageDims&) const = default;
};

/// Pixel grid in CHW order with values in [0, 1], plus labels.
struct LabeledImage {
  std::vector<float> pixels;
  int class_id = 0;
  int task_id = 0;    // 0 until assigned to a continual-learning task
  int sample_id = 0;  // position within its split in canonical order
};

struct Dataset {
  ImageDims dims;
  std::vector<LabeledImage> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<int> class_ids() const;  // sorted, unique
  std::size_t count_class(int class_id) const;
};

/// Oriented-grating benchmark description. Class `i` of the pretrain pool has
/// global id i; class `j` of the continual pool has id pretrain_classes + j.
struct DatasetSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t pretrain_classes = 20;
  std::size_t cl_classes = 20;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t orientations = 8;  // grid of class base parameters:
  std::size_t frequencies = 6;   // orientations x frequencies cells
  double min_cycles = 2.0;       // grating cycles across the image
  double max_cycles = 8.0;
  double noise_sigma = 0.05;
  double orientation_jitter = 0.06;  // radians, std
  double frequency_jitter = 0.04;    // relative, std
  double phase_jitter = 1.0;         // fraction of a full period, uniform width
  std::uint64_t seed = 1;

  static KvConfig schema();
  static DatasetSpec from_config(const KvConfig& cfg);
  KvConfig to_config() const;
  void validate() const;
  ImageDims dims() const { return {channels, image_size, image_size}; }
};

struct GeneratedData {
  Dataset pretrain_train, pretrain_test;
  Dataset cl_train, cl_test;
};

/// Deterministic function of `spec`; classes are generated from per-class
/// derived seeds and emitted class-major, sample-minor.
GeneratedData generate(const DatasetSpec& spec);

struct TaskSpec {
  int task = 0;  // 1-based
  std::vector<int> classes;
  Dataset train;
  Dataset test;
};

/// Contiguous class-id blocks of equal size, ordered by class id. Samples get
/// their task id stamped.
std::vector<TaskSpec> split_tasks(const Dataset& cl_train, const Dataset& cl_test, std::size_t num_tasks);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// One line per task: "task <id>: <class ids...>".
std::string task_manifest(std::span<const TaskSpec> tasks);

// Canonical file names inside a dataset directory.
inline constexpr const char* kPretrainTrainFile = "pretrain_train.bin";
inline constexpr const char* kPretrainTestFile = "pretrain_test.bin";
inline constexpr const char* kClTrainFile = "cl_train.bin";
inline constexpr const char* kClTestFile = "cl_test.bin";
inline constexpr const char* kSpecFile = "dataset.spec";

void save_generated(const std::filesystem::path& dir, const DatasetSpec& spec, const GeneratedData& data);
GeneratedData load_generated(const std::filesystem::path& dir);

}  // namespace pop::data
