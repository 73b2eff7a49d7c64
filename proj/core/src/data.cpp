#include "pop/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "pop/binio.hpp"
#include "pop/errors.hpp"
#include "pop/random.hpp"

namespace pop::data {
namespace {

constexpr char kMagic[9] = "POPDATA";
constexpr std::uint32_t kVersion = 1;

struct ClassParams {
  double orientation;
  double cycles;
  double phase;
  double tint[3];
};

// Places `total` classes evenly over the grid and interleaves the two pools so
// that both span the whole parameter range.
std::vector<std::size_t> class_cells(const DatasetSpec& spec) {
  const std::size_t total = spec.pretrain_classes + spec.cl_classes;
  const std::size_t capacity = spec.orientations * spec.frequencies;
  std::vector<std::size_t> spread(total);
  for (std::size_t k = 0; k < total; ++k) spread[k] = k * capacity / total;
  // Slot k goes to the pretrain pool while that pool is behind its proportional share.
  std::vector<std::size_t> cells(total);
  std::size_t pre = 0, cl = 0;
  for (std::size_t k = 0; k < total; ++k) {
    const std::size_t share = (2 * (k + 1) * spec.pretrain_classes + total) / (2 * total);
    const bool take_pre = pre < spec.pretrain_classes && (cl >= spec.cl_classes || pre < share);
    if (take_pre) {
      cells[pre++] = spread[k];
    } else {
      cells[spec.pretrain_classes + cl++] = spread[k];
    }
  }
  return cells;
}

ClassParams class_params(const DatasetSpec& spec, std::size_t global_class, std::size_t cell) {
  Rng rng(derive_seed(spec.seed, stream::kDataClass, global_class));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t o = cell % spec.orientations;
  const std::size_t f = cell / spec.orientations;
  ClassParams p{};
  p.orientation = std::numbers::pi * static_cast<double>(o) / static_cast<double>(spec.orientations);
  const double ratio = spec.frequencies > 1 ? static_cast<double>(f) / static_cast<double>(spec.frequencies - 1) : 0.0;
  p.cycles = spec.min_cycles * std::pow(spec.max_cycles / spec.min_cycles, ratio);
  p.phase = 2.0 * std::numbers::pi * unit(rng);
  for (double& t : p.tint) t = 0.35 + 0.65 * unit(rng);
  return p;
}

LabeledImage render(const DatasetSpec& spec, const ClassParams& cp, Rng& rng, int class_id) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> centered(-0.5, 0.5);
  const double theta = cp.orientation + spec.orientation_jitter * gauss(rng);
  const double cycles = cp.cycles * (1.0 + spec.frequency_jitter * gauss(rng));
  const double phase = cp.phase + spec.phase_jitter * 2.0 * std::numbers::pi * centered(rng);
  const std::size_t s = spec.image_size;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double k = 2.0 * std::numbers::pi * cycles / static_cast<double>(s);
  LabeledImage img;
  img.class_id = class_id;
  img.pixels.resize(spec.channels * s * s);
  for (std::size_t ch = 0; ch < spec.channels; ++ch) {
    const double tint = cp.tint[ch % 3];
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double wave = 0.5 + 0.5 * std::sin(k * (static_cast<double>(x) * c + static_cast<double>(y) * sn) + phase);
        double v = tint * wave;
        if (spec.noise_sigma > 0) v += spec.noise_sigma * gauss(rng);
        img.pixels[(ch * s + y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

void renumber(Dataset& ds) {
  for (std::size_t i = 0; i < ds.samples.size(); ++i) ds.samples[i].sample_id = static_cast<int>(i);
}

}  // namespace

std::vector<int> Dataset::class_ids() const {
  std::set<int> ids;
  for (const auto& s : samples) ids.insert(s.class_id);
  return {ids.begin(), ids.end()};
}

std::size_t Dataset::count_class(int class_id) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const LabeledImage& s) { return s.class_id == class_id; }));
}

KvConfig DatasetSpec::schema() {
  const DatasetSpec d;
  return KvConfig({
      {"image_size", KvType::Int, std::to_string(d.image_size), "square image side in pixels"},
      {"channels", KvType::Int, std::to_string(d.channels), "color channels"},
      {"pretrain_classes", KvType::Int, std::to_string(d.pretrain_classes), "classes in the pretraining pool"},
      {"cl_classes", KvType::Int, std::to_string(d.cl_classes), "classes in the continual pool"},
      {"train_per_class", KvType::Int, std::to_string(d.train_per_class), "training samples per class"},
      {"test_per_class", KvType::Int, std::to_string(d.test_per_class), "test samples per class"},
      {"orientations", KvType::Int, std::to_string(d.orientations), "orientation levels of the class grid"},
      {"frequencies", KvType::Int, std::to_string(d.frequencies), "frequency levels of the class grid"},
      {"min_cycles", KvType::Real, format_real(d.min_cycles), "lowest grating frequency (cycles per image)"},
      {"max_cycles", KvType::Real, format_real(d.max_cycles), "highest grating frequency (cycles per image)"},
      {"noise_sigma", KvType::Real, format_real(d.noise_sigma), "additive Gaussian pixel noise"},
      {"orientation_jitter", KvType::Real, format_real(d.orientation_jitter), "per-sample orientation std"},
      {"frequency_jitter", KvType::Real, format_real(d.frequency_jitter), "per-sample relative frequency std"},
      {"phase_jitter", KvType::Real, format_real(d.phase_jitter), "per-sample phase jitter (periods)"},
      {"seed", KvType::Int, std::to_string(d.seed), "generator seed"},
  });
}

DatasetSpec DatasetSpec::from_config(const KvConfig& cfg) {
  auto count = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0) throw InvalidArgument(std::string("dataset spec: ") + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  DatasetSpec s;
  s.image_size = count("image_size");
  s.channels = count("channels");
  s.pretrain_classes = count("pretrain_classes");
  s.cl_classes = count("cl_classes");
  s.train_per_class = count("train_per_class");
  s.test_per_class = count("test_per_class");
  s.orientations = count("orientations");
  s.frequencies = count("frequencies");
  s.min_cycles = cfg.get_real("min_cycles");
  s.max_cycles = cfg.get_real("max_cycles");
  s.noise_sigma = cfg.get_real("noise_sigma");
  s.orientation_jitter = cfg.get_real("orientation_jitter");
  s.frequency_jitter = cfg.get_real("frequency_jitter");
  s.phase_jitter = cfg.get_real("phase_jitter");
  s.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  s.validate();
  return s;
}

KvConfig DatasetSpec::to_config() const {
  auto cfg = schema();
  cfg.set("image_size", std::to_string(image_size));
  cfg.set("channels", std::to_string(channels));
  cfg.set("pretrain_classes", std::to_string(pretrain_classes));
  cfg.set("cl_classes", std::to_string(cl_classes));
  cfg.set("train_per_class", std::to_string(train_per_class));
  cfg.set("test_per_class", std::to_string(test_per_class));
  cfg.set("orientations", std::to_string(orientations));
  cfg.set("frequencies", std::to_string(frequencies));
  cfg.set("min_cycles", format_real(min_cycles));
  cfg.set("max_cycles", format_real(max_cycles));
  cfg.set("noise_sigma", format_real(noise_sigma));
  cfg.set("orientation_jitter", format_real(orientation_jitter));
  cfg.set("frequency_jitter", format_real(frequency_jitter));
  cfg.set("phase_jitter", format_real(phase_jitter));
  cfg.set("seed", std::to_string(seed));
  return cfg;
}

void DatasetSpec::validate() const {
  if (image_size == 0 || channels == 0) throw InvalidArgument("dataset spec: empty image dimensions");
  if (cl_classes == 0) throw InvalidArgument("dataset spec: need at least one continual class");
  if (orientations == 0 || frequencies == 0) throw InvalidArgument("dataset spec: empty parameter grid");
  if (pretrain_classes + cl_classes > orientations * frequencies) {
    throw InvalidArgument("dataset spec: " + std::to_string(pretrain_classes + cl_classes) +
                          " classes overflow the " + std::to_string(orientations) + "x" +
                          std::to_string(frequencies) + " parameter grid");
  }
  if (!(min_cycles > 0) || !(max_cycles >= min_cycles)) throw InvalidArgument("dataset spec: bad cycle range");
  if (noise_sigma < 0 || orientation_jitter < 0 || frequency_jitter < 0 || phase_jitter < 0) {
    throw InvalidArgument("dataset spec: noise and jitter must be non-negative");
  }
}

GeneratedData generate(const DatasetSpec& spec) {
  spec.validate();
  const auto cells = class_cells(spec);
  GeneratedData out;
  for (Dataset* ds : {&out.pretrain_train, &out.pretrain_test, &out.cl_train, &out.cl_test}) ds->dims = spec.dims();
  const std::size_t total = spec.pretrain_classes + spec.cl_classes;
  for (std::size_t g = 0; g < total; ++g) {
    const ClassParams cp = class_params(spec, g, cells[g]);
    const bool pre = g < spec.pretrain_classes;
    Rng train_rng(derive_seed(spec.seed, stream::kDataClass, 2 * total + 2 * g));
    Rng test_rng(derive_seed(spec.seed, stream::kDataClass, 2 * total + 2 * g + 1));
    auto& train = pre ? out.pretrain_train : out.cl_train;
    auto& test = pre ? out.pretrain_test : out.cl_test;
    for (std::size_t i = 0; i < spec.train_per_class; ++i)
      train.samples.push_back(render(spec, cp, train_rng, static_cast<int>(g)));
    for (std::size_t i = 0; i < spec.test_per_class; ++i)
      test.samples.push_back(render(spec, cp, test_rng, static_cast<int>(g)));
  }
  for (Dataset* ds : {&out.pretrain_train, &out.pretrain_test, &out.cl_train, &out.cl_test}) renumber(*ds);
  return out;
}

std::vector<TaskSpec> split_tasks(const Dataset& cl_train, const Dataset& cl_test, std::size_t num_tasks) {
  const auto classes = cl_train.class_ids();
  if (num_tasks == 0 || classes.size() % num_tasks != 0) {
    throw InvalidArgument("split_tasks: " + std::to_string(classes.size()) + " classes are not divisible into " +
                          std::to_string(num_tasks) + " tasks");
  }
  const std::size_t per = classes.size() / num_tasks;
  std::vector<TaskSpec> tasks(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& spec = tasks[t];
    spec.task = static_cast<int>(t + 1);
    spec.classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(t * per),
                        classes.begin() + static_cast<std::ptrdiff_t>((t + 1) * per));
    spec.train.dims = cl_train.dims;
    spec.test.dims = cl_test.dims;
  }
  auto place = [&](const Dataset& src, bool train) {
    for (const auto& s : src.samples) {
      const auto it = std::lower_bound(classes.begin(), classes.end(), s.class_id);
      if (it == classes.end() || *it != s.class_id) {
        throw InvalidArgument("split_tasks: test class " + std::to_string(s.class_id) + " absent from training set");
      }
      const auto t = static_cast<std::size_t>(it - classes.begin()) / per;
      auto copy = s;
      copy.task_id = static_cast<int>(t + 1);
      (train ? tasks[t].train : tasks[t].test).samples.push_back(std::move(copy));
    }
  };
  place(cl_train, true);
  place(cl_test, false);
  return tasks;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write dataset " + path.string());
  binio::write_magic(os, kMagic);
  binio::write<std::uint32_t>(os, kVersion);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(ds.dims.channels));
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(ds.dims.height));
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(ds.dims.width));
  binio::write<std::uint64_t>(os, ds.samples.size());
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(ds.class_ids().size()));
  for (const auto& s : ds.samples) {
    if (s.pixels.size() != ds.dims.pixels()) throw InvalidArgument("save_dataset: sample has wrong pixel count");
    for (float v : s.pixels) binio::write<float>(os, v);
    binio::write<std::int32_t>(os, s.class_id);
    binio::write<std::int32_t>(os, s.task_id);
  }
  if (!os) throw DataError("failed writing dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path.string());
  binio::expect_magic(is, kMagic, path.string());
  const auto version = binio::read<std::uint32_t>(is);
  if (version != kVersion) throw DataError(path.string() + ": unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.dims.channels = binio::read<std::uint32_t>(is);
  ds.dims.height = binio::read<std::uint32_t>(is);
  ds.dims.width = binio::read<std::uint32_t>(is);
  const auto n = binio::read<std::uint64_t>(is);
  const auto nclasses = binio::read<std::uint32_t>(is);
  if (ds.dims.pixels() == 0 || ds.dims.pixels() > (1u << 24) || n > (1ull << 32)) {
    throw DataError(path.string() + ": implausible dataset header");
  }
  ds.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    s.pixels.resize(ds.dims.pixels());
    for (auto& v : s.pixels) {
      v = binio::read<float>(is);
      if (!std::isfinite(v)) throw DataError(path.string() + ": non-finite pixel in sample " + std::to_string(i));
    }
    s.class_id = binio::read<std::int32_t>(is);
    s.task_id = binio::read<std::int32_t>(is);
    s.sample_id = static_cast<int>(i);
  }
  if (ds.class_ids().size() != nclasses) throw DataError(path.string() + ": class count does not match header");
  return ds;
}

std::string task_manifest(std::span<const TaskSpec> tasks) {
  std::ostringstream os;
  for (const auto& t : tasks) {
    os << "task " << t.task << ':';
    for (int c : t.classes) os << ' ' << c;
    os << '\n';
  }
  return os.str();
}

void save_generated(const std::filesystem::path& dir, const DatasetSpec& spec, const GeneratedData& data) {
  std::filesystem::create_directories(dir);
  save_dataset(dir / kPretrainTrainFile, data.pretrain_train);
  save_dataset(dir / kPretrainTestFile, data.pretrain_test);
  save_dataset(dir / kClTrainFile, data.cl_train);
  save_dataset(dir / kClTestFile, data.cl_test);
  std::ofstream os(dir / kSpecFile, std::ios::trunc);
  if (!os) throw DataError("cannot write " + (dir / kSpecFile).string());
  os << spec.to_config().to_text();
}

GeneratedData load_generated(const std::filesystem::path& dir) {
  GeneratedData d;
  d.pretrain_train = load_dataset(dir / kPretrainTrainFile);
  d.pretrain_test = load_dataset(dir / kPretrainTestFile);
  d.cl_train = load_dataset(dir / kClTrainFile);
  d.cl_test = load_dataset(dir / kClTestFile);
  return d;
}

}  // namespace pop::data
