#include "pop/container.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "pop/binio.hpp"

namespace pop {
namespace {

constexpr char kMagic[9] = "POPCKPT";

template <typename V>
void write_body(std::ostream& os, const Shape& shape, const std::vector<V>& values) {
  binio::write<std::uint8_t>(os, std::is_same_v<V, float> ? 0 : 1);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) binio::write<std::uint64_t>(os, e);
  for (V v : values) binio::write<V>(os, v);
}

}  // namespace

template <typename T>
void Container::put(const std::string& name, const Tensor<T>& tensor) {
  Blob b{name, tensor.shape(), std::vector<T>(tensor.data().begin(), tensor.data().end())};
  auto it = std::find_if(blobs_.begin(), blobs_.end(), [&](const Blob& x) { return x.name == name; });
  if (it != blobs_.end()) {
    *it = std::move(b);
  } else {
    blobs_.push_back(std::move(b));
  }
}

const Container::Blob& Container::find(const std::string& name) const {
  auto it = std::find_if(blobs_.begin(), blobs_.end(), [&](const Blob& x) { return x.name == name; });
  if (it == blobs_.end()) throw DataError("checkpoint has no entry '" + name + "'");
  return *it;
}

template <typename T>
Tensor<T> Container::get(const std::string& name, bool requires_grad) const {
  const Blob& b = find(name);
  std::vector<T> values;
  std::visit([&](const auto& v) { values.assign(v.begin(), v.end()); }, b.values);
  return Tensor<T>::from(b.shape, std::move(values), requires_grad);
}

bool Container::has(const std::string& name) const {
  return std::any_of(blobs_.begin(), blobs_.end(), [&](const Blob& x) { return x.name == name; });
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  for (const auto& b : blobs_) out.push_back(b.name);
  return out;
}

Shape Container::shape_of(const std::string& name) const { return find(name).shape; }

void Container::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  binio::write_magic(os, kMagic);
  binio::write<std::uint32_t>(os, kVersion);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  for (const auto& [k, v] : header) {
    binio::write_string(os, k);
    binio::write_string(os, v);
  }
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(blobs_.size()));
  for (const auto& b : blobs_) {
    binio::write_string(os, b.name);
    std::visit([&](const auto& v) { write_body(os, b.shape, v); }, b.values);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  binio::expect_magic(is, kMagic, path.string());
  const auto version = binio::read<std::uint32_t>(is);
  if (version != kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Container c;
  const auto nheader = binio::read<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nheader; ++i) {
    auto k = binio::read_string(is);
    c.header[k] = binio::read_string(is);
  }
  const auto nblobs = binio::read<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nblobs; ++i) {
    Blob b;
    b.name = binio::read_string(is);
    const auto dtype = binio::read<std::uint8_t>(is);
    const auto rank = binio::read<std::uint32_t>(is);
    if (rank > 8) throw DataError(path.string() + ": blob '" + b.name + "' has implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(binio::read<std::uint64_t>(is));
    const std::size_t n = shape_numel(b.shape);
    if (dtype == 0) {
      std::vector<float> v(n);
      for (auto& x : v) x = binio::read<float>(is);
      b.values = std::move(v);
    } else if (dtype == 1) {
      std::vector<double> v(n);
      for (auto& x : v) x = binio::read<double>(is);
      b.values = std::move(v);
    } else {
      throw DataError(path.string() + ": blob '" + b.name + "' has unknown dtype");
    }
    c.blobs_.push_back(std::move(b));
  }
  return c;
}

std::string Container::blob_bytes(const std::string& name) const {
  const Blob& b = find(name);
  std::ostringstream os(std::ios::binary);
  std::visit([&](const auto& v) { write_body(os, b.shape, v); }, b.values);
  return os.str();
}

template <typename T>
std::string tensor_bytes(const Tensor<T>& tensor) {
  std::ostringstream os(std::ios::binary);
  write_body(os, tensor.shape(), std::vector<T>(tensor.data().begin(), tensor.data().end()));
  return os.str();
}

template void Container::put(const std::string&, const Tensor<float>&);
template void Container::put(const std::string&, const Tensor<double>&);
template Tensor<float> Container::get(const std::string&, bool) const;
template Tensor<double> Container::get(const std::string&, bool) const;
template std::string tensor_bytes(const Tensor<float>&);
template std::string tensor_bytes(const Tensor<double>&);

}  // namespace pop
