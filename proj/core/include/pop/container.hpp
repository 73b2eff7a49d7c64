#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "pop/tensor.hpp"

namespace pop {

/// Versioned checkpoint file: magic "POPCKPT\0", format version, a string
/// key/value header, then named parameter blobs with dtype and shape.
/// All integers and floats are little-endian. Blobs keep insertion order.
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> header;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor);

  // Reads a blob as T; blobs stored in the other precision are converted.
  template <typename T>
  Tensor<T> get(const std::string& name, bool requires_grad = false) const;

  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  Shape shape_of(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

  // Serialized bytes of one blob (dtype tag, shape, data), for hashing.
  std::string blob_bytes(const std::string& name) const;

 private:
  struct Blob {
    std::string name;
    Shape shape;
    std::variant<std::vector<float>, std::vector<double>> values;
  };
  const Blob& find(const std::string& name) const;
  std::vector<Blob> blobs_;
};

/// Serialized bytes of a tensor (same encoding as a checkpoint blob body).
template <typename T>
std::string tensor_bytes(const Tensor<T>& tensor);

}  // namespace pop
