#include "pop/hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <memory>

#include "pop/errors.hpp"

namespace pop {
namespace {

std::string digest_hex(const EVP_MD* md, std::string_view prefix, std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), md, nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), prefix.data(), prefix.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), out.data(), &len) != 1) {
    throw InvariantError("digest computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[out[i] >> 4]);
    hex.push_back(kHex[out[i] & 0xF]);
  }
  return hex;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) { return digest_hex(EVP_sha256(), {}, bytes); }

std::string git_blob_hash(std::string_view content) {
  std::string prefix = "blob " + std::to_string(content.size());
  prefix.push_back('\0');
  return digest_hex(EVP_sha1(), prefix, content);
}

}  // namespace pop
