#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace pop {

enum class KvType { Int, Real, Bool, String, IntList };

struct KvKey {
  std::string name;
  KvType type;
  std::string default_value;
  std::string help;
};

/// Flat, typed `key = value` configuration with strict unknown-key rejection.
///
/// Lines starting with '#' and blank lines are ignored. Values are validated
/// against the key's type when set and stored in canonical form, so
/// `to_text()` of two equivalent configurations is byte-identical.
class KvConfig {
 public:
  explicit KvConfig(std::vector<KvKey> schema);

  void set(std::string_view key, std::string_view value);
  void merge_text(std::string_view text, std::string_view origin = "<text>");
  void merge_file(const std::filesystem::path& path);

  bool has_key(std::string_view key) const;

  std::int64_t get_int(std::string_view key) const;
  double get_real(std::string_view key) const;
  bool get_bool(std::string_view key) const;
  std::string get_string(std::string_view key) const;
  std::vector<std::int64_t> get_int_list(std::string_view key) const;

  std::string to_text() const;
  const std::vector<KvKey>& schema() const { return schema_; }

 private:
  const KvKey& key_info(std::string_view key) const;
  const std::string& raw(std::string_view key) const;

  std::vector<KvKey> schema_;
  std::map<std::string, std::string, std::less<>> values_;
};

/// Parses `key = value` lines without a schema (used for manifests).
std::map<std::string, std::string> parse_kv_text(std::string_view text, std::string_view origin = "<text>");

std::string format_real(double v);

}  // namespace pop
