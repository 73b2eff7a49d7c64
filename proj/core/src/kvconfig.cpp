#include "pop/kvconfig.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "pop/errors.hpp"

namespace pop {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::int64_t parse_int(std::string_view key, std::string_view v) {
  std::int64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw InvalidArgument("config key '" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw InvalidArgument("config key '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::string canonical(const KvKey& k, std::string_view raw) {
  const auto v = trim(raw);
  switch (k.type) {
    case KvType::Int:
      return std::to_string(parse_int(k.name, v));
    case KvType::Real:
      return format_real(parse_real(k.name, v));
    case KvType::Bool:
      if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
      if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
      throw InvalidArgument("config key '" + k.name + "' expects a boolean, got '" + std::string(v) + "'");
    case KvType::String:
      return std::string(v);
    case KvType::IntList: {
      std::string out;
      std::string_view rest = v;
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = trim(rest.substr(0, comma));
        if (!out.empty()) out += ',';
        out += std::to_string(parse_int(k.name, item));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
      }
      return out;
    }
  }
  return std::string(v);
}

}  // namespace

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw InvariantError("format_real failed");
  return std::string(buf, ptr);
}

KvConfig::KvConfig(std::vector<KvKey> schema) : schema_(std::move(schema)) {
  for (const auto& k : schema_) values_[k.name] = canonical(k, k.default_value);
}

const KvKey& KvConfig::key_info(std::string_view key) const {
  auto it = std::find_if(schema_.begin(), schema_.end(), [&](const KvKey& k) { return k.name == key; });
  if (it == schema_.end()) throw InvalidArgument("unknown config key '" + std::string(key) + "'");
  return *it;
}

const std::string& KvConfig::raw(std::string_view key) const {
  key_info(key);
  return values_.find(key)->second;
}

bool KvConfig::has_key(std::string_view key) const {
  return std::any_of(schema_.begin(), schema_.end(), [&](const KvKey& k) { return k.name == key; });
}

void KvConfig::set(std::string_view key, std::string_view value) {
  const auto& k = key_info(key);
  values_[k.name] = canonical(k, value);
}

void KvConfig::merge_text(std::string_view text, std::string_view origin) {
  for (const auto& [k, v] : parse_kv_text(text, origin)) set(k, v);
}

void KvConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  merge_text(ss.str(), path.string());
}

std::int64_t KvConfig::get_int(std::string_view key) const { return parse_int(key, raw(key)); }
double KvConfig::get_real(std::string_view key) const { return parse_real(key, raw(key)); }
bool KvConfig::get_bool(std::string_view key) const { return raw(key) == "true"; }
std::string KvConfig::get_string(std::string_view key) const { return raw(key); }

std::vector<std::int64_t> KvConfig::get_int_list(std::string_view key) const {
  std::vector<std::int64_t> out;
  std::string_view rest = raw(key);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    out.push_back(parse_int(key, rest.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

std::string KvConfig::to_text() const {
  std::string out;
  for (const auto& k : schema_) out += k.name + " = " + values_.find(k.name)->second + "\n";
  return out;
}

std::map<std::string, std::string> parse_kv_text(std::string_view text, std::string_view origin) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    auto line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidArgument(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw InvalidArgument(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    out[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace pop
