#pragma once

#include <string>
#include <string_view>

namespace pop {

std::string sha256_hex(std::string_view bytes);

// Git object id of `content` stored as a blob: sha1("blob <len>\0" + content).
std::string git_blob_hash(std::string_view content);

}  // namespace pop
