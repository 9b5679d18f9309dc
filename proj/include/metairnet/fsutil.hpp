#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace metairnet {

/// Write `bytes` to a unique temporary sibling of `path`, then rename it into
/// place so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Unique sibling path for staging writes (per process, thread and call).
std::filesystem::path staging_path(const std::filesystem::path& target);

}  // namespace metairnet
