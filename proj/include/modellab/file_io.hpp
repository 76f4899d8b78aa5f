#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mlab {

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Append-only JSON-lines sink. Each record is flushed as it is written.
class JsonlWriter {
 public:
  explicit JsonlWriter(std::filesystem::path path) : path_(std::move(path)) {}
  void append(std::string_view line) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mlab
