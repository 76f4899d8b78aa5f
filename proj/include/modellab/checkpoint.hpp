#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "modellab/errors.hpp"
#include "modellab/model.hpp"

namespace mlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raised for checkpoints written by an unknown format version.
class VersionError : public FormatError {
 public:
  VersionError(std::uint32_t expected, std::uint32_t found)
      : FormatError("unsupported checkpoint version: expected " + std::to_string(expected) + ", found " +
                    std::to_string(found)),
        expected_(expected),
        found_(found) {}
  std::uint32_t expected() const { return expected_; }
  std::uint32_t found() const { return found_; }

 private:
  std::uint32_t expected_, found_;
};

nlohmann::ordered_json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

/// Little-endian layout: "MLAB", u32 version, u32 length + JSON config,
/// u32 record count, then per tensor: u32 name length, name, u32 rank,
/// u64 extents, f32 payload.
std::string serialize_checkpoint(const MllmModel& model);
MllmModel deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const MllmModel& model, const std::filesystem::path& path);
MllmModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mlab
