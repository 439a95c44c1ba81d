#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "densemapnet/model.hpp"

namespace dmn {

// Binary layout, all integers little-endian:
//   "DMNW" | version u16 | record count u32 |
//   records: name length u16, UTF-8 name, role u8, 4 x u32 dims, f32 payload |
//   CRC-32 (u32) of every preceding byte.
inline constexpr char kCheckpointMagic[4] = {'D', 'M', 'N', 'W'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind {
    io,
    bad_magic,
    unsupported_version,
    truncated,
    crc_mismatch,
    shape_mismatch,
    unknown_parameter,
    missing_parameter
  };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model);

/// Validates everything before touching the model; on error the model is
/// unchanged.
void deserialize_checkpoint(Model& model, const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
void load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace dmn
