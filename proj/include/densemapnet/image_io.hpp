#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dmn {

/// Decoded raster with interleaved samples. 8-bit images store values in
/// [0,255], 16-bit ones in [0,65535].
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

/// PNG (gray, gray+alpha, RGB, RGBA, palette; 8 or 16 bit) or binary
/// PGM/PPM. Alpha is dropped.
RawImage read_image(const std::filesystem::path& path);

void write_png8(const std::filesystem::path& path, int width, int height, int channels,
                const std::vector<std::uint8_t>& samples);
void write_png16(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint16_t>& samples);

}  // namespace dmn
