#include "densemapnet/image_io.hpp"

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include <png.h>

#include "densemapnet/errors.hpp"

namespace dmn {
namespace {

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

RawImage read_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  RawImage img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(FormatError::Kind::truncated, "corrupt PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // host order for the u16 samples
  png_read_update_info(png, info);

  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * static_cast<std::size_t>(img.height));
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(count);
  if (img.bit_depth == 16) {
    for (int y = 0; y < img.height; ++y) {
      const auto* row = reinterpret_cast<const std::uint16_t*>(buffer.data() + rowbytes * y);
      for (int i = 0; i < img.width * img.channels; ++i) {
        img.samples[static_cast<std::size_t>(y) * img.width * img.channels + i] = row[i];
      }
    }
  } else {
    for (int y = 0; y < img.height; ++y) {
      const std::uint8_t* row = buffer.data() + rowbytes * y;
      for (int i = 0; i < img.width * img.channels; ++i) {
        img.samples[static_cast<std::size_t>(y) * img.width * img.channels + i] = row[i];
      }
    }
  }
  return img;
}

// Binary P5/P6; maxval > 255 means big-endian 16-bit samples.
RawImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  RawImage img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw FormatError(FormatError::Kind::bad_magic, "unsupported PNM type in " + path.string());
  }
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v <= 0) throw FormatError(FormatError::Kind::bad_header, "bad PNM header in " + path.string());
    return v;
  };
  img.width = static_cast<int>(next_int());
  img.height = static_cast<int>(next_int());
  const long maxval = next_int();
  in.get();
  img.bit_depth = maxval > 255 ? 16 : 8;
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  const std::size_t bytes = count * (img.bit_depth / 8);
  std::vector<std::uint8_t> raw(bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw FormatError(FormatError::Kind::truncated, "truncated PNM " + path.string());
  }
  img.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    img.samples[i] = img.bit_depth == 16
                         ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1])
                         : raw[i];
  }
  return img;
}

void write_png(const std::filesystem::path& path, int width, int height, int channels, int depth,
               const std::uint8_t* data) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string());
  }
  png_init_io(png, f.get());
  const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth,
               color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (depth == 16) png_set_swap(png);
  const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (depth / 8);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + rowbytes * y));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RawImage read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path.string());
  char sig[2] = {0, 0};
  probe.read(sig, 2);
  probe.close();
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return read_pnm(path);
  return read_png(path);
}

void write_png8(const std::filesystem::path& path, int width, int height, int channels,
                const std::vector<std::uint8_t>& samples) {
  if (samples.size() != static_cast<std::size_t>(width) * height * channels || (channels != 1 && channels != 3)) {
    throw ShapeError("write_png8: sample count does not match " + std::to_string(width) + "x" +
                     std::to_string(height) + "x" + std::to_string(channels));
  }
  write_png(path, width, height, channels, 8, samples.data());
}

void write_png16(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint16_t>& samples) {
  if (samples.size() != static_cast<std::size_t>(width) * height) {
    throw ShapeError("write_png16: sample count does not match image size");
  }
  write_png(path, width, height, 1, 16, reinterpret_cast<const std::uint8_t*>(samples.data()));
}

}  // namespace dmn
