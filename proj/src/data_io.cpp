#include "densemapnet/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "densemapnet/image_io.hpp"

namespace dmn {

void StereoSample::validate() const {
  const Shape s = left.shape();
  if (s.n != 1 || s.h < 1 || s.w < 1) throw ShapeError("sample images must be [1,H,W,C], got " + s.str());
  require_same_shape(right.shape(), s, "sample right image");
  const Shape map{1, s.h, s.w, 1};
  require_same_shape(disparity.shape(), map, "sample disparity");
  require_same_shape(valid_mask.shape(), map, "sample mask");
  for (std::int64_t i = 0; i < disparity.size(); ++i) {
    if (valid_mask.ptr()[i] == 0.0f) continue;
    const float d = disparity.ptr()[i];
    if (!(d >= 0.0f) || d > dmax) {
      throw ShapeError("valid disparity " + std::to_string(d) + " outside [0, " +
                       std::to_string(dmax) + "]");
    }
  }
}

double StereoSample::max_valid_disparity() const {
  double m = 0.0;
  for (std::int64_t i = 0; i < disparity.size(); ++i) {
    if (valid_mask.ptr()[i] != 0.0f) m = std::max(m, static_cast<double>(disparity.ptr()[i]));
  }
  return m;
}

// ---------------------------------------------------------------- PFM

Tensor<float> parse_pfm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  if (magic != "Pf") {
    throw FormatError(FormatError::Kind::bad_magic,
                      "PFM: expected single-channel 'Pf' header, got '" + magic.substr(0, 8) + "'");
  }
  long width = 0;
  long height = 0;
  double scale = 0.0;
  in >> width >> height >> scale;
  if (!in || width <= 0 || height <= 0 || width > (1L << 20) || height > (1L << 20) ||
      !std::isfinite(scale) || scale == 0.0) {
    throw FormatError(FormatError::Kind::bad_header, "PFM: malformed dimensions or scale line");
  }
  in.get();  // single whitespace byte before the payload
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - offset < count * 4) {
    throw FormatError(FormatError::Kind::truncated,
                      "PFM: payload holds " + std::to_string(bytes.size() - offset) +
                          " bytes, need " + std::to_string(count * 4));
  }
  const bool little = scale < 0.0;
  const bool swap = little != (std::endian::native == std::endian::little);
  Tensor<float> map(Shape{1, static_cast<int>(height), static_cast<int>(width), 1});
  const char* payload = bytes.data() + offset;
  for (long y = 0; y < height; ++y) {
    // First stored row is the bottom of the image.
    float* dst = map.row(0, static_cast<int>(height - 1 - y));
    for (long x = 0; x < width; ++x) {
      std::uint32_t bits;
      std::memcpy(&bits, payload + (y * width + x) * 4, 4);
      if (swap) bits = __builtin_bswap32(bits);
      dst[x] = std::fabs(std::bit_cast<float>(bits));
    }
  }
  return map;
}

Tensor<float> load_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_pfm(bytes);
}

void write_pfm(const std::filesystem::path& path, const Tensor<float>& map, bool little_endian) {
  const Shape s = map.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_pfm: expected [1,H,W,1], got " + s.str());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "Pf\n" << s.w << ' ' << s.h << '\n' << (little_endian ? "-1.0" : "1.0") << '\n';
  const bool swap = little_endian != (std::endian::native == std::endian::little);
  std::vector<std::uint32_t> row(static_cast<std::size_t>(s.w));
  for (int y = s.h - 1; y >= 0; --y) {
    const float* src = map.row(0, y);
    for (int x = 0; x < s.w; ++x) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(src[x]);
      row[static_cast<std::size_t>(x)] = swap ? __builtin_bswap32(bits) : bits;
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------- KITTI

KittiDisparity decode_kitti_disparity(const std::vector<std::uint16_t>& raw, int width, int height) {
  if (raw.size() != static_cast<std::size_t>(width) * height) {
    throw ShapeError("decode_kitti_disparity: sample count does not match image size");
  }
  KittiDisparity out{Tensor<float>(Shape{1, height, width, 1}), Tensor<float>(Shape{1, height, width, 1})};
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.disparity.ptr()[i] = static_cast<float>(raw[i]) / 256.0f;
    out.valid_mask.ptr()[i] = raw[i] > 0 ? 1.0f : 0.0f;
  }
  return out;
}

KittiDisparity load_kitti_disparity(const std::filesystem::path& path) {
  const RawImage img = read_image(path);
  if (img.bit_depth != 16) {
    throw FormatError(FormatError::Kind::unsupported_depth,
                      "KITTI disparity must be a 16-bit image: " + path.string());
  }
  if (img.channels != 1) {
    throw FormatError(FormatError::Kind::unsupported_depth,
                      "KITTI disparity must be single-channel: " + path.string());
  }
  return decode_kitti_disparity(img.samples, img.width, img.height);
}

namespace {

Tensor<float> crop(const Tensor<float>& t, int y0, int x0, int h, int w) {
  const Shape s = t.shape();
  Tensor<float> out(Shape{s.n, h, w, s.c});
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < h; ++y) {
      const float* src = t.row(n, y0 + y) + static_cast<std::ptrdiff_t>(x0) * s.c;
      std::copy(src, src + static_cast<std::ptrdiff_t>(w) * s.c, out.row(n, y));
    }
  }
  return out;
}

}  // namespace

StereoSample crop_kitti(const StereoSample& sample) {
  const Shape s = sample.left.shape();
  if (s.h < kKittiCropHeight || s.w < kKittiCropWidth) {
    throw ShapeError("crop_kitti: input " + std::to_string(s.w) + "x" + std::to_string(s.h) +
                     " is smaller than the 1224x200 crop");
  }
  const int x0 = (s.w - kKittiCropWidth) / 2;
  const int y0 = s.h - kKittiCropHeight;
  StereoSample out;
  out.left = crop(sample.left, y0, x0, kKittiCropHeight, kKittiCropWidth);
  out.right = crop(sample.right, y0, x0, kKittiCropHeight, kKittiCropWidth);
  out.disparity = crop(sample.disparity, y0, x0, kKittiCropHeight, kKittiCropWidth);
  out.valid_mask = crop(sample.valid_mask, y0, x0, kKittiCropHeight, kKittiCropWidth);
  out.dmax = sample.dmax;
  return out;
}

// ---------------------------------------------------------------- scaling

Tensor<double> normalize_disparity(const Tensor<float>& gt, double dmax, std::int64_t* clipped) {
  if (!(dmax > 0.0)) throw ShapeError("normalize_disparity: dmax must be positive");
  // f64 keeps every f32 disparity recoverable, subnormals included.
  Tensor<double> out(gt.shape());
  std::int64_t over = 0;
  for (std::int64_t i = 0; i < gt.size(); ++i) {
    double d = gt.ptr()[i];
    if (d > dmax) {
      ++over;
      d = dmax;
    }
    if (!(d > 0.0)) d = 0.0;  // also maps NaN to 0
    out.ptr()[i] = d / dmax;
  }
  if (clipped) *clipped = over;
  return out;
}

template <typename T>
Tensor<float> denormalize_disparity(const Tensor<T>& normalized, double dmax) {
  if (!(dmax > 0.0)) throw ShapeError("denormalize_disparity: dmax must be positive");
  Tensor<float> out(normalized.shape());
  for (std::int64_t i = 0; i < normalized.size(); ++i) {
    out.ptr()[i] = static_cast<float>(static_cast<double>(normalized.ptr()[i]) * dmax);
  }
  return out;
}

template Tensor<float> denormalize_disparity(const Tensor<float>&, double);
template Tensor<float> denormalize_disparity(const Tensor<double>&, double);

// ---------------------------------------------------------------- split

SplitResult split_filter(const std::vector<StereoSample>& samples, std::uint64_t seed) {
  if (samples.empty()) throw ShapeError("split_filter: no samples");
  SplitResult res;
  res.train.split = Split::train;
  res.test.split = Split::test;
  res.train.seed = res.test.seed = seed;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].max_valid_disparity() > samples[i].left.shape().w) {
      ++res.rejected;
    } else {
      kept.push_back(i);
    }
  }
  if (kept.empty()) throw ShapeError("split_filter: every sample was rejected");
  std::mt19937_64 rng(seed);
  std::shuffle(kept.begin(), kept.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.9 * static_cast<double>(kept.size())));
  res.train.samples.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_train));
  res.test.samples.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_train), kept.end());
  return res;
}

// ---------------------------------------------------------------- synthesis

namespace {

struct Layer {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // left-view rectangle, half-open
  int disparity = 0;
  bool background = false;
  std::uint8_t base[3] = {0, 0, 0};
  int amplitude = 0;
  int cell = 1;
  std::uint64_t key = 0;

  bool covers(int x, int y) const {
    return background || (x >= x0 && x < x1 && y >= y0 && y < y1);
  }
};

std::uint64_t mix(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDULL;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ULL;
  return x ^ (x >> 33);
}

// Texture in left-view coordinates; defined for any x so the background can
// be sampled beyond the right edge.
std::uint8_t texel(const Layer& l, int x, int y, int c) {
  const auto cx = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(x / static_cast<double>(l.cell))) + (1 << 20));
  const auto cy = static_cast<std::uint64_t>(y / l.cell);
  const std::uint64_t h = mix(l.key ^ mix(cx * 0x9E3779B97F4A7C15ULL ^ (cy << 21) ^ static_cast<std::uint64_t>(c)));
  const int noise = static_cast<int>(h % static_cast<std::uint64_t>(2 * l.amplitude + 1)) - l.amplitude;
  return static_cast<std::uint8_t>(std::clamp(static_cast<int>(l.base[c]) + noise, 0, 255));
}

int topmost(const std::vector<Layer>& layers, int x, int y) {
  for (int k = static_cast<int>(layers.size()) - 1; k >= 0; --k) {
    if (layers[static_cast<std::size_t>(k)].covers(x, y)) return k;
  }
  return 0;
}

// Nearest surface seen at right-view column xr.
int topmost_right(const std::vector<Layer>& layers, int xr, int y) {
  for (int k = static_cast<int>(layers.size()) - 1; k >= 0; --k) {
    const Layer& l = layers[static_cast<std::size_t>(k)];
    if (l.covers(xr + l.disparity, y)) return k;
  }
  return 0;
}

Tensor<float> to_tensor(const std::vector<std::uint8_t>& rgb, int h, int w, int channels) {
  Tensor<float> t(Shape{1, h, w, channels});
  for (int i = 0; i < h * w; ++i) {
    if (channels == 3) {
      for (int c = 0; c < 3; ++c) t.ptr()[i * 3 + c] = static_cast<float>(rgb[static_cast<std::size_t>(i) * 3 + c]) / 255.0f;
    } else {
      const double luma = 0.299 * rgb[static_cast<std::size_t>(i) * 3] + 0.587 * rgb[static_cast<std::size_t>(i) * 3 + 1] +
                          0.114 * rgb[static_cast<std::size_t>(i) * 3 + 2];
      t.ptr()[i] = static_cast<float>(std::lround(luma)) / 255.0f;
    }
  }
  return t;
}

}  // namespace

std::vector<StereoSample> synth_generate(int count, int height, int width, double dmax,
                                         std::uint64_t seed, int channels) {
  if (count < 0 || height < 8 || width < 8) {
    throw ShapeError("synth_generate: need count >= 0 and images of at least 8x8");
  }
  if (!(dmax > 0.0) || dmax >= width) {
    throw ShapeError("synth_generate: dmax must lie in (0, width), got " + std::to_string(dmax));
  }
  if (channels != 1 && channels != 3) throw ShapeError("synth_generate: channels must be 1 or 3");
  const int dmax_px = static_cast<int>(std::floor(dmax));
  std::mt19937_64 rng(seed);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<StereoSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    std::vector<Layer> layers;
    auto textured = [&](Layer l) {
      for (auto& b : l.base) b = static_cast<std::uint8_t>(uniform_int(40, 215));
      l.amplitude = uniform_int(20, 40);
      l.cell = uniform_int(1, 3);
      l.key = rng();
      return l;
    };
    Layer bg;
    bg.background = true;
    bg.disparity = uniform_int(0, dmax_px / 4);
    layers.push_back(textured(bg));
    const int rects = uniform_int(2, 5);
    for (int r = 0; r < rects; ++r) {
      Layer l;
      const int rw = uniform_int(std::max(2, width / 6), std::max(2, width / 2));
      const int rh = uniform_int(std::max(2, height / 6), std::max(2, height / 2));
      l.x0 = uniform_int(0, width - rw);
      l.y0 = uniform_int(0, height - rh);
      l.x1 = l.x0 + rw;
      l.y1 = l.y0 + rh;
      l.disparity = uniform_int(std::min(bg.disparity + 1, dmax_px), dmax_px);
      layers.push_back(textured(l));
    }
    // Nearer surfaces (larger disparity) are painted last.
    std::stable_sort(layers.begin() + 1, layers.end(),
                     [](const Layer& a, const Layer& b) { return a.disparity < b.disparity; });

    std::vector<std::uint8_t> left(static_cast<std::size_t>(width) * height * 3);
    std::vector<std::uint8_t> right(left.size());
    StereoSample sample;
    sample.dmax = dmax;
    sample.disparity = Tensor<float>(Shape{1, height, width, 1});
    sample.valid_mask = Tensor<float>(Shape{1, height, width, 1});
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t px = static_cast<std::size_t>(y) * width + x;
        const int kl = topmost(layers, x, y);
        const Layer& l = layers[static_cast<std::size_t>(kl)];
        for (int c = 0; c < 3; ++c) left[px * 3 + c] = texel(l, x, y, c);
        sample.disparity.ptr()[px] = static_cast<float>(l.disparity);
        const int xr = x - l.disparity;
        const bool visible = xr >= 0 && topmost_right(layers, xr, y) == kl;
        sample.valid_mask.ptr()[px] = visible ? 1.0f : 0.0f;

        const Layer& lr = layers[static_cast<std::size_t>(topmost_right(layers, x, y))];
        for (int c = 0; c < 3; ++c) right[px * 3 + c] = texel(lr, x + lr.disparity, y, c);
      }
    }
    sample.left = to_tensor(left, height, width, channels);
    sample.right = to_tensor(right, height, width, channels);
    sample.validate();
    out.push_back(std::move(sample));
  }
  return out;
}

// ---------------------------------------------------------------- files

Tensor<float> load_stereo_image(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw ShapeError("load_stereo_image: channels must be 1 or 3");
  const RawImage img = read_image(path);
  if (img.bit_depth != 8) {
    throw FormatError(FormatError::Kind::unsupported_depth, "stereo images must be 8-bit: " + path.string());
  }
  Tensor<float> t(Shape{1, img.height, img.width, channels});
  const int pixels = img.width * img.height;
  for (int i = 0; i < pixels; ++i) {
    const std::uint16_t* px = img.samples.data() + static_cast<std::ptrdiff_t>(i) * img.channels;
    if (channels == 3) {
      for (int c = 0; c < 3; ++c) t.ptr()[i * 3 + c] = static_cast<float>(px[img.channels == 1 ? 0 : c]) / 255.0f;
    } else if (img.channels == 1) {
      t.ptr()[i] = static_cast<float>(px[0]) / 255.0f;
    } else {
      const double luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      t.ptr()[i] = static_cast<float>(std::lround(luma)) / 255.0f;
    }
  }
  return t;
}

void save_stereo_image(const std::filesystem::path& path, const Tensor<float>& image) {
  const Shape s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ShapeError("save_stereo_image: expected [1,H,W,1|3], got " + s.str());
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(image.size()));
  for (std::int64_t i = 0; i < image.size(); ++i) {
    bytes[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::clamp(std::lround(image.ptr()[i] * 255.0), 0L, 255L));
  }
  write_png8(path, s.w, s.h, s.c, bytes);
}

namespace {

std::string index_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<StereoSample>& samples,
                   const DatasetMeta& meta) {
  namespace fs = std::filesystem;
  for (const char* sub : {"left", "right", "disp"}) fs::create_directories(dir / sub);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const StereoSample& s = samples[i];
    const std::string id = index_name(static_cast<int>(i));
    save_stereo_image(dir / "left" / (id + ".png"), s.left);
    save_stereo_image(dir / "right" / (id + ".png"), s.right);
    Tensor<float> disp = s.disparity;
    for (std::int64_t p = 0; p < disp.size(); ++p) {
      if (s.valid_mask.ptr()[p] == 0.0f) disp.ptr()[p] = std::numeric_limits<float>::infinity();
    }
    write_pfm(dir / "disp" / (id + ".pfm"), disp);
  }
  std::ofstream cfg(dir / "meta.cfg", std::ios::trunc);
  if (!cfg) throw IoError("cannot write " + (dir / "meta.cfg").string());
  cfg << "count=" << meta.count << '\n'
      << "H=" << meta.height << '\n'
      << "W=" << meta.width << '\n'
      << "dmax=" << meta.dmax << '\n'
      << "seed=" << meta.seed << '\n';
}

DatasetMeta read_dataset_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.cfg");
  if (!in) throw IoError("missing dataset metadata " + (dir / "meta.cfg").string());
  DatasetMeta meta;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(FormatError::Kind::bad_header, "meta.cfg: bad line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "count") meta.count = std::stoi(value);
      else if (key == "H") meta.height = std::stoi(value);
      else if (key == "W") meta.width = std::stoi(value);
      else if (key == "dmax") meta.dmax = std::stod(value);
      else if (key == "seed") meta.seed = std::stoull(value);
      else throw FormatError(FormatError::Kind::bad_header, "meta.cfg: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError(FormatError::Kind::bad_header, "meta.cfg: bad value for '" + key + "'");
    }
  }
  return meta;
}

std::vector<StereoSample> read_dataset(const std::filesystem::path& dir, int channels, double dmax) {
  const DatasetMeta meta = read_dataset_meta(dir);
  std::vector<StereoSample> samples;
  for (int i = 0; i < meta.count; ++i) {
    const std::string id = index_name(i);
    StereoSample s;
    s.left = load_stereo_image(dir / "left" / (id + ".png"), channels);
    s.right = load_stereo_image(dir / "right" / (id + ".png"), channels);
    s.disparity = load_pfm(dir / "disp" / (id + ".pfm"));
    s.valid_mask = Tensor<float>(s.disparity.shape());
    for (std::int64_t p = 0; p < s.disparity.size(); ++p) {
      const bool ok = std::isfinite(s.disparity.ptr()[p]);
      s.valid_mask.ptr()[p] = ok ? 1.0f : 0.0f;
      if (!ok) s.disparity.ptr()[p] = 0.0f;
    }
    s.dmax = dmax > 0.0 ? dmax : meta.dmax;
    // Ground truth beyond dmax is clipped by normalize_disparity, so only
    // the shapes are checked here.
    require_same_shape(s.right.shape(), s.left.shape(), "dataset sample " + id);
    require_same_shape(s.disparity.shape(), Shape{1, s.left.shape().h, s.left.shape().w, 1},
                       "dataset disparity " + id);
    samples.push_back(std::move(s));
  }
  return samples;
}

Batch make_batch(const std::vector<StereoSample>& samples, std::span<const std::size_t> which) {
  if (which.empty()) throw ShapeError("make_batch: empty batch");
  const Shape s = samples.at(which.front()).left.shape();
  const int n = static_cast<int>(which.size());
  Batch b{Tensor<float>(Shape{n, s.h, s.w, s.c}), Tensor<float>(Shape{n, s.h, s.w, s.c}),
          Tensor<float>(Shape{n, s.h, s.w, 1}), Tensor<float>(Shape{n, s.h, s.w, 1})};
  for (int i = 0; i < n; ++i) {
    const StereoSample& src = samples.at(which[static_cast<std::size_t>(i)]);
    require_same_shape(src.left.shape(), s, "make_batch: sample image");
    require_same_shape(src.disparity.shape(), Shape{1, s.h, s.w, 1}, "make_batch: sample disparity");
    std::copy(src.left.data().begin(), src.left.data().end(), b.left.row(i, 0));
    std::copy(src.right.data().begin(), src.right.data().end(), b.right.row(i, 0));
    std::copy(src.disparity.data().begin(), src.disparity.data().end(), b.disparity.row(i, 0));
    std::copy(src.valid_mask.data().begin(), src.valid_mask.data().end(), b.valid_mask.row(i, 0));
  }
  return b;
}

}  // namespace dmn
