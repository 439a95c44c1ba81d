#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "densemapnet/tensor.hpp"

namespace dmn {

/// One rectified stereo pair with ground truth. Images are [1,H,W,C] in
/// [0,1]; disparity and mask are [1,H,W,1], disparity in pixels.
struct StereoSample {
  Tensor<float> left;
  Tensor<float> right;
  Tensor<float> disparity;
  Tensor<float> valid_mask;
  double dmax = 0.0;

  /// Throws ShapeError if shapes disagree or a valid disparity is outside
  /// [0, dmax].
  void validate() const;
  /// Largest disparity over valid pixels (0 when none are valid).
  double max_valid_disparity() const;
};

enum class Split { train, test };

struct DatasetIndex {
  std::vector<std::size_t> samples;  // positions in the source list, in shuffled order
  Split split = Split::train;
  std::uint64_t seed = 0;
};

struct SplitResult {
  DatasetIndex train;
  DatasetIndex test;
  std::size_t rejected = 0;
};

// PFM ("Pf", single channel). Negative scale = little-endian payload. Rows
// are stored bottom-to-top on disk.
Tensor<float> load_pfm(const std::filesystem::path& path);
Tensor<float> parse_pfm(const std::string& bytes);
void write_pfm(const std::filesystem::path& path, const Tensor<float>& map,
               bool little_endian = true);

struct KittiDisparity {
  Tensor<float> disparity;
  Tensor<float> valid_mask;
};

/// 16-bit gray PNG, disparity = raw / 256, raw 0 = no measurement.
KittiDisparity load_kitti_disparity(const std::filesystem::path& path);
KittiDisparity decode_kitti_disparity(const std::vector<std::uint16_t>& raw, int width, int height);

inline constexpr int kKittiCropWidth = 1224;
inline constexpr int kKittiCropHeight = 200;

/// Fixed 1224x200 window, horizontally centred and anchored to the bottom
/// edge of the frame.
StereoSample crop_kitti(const StereoSample& sample);

/// clip(gt, 0, dmax) / dmax, kept in f64 so that denormalize_disparity
/// recovers every f32 input bit for bit. `clipped` receives the number of
/// values above dmax.
Tensor<double> normalize_disparity(const Tensor<float>& gt, double dmax,
                                   std::int64_t* clipped = nullptr);
/// t * dmax rounded to f32. Takes sigmoid outputs (f32) or normalized
/// ground truth (f64).
template <typename T>
Tensor<float> denormalize_disparity(const Tensor<T>& normalized, double dmax);

/// Drops samples whose largest valid disparity exceeds the image width, then
/// shuffles with `seed` and keeps round(0.9 n) for training.
SplitResult split_filter(const std::vector<StereoSample>& samples, std::uint64_t seed);

/// Synthetic rectified pairs: textured background plus 2-5 textured
/// rectangles at integer disparities <= dmax. Occluded pixels are invalid.
std::vector<StereoSample> synth_generate(int count, int height, int width, double dmax,
                                         std::uint64_t seed, int channels = 3);

/// Image file -> [1,H,W,channels] in [0,1]. Gray inputs are replicated to 3
/// channels; colour inputs are reduced to luma for channels = 1.
Tensor<float> load_stereo_image(const std::filesystem::path& path, int channels);
void save_stereo_image(const std::filesystem::path& path, const Tensor<float>& image);

struct DatasetMeta {
  int count = 0;
  int height = 0;
  int width = 0;
  double dmax = 0.0;
  std::uint64_t seed = 0;
};

/// Directory layout: left/NNNN.png, right/NNNN.png, disp/NNNN.pfm, meta.cfg.
/// Invalid ground-truth pixels are stored as +inf in the PFM.
void write_dataset(const std::filesystem::path& dir, const std::vector<StereoSample>& samples,
                   const DatasetMeta& meta);
DatasetMeta read_dataset_meta(const std::filesystem::path& dir);
std::vector<StereoSample> read_dataset(const std::filesystem::path& dir, int channels,
                                       double dmax);

/// Stacks samples into one batch along N.
struct Batch {
  Tensor<float> left;
  Tensor<float> right;
  Tensor<float> disparity;
  Tensor<float> valid_mask;
};
Batch make_batch(const std::vector<StereoSample>& samples, std::span<const std::size_t> which);

}  // namespace dmn
