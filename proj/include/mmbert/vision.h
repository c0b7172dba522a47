#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmbert/parameters.h"
#include "mmbert/random.h"
#include "mmbert/tensor.h"

namespace mmbert {

// RGB image, planar channel-major storage (c, y, x), values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), data(3 * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6, maxval 255).
Image decode_image(const std::filesystem::path& path);
Image decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
std::vector<std::uint8_t> encode_ppm(const Image& img);
void write_ppm(const Image& img, const std::filesystem::path& path);
// Binary PGM (P5) from a single [0,1] plane.
void write_pgm(std::span<const float> plane, std::size_t height, std::size_t width,
               const std::filesystem::path& path);

// Bilinear resampling of one plane with half-pixel-centred sampling.
std::vector<float> resize_plane(std::span<const float> src, std::size_t height, std::size_t width,
                                std::size_t out_h, std::size_t out_w);
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

struct AugmentConfig {
  bool enabled = true;
  double crop_min = 0.8;  // side fraction
  double crop_max = 1.0;
  double rotation_min = -10.0;  // degrees
  double rotation_max = 10.0;
  double brightness = 0.1;  // factor drawn from [1 - b, 1 + b]
  double contrast = 0.1;
  double saturation = 0.1;

  void validate() const;
};

// Random crop (resized back), rotation about the centre with edge clamping,
// then brightness/contrast/saturation jitter; clamped to [0, 1]. Draws a fixed
// number of values from rng regardless of configuration.
Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng);

// [3 x H x W] tensor view of an image.
Tensor image_to_tensor(const Image& img, DType dtype = DType::kF32);

enum class FeatureMode { kMultiscale, kSpatial };

inline constexpr std::size_t kNumStages = 5;

struct VisionConfig {
  std::size_t input_size = 224;
  std::array<std::size_t, kNumStages> widths{16, 32, 64, 128, 128};
  FeatureMode mode = FeatureMode::kMultiscale;
  std::size_t feature_dim = 128;  // projected width, equal to the encoder width
  bool gelu_exact = false;

  // Side length of the final stage's activation map.
  std::size_t grid_size() const;
  std::size_t token_count() const;
  void validate() const;
};

// Stem 7x7/2 followed by four 3x3/2 stages, each with a stage-specific
// projection of its pooled activation; spatial mode adds a per-cell
// projection of the final map.
struct VisionParams {
  std::array<Tensor, kNumStages> conv_weight;
  std::array<Tensor, kNumStages> conv_bias;
  std::array<Tensor, kNumStages> proj_weight;
  std::array<Tensor, kNumStages> proj_bias;
  Tensor grid_weight;
  Tensor grid_bias;

  static VisionParams create(const VisionConfig& cfg, Rng& rng, DType dtype,
                             ParameterStore& store);
};

struct ImageFeatures {
  FeatureMode mode = FeatureMode::kMultiscale;
  Tensor pooled;  // [5 x D]
  Tensor grid;    // [G*G x D], spatial mode only
  std::size_t grid_size = 0;

  std::size_t token_count() const { return pooled.dim(0) + (grid.defined() ? grid.dim(0) : 0); }
  // All image tokens in sequence order: pooled first, then grid cells
  // row-major.
  Tensor tokens() const;
};

ImageFeatures encode_image(const Tensor& image, const VisionParams& params, const VisionConfig& cfg);

}  // namespace mmbert
