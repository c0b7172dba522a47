#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmbert/data.h"
#include "mmbert/model.h"
#include "mmbert/tokenizer.h"
#include "mmbert/vision.h"

namespace mmbert {

enum class Reduction { kLastLayerMeanHeads, kRollout };
std::string_view reduction_name(Reduction r);
std::optional<Reduction> parse_reduction(std::string_view name);

enum class HeatmapLayout {
  kGrid,     // G x G over the spatial grid tokens
  kProfile,  // one bin per pooled (non-grid) image token
};

struct HeatmapOptions {
  Reduction reduction = Reduction::kLastLayerMeanHeads;
  HeatmapLayout layout = HeatmapLayout::kGrid;
  // Defaults: the last layer, mean over heads. With rollout, layer is the
  // last layer folded into the product.
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
};

struct Heatmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;  // row-major, nonnegative, sums to 1
  HeatmapLayout layout = HeatmapLayout::kGrid;
  Reduction reduction = Reduction::kLastLayerMeanHeads;
  std::size_t layer = 0;
  std::optional<std::size_t> head;

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

// Attention from the [CLS] and text queries to the image keys, renormalized
// over those keys. Grid layout needs spatial features (kMode otherwise).
Heatmap attention_to_image(const EncoderOutput& out, const MultimodalSequence& seq,
                           const ModelConfig& cfg, const HeatmapOptions& opts = {});

// Forward pass for one image + question, then attention_to_image.
Heatmap explain(const Model& model, const Vocab& vocab, const Image& image,
                const std::string& question, const HeatmapOptions& opts = {});

// Bilinear upsample of a grid heatmap to height x width.
std::vector<float> upsample(const Heatmap& map, std::size_t height, std::size_t width);

struct RenderOptions {
  double alpha = 0.5;
  bool overlay = true;
};

struct RenderedPaths {
  std::filesystem::path heatmap;  // .attn.pgm
  std::filesystem::path overlay;  // .attn.ppm, empty when not written
};

// Upsamples to the image size, min-max normalizes (a constant map becomes
// mid-gray) and writes <base>.attn.pgm plus a red-channel overlay
// <base>.attn.ppm. base's extension, if any, is replaced.
RenderedPaths render_heatmap(const Heatmap& map, const Image& image,
                             const std::filesystem::path& base, const RenderOptions& opts = {});

// Share of the upsampled heatmap's mass inside the box.
double box_mass(const Heatmap& map, const Box& box, std::size_t height, std::size_t width);
// Mass a uniform map would put inside the box.
double box_baseline(const Box& box, std::size_t height, std::size_t width);

}  // namespace mmbert
