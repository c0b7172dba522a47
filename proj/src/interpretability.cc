#include "mmbert/interpretability.h"

#include <algorithm>
#include <numeric>

#include "mmbert/error.h"
#include "mmbert/tape.h"

namespace mmbert {
namespace {

// [T x T] attention of one layer, mean over heads or a single head.
std::vector<double> layer_attention(const Tensor& att, std::optional<std::size_t> head) {
  const std::size_t h = att.dim(0), t = att.dim(1);
  const std::vector<double> v = att.to_vector();
  std::vector<double> out(t * t, 0.0);
  if (head) {
    require(*head < h, ErrorKind::kConfig,
            "heatmap: head " + std::to_string(*head) + " out of range (" + std::to_string(h) + " heads)");
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(*head * t * t), t * t, out.begin());
    return out;
  }
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t i = 0; i < t * t; ++i) out[i] += v[k * t * t + i];
  }
  for (double& x : out) x /= static_cast<double>(h);
  return out;
}

}  // namespace

std::string_view reduction_name(Reduction r) {
  return r == Reduction::kRollout ? "rollout" : "last_layer_mean_heads";
}

std::optional<Reduction> parse_reduction(std::string_view name) {
  if (name == "last_layer_mean_heads" || name == "last") return Reduction::kLastLayerMeanHeads;
  if (name == "rollout") return Reduction::kRollout;
  return std::nullopt;
}

Heatmap attention_to_image(const EncoderOutput& out, const MultimodalSequence& seq,
                           const ModelConfig& cfg, const HeatmapOptions& opts) {
  require(!out.attention.empty(), ErrorKind::kContract, "heatmap: no attention maps");
  require(seq.image_count > 0, ErrorKind::kContract, "heatmap: sequence has no image tokens");
  const std::size_t t = seq.length();
  const std::size_t n_layers = out.attention.size();
  const std::size_t layer = opts.layer.value_or(n_layers - 1);
  require(layer < n_layers, ErrorKind::kConfig,
          "heatmap: layer " + std::to_string(layer) + " out of range (" + std::to_string(n_layers) +
              " layers)");

  const bool spatial = cfg.vision.mode == FeatureMode::kSpatial;
  const std::size_t g = spatial ? cfg.vision.grid_size() : 0;
  const std::size_t grid_tokens = g * g;
  require(seq.image_count >= grid_tokens, ErrorKind::kShape, "heatmap: image token count mismatch");
  const std::size_t pooled_tokens = seq.image_count - grid_tokens;

  Heatmap map;
  map.layout = opts.layout;
  map.reduction = opts.reduction;
  map.layer = layer;
  map.head = opts.head;
  std::size_t key_begin = 1;  // image tokens follow [CLS]
  std::size_t key_count = 0;
  if (opts.layout == HeatmapLayout::kGrid) {
    require(spatial, ErrorKind::kMode,
            "heatmap: a 2-D map needs spatial image features; use the profile layout in multiscale mode");
    key_begin += pooled_tokens;
    key_count = grid_tokens;
    map.rows = map.cols = g;
  } else {
    require(pooled_tokens > 0, ErrorKind::kMode, "heatmap: no pooled image tokens");
    key_count = pooled_tokens;
    map.rows = 1;
    map.cols = pooled_tokens;
  }

  std::vector<double> a;
  if (opts.reduction == Reduction::kLastLayerMeanHeads) {
    a = layer_attention(out.attention[layer], opts.head);
  } else {
    // R = A'_layer ... A'_0 with A' = 0.5 A + 0.5 I.
    for (std::size_t l = 0; l <= layer; ++l) {
      std::vector<double> cur = layer_attention(out.attention[l], opts.head);
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) cur[i * t + j] *= 0.5;
        cur[i * t + i] += 0.5;
      }
      if (a.empty()) {
        a = std::move(cur);
        continue;
      }
      std::vector<double> next(t * t, 0.0);
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t k = 0; k < t; ++k) {
          const double c = cur[i * t + k];
          if (c == 0.0) continue;
          for (std::size_t j = 0; j < t; ++j) next[i * t + j] += c * a[k * t + j];
        }
      }
      a = std::move(next);
    }
  }

  std::vector<std::size_t> queries{0};
  for (std::size_t p = seq.text_begin; p < seq.text_begin + seq.text_count; ++p) {
    if (seq.valid[p]) queries.push_back(p);
  }
  map.weights.assign(key_count, 0.0);
  for (std::size_t q : queries) {
    for (std::size_t k = 0; k < key_count; ++k) map.weights[k] += a[q * t + key_begin + k];
  }
  const double total = std::accumulate(map.weights.begin(), map.weights.end(), 0.0);
  if (total > 0.0) {
    for (double& w : map.weights) w /= total;
  } else {
    std::fill(map.weights.begin(), map.weights.end(), 1.0 / static_cast<double>(key_count));
  }
  return map;
}

Heatmap explain(const Model& model, const Vocab& vocab, const Image& image,
                const std::string& question, const HeatmapOptions& opts) {
  const ModelConfig& c = model.config();
  NoGradGuard guard;
  const Image img = (image.height == c.vision.input_size && image.width == c.vision.input_size)
                        ? image
                        : resize_bilinear(image, c.vision.input_size, c.vision.input_size);
  Tensor feats = encode_image(image_to_tensor(img, c.dtype), model.params().vision, c.vision).tokens();
  MultimodalSequence seq = assemble_sequence(feats, tokenize(question, vocab).ids, model);
  EncoderOutput out = encoder_forward(seq, model);
  return attention_to_image(out, seq, c, opts);
}

std::vector<float> upsample(const Heatmap& map, std::size_t height, std::size_t width) {
  require(map.layout == HeatmapLayout::kGrid, ErrorKind::kMode, "heatmap: only grid maps render spatially");
  std::vector<float> cells(map.weights.begin(), map.weights.end());
  return resize_plane(cells, map.rows, map.cols, height, width);
}

RenderedPaths render_heatmap(const Heatmap& map, const Image& image,
                             const std::filesystem::path& base, const RenderOptions& opts) {
  require(opts.alpha >= 0.0 && opts.alpha <= 1.0, ErrorKind::kConfig, "heatmap: alpha must lie in [0, 1]");
  std::vector<float> plane = upsample(map, image.height, image.width);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const float mn = *lo, mx = *hi;
  for (float& v : plane) v = mx > mn ? (v - mn) / (mx - mn) : 0.5f;

  RenderedPaths paths;
  std::filesystem::path p = base;
  paths.heatmap = p.replace_extension(".attn.pgm");
  write_pgm(plane, image.height, image.width, paths.heatmap);
  if (opts.overlay) {
    const float a = static_cast<float>(opts.alpha);
    Image over = image;
    const std::size_t n = image.height * image.width;
    for (std::size_t i = 0; i < n; ++i) {
      over.data[i] = (1.0f - a) * image.data[i] + a * plane[i];
      over.data[n + i] = (1.0f - a) * image.data[n + i];
      over.data[2 * n + i] = (1.0f - a) * image.data[2 * n + i];
    }
    p = base;
    paths.overlay = p.replace_extension(".attn.ppm");
    write_ppm(over, paths.overlay);
  }
  return paths;
}

double box_mass(const Heatmap& map, const Box& box, std::size_t height, std::size_t width) {
  require(box.x1 <= width && box.y1 <= height && box.x0 < box.x1 && box.y0 < box.y1, ErrorKind::kData,
          "heatmap: box outside the image");
  const std::vector<float> plane = upsample(map, height, width);
  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double v = plane[y * width + x];
      total += v;
      if (y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1) inside += v;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

double box_baseline(const Box& box, std::size_t height, std::size_t width) {
  return static_cast<double>((box.x1 - box.x0) * (box.y1 - box.y0)) /
         static_cast<double>(height * width);
}

}  // namespace mmbert
