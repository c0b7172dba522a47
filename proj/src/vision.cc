#include "mmbert/vision.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "mmbert/error.h"
#include "mmbert/ops.h"

namespace mmbert {
namespace {

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorKind::kDecode, source_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const std::uint8_t c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) error("unexpected end of header");
    if (!std::isdigit(bytes_[pos_])) error("expected a decimal number");
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (1u << 24)) error("header value too large");
      ++pos_;
    }
    return value;
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> bytes_;
  std::string source_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open image " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::kIo, "failed writing " + path.string());
}

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

float sample_clamped(const Image& img, std::size_t c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const std::size_t y0 = static_cast<std::size_t>(y);
  const std::size_t x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const float fy = static_cast<float>(y - static_cast<double>(y0));
  const float fx = static_cast<float>(x - static_cast<double>(x0));
  const float top = img.at(c, y0, x0) + (img.at(c, y0, x1) - img.at(c, y0, x0)) * fx;
  const float bottom = img.at(c, y1, x0) + (img.at(c, y1, x1) - img.at(c, y1, x0)) * fx;
  return top + (bottom - top) * fy;
}

float luma(const Image& img, std::size_t y, std::size_t x) {
  return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source) {
  HeaderReader r(bytes, source);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') r.error("missing P6 magic");
  r.pos_ = 2;
  const std::size_t width = r.read_uint();
  const std::size_t height = r.read_uint();
  const std::size_t maxval = r.read_uint();
  if (width == 0 || height == 0) r.error("zero image extent");
  if (maxval != 255) r.error("unsupported maxval " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) r.error("missing header terminator");
  ++r.pos_;
  const std::size_t need = width * height * 3;
  if (bytes.size() - r.pos_ < need) {
    fail(ErrorKind::kDecode, source + ": truncated pixel data at byte offset " +
                                 std::to_string(bytes.size()) + " (expected " +
                                 std::to_string(r.pos_ + need) + " bytes)");
  }
  Image img(height, width);
  const std::uint8_t* px = bytes.data() + r.pos_;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(px[(y * width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return img;
}

Image decode_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_ppm(bytes, path.string());
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.data.size());
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
    }
  }
  return out;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  write_file(encode_ppm(img), path);
}

void write_pgm(std::span<const float> plane, std::size_t height, std::size_t width,
               const std::filesystem::path& path) {
  require(plane.size() == height * width, ErrorKind::kShape, "write_pgm: plane size mismatch");
  const std::string header =
      "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : plane) out.push_back(to_byte(v));
  write_file(out, path);
}

std::vector<float> resize_plane(std::span<const float> src, std::size_t height, std::size_t width,
                                std::size_t out_h, std::size_t out_w) {
  require(height > 0 && width > 0 && out_h > 0 && out_w > 0, ErrorKind::kShape,
          "resize: extents must be positive");
  require(src.size() == height * width, ErrorKind::kShape, "resize: plane size mismatch");
  std::vector<float> dst(out_h * out_w);
  const double sy_scale = static_cast<double>(height) / static_cast<double>(out_h);
  const double sx_scale = static_cast<double>(width) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double sy = (static_cast<double>(oy) + 0.5) * sy_scale - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(height - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const float fy = static_cast<float>(sy - static_cast<double>(y0));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double sx = (static_cast<double>(ox) + 0.5) * sx_scale - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(width - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const float fx = static_cast<float>(sx - static_cast<double>(x0));
      const float a = src[y0 * width + x0], b = src[y0 * width + x1];
      const float c = src[y1 * width + x0], d = src[y1 * width + x1];
      const float top = a + (b - a) * fx;
      const float bottom = c + (d - c) * fx;
      dst[oy * out_w + ox] = top + (bottom - top) * fy;
    }
  }
  return dst;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  Image out(out_h, out_w);
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < 3; ++c) {
    auto r = resize_plane(std::span<const float>(img.data).subspan(c * plane, plane), img.height,
                          img.width, out_h, out_w);
    std::copy(r.begin(), r.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * out_h * out_w));
  }
  return out;
}

void AugmentConfig::validate() const {
  require(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0, ErrorKind::kConfig,
          "augment: crop fraction range must satisfy 0 < lo <= hi <= 1");
  require(rotation_min <= rotation_max && rotation_min >= -180.0 && rotation_max <= 180.0,
          ErrorKind::kConfig, "augment: rotation range must lie within [-180, 180] with lo <= hi");
  require(brightness >= 0.0 && brightness < 1.0 && contrast >= 0.0 && contrast < 1.0 &&
              saturation >= 0.0 && saturation < 1.0,
          ErrorKind::kConfig, "augment: jitter magnitudes must lie in [0, 1)");
}

Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const double crop = rng.uniform(cfg.crop_min, cfg.crop_max);
  const double crop_y = rng.uniform();
  const double crop_x = rng.uniform();
  const double angle = rng.uniform(cfg.rotation_min, cfg.rotation_max);
  const double bright = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness);
  const double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
  const double saturation = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
  if (!cfg.enabled) return img;

  Image out = img;
  const std::size_t ch = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(crop * static_cast<double>(img.height))), 1, img.height);
  const std::size_t cw = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(crop * static_cast<double>(img.width))), 1, img.width);
  if (ch != img.height || cw != img.width) {
    const std::size_t y0 = static_cast<std::size_t>(crop_y * static_cast<double>(img.height - ch + 1));
    const std::size_t x0 = static_cast<std::size_t>(crop_x * static_cast<double>(img.width - cw + 1));
    Image cropped(ch, cw);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < ch; ++y) {
        for (std::size_t x = 0; x < cw; ++x) cropped.at(c, y, x) = img.at(c, y0 + y, x0 + x);
      }
    }
    out = resize_bilinear(cropped, img.height, img.width);
  }
  if (angle != 0.0) {
    const Image src = out;
    const double rad = angle * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (static_cast<double>(src.height) - 1.0) / 2.0;
    const double cx = (static_cast<double>(src.width) - 1.0) / 2.0;
    for (std::size_t y = 0; y < src.height; ++y) {
      for (std::size_t x = 0; x < src.width; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sy = cy + cs * dy - sn * dx;
        const double sx = cx + sn * dy + cs * dx;
        for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = sample_clamped(src, c, sy, sx);
      }
    }
  }
  if (bright != 1.0) {
    for (float& v : out.data) v = static_cast<float>(v * bright);
  }
  if (contrast != 1.0) {
    double mean = 0.0;
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) mean += luma(out, y, x);
    }
    mean /= static_cast<double>(out.height * out.width);
    for (float& v : out.data) v = static_cast<float>((v - mean) * contrast + mean);
  }
  if (saturation != 1.0) {
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) {
        const float g = luma(out, y, x);
        for (std::size_t c = 0; c < 3; ++c) {
          out.at(c, y, x) = static_cast<float>(g + (out.at(c, y, x) - g) * saturation);
        }
      }
    }
  }
  for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Tensor image_to_tensor(const Image& img, DType dtype) {
  Tensor t({3, img.height, img.width}, dtype);
  if (dtype == DType::kF32) {
    std::copy(img.data.begin(), img.data.end(), t.mutable_values<float>().begin());
  } else {
    std::copy(img.data.begin(), img.data.end(), t.mutable_values<double>().begin());
  }
  return t;
}

std::size_t VisionConfig::grid_size() const {
  // Stem (k7, p3, s2) and stages (k3, p1, s2) each map n -> ceil(n / 2).
  std::size_t n = input_size;
  for (std::size_t s = 0; s < kNumStages; ++s) n = (n + 1) / 2;
  return n;
}

std::size_t VisionConfig::token_count() const {
  const std::size_t g = grid_size();
  return kNumStages + (mode == FeatureMode::kSpatial ? g * g : 0);
}

void VisionConfig::validate() const {
  require(input_size >= 8, ErrorKind::kConfig, "vision: input size must be at least 8");
  require(feature_dim >= 1, ErrorKind::kConfig, "vision: feature dim must be positive");
  for (std::size_t w : widths) require(w >= 1, ErrorKind::kConfig, "vision: widths must be positive");
}

VisionParams VisionParams::create(const VisionConfig& cfg, Rng& rng, DType dtype,
                                  ParameterStore& store) {
  cfg.validate();
  VisionParams p;
  std::size_t in_ch = 3;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t k = s == 0 ? 7 : 3;
    const std::size_t out_ch = cfg.widths[s];
    const std::string prefix = "vision.stage" + std::to_string(s);
    const double he = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
    p.conv_weight[s] = store.add(prefix + ".conv.weight", init::normal({out_ch, in_ch, k, k}, he, rng, dtype));
    p.conv_bias[s] = store.add(prefix + ".conv.bias", init::zeros({out_ch}, dtype));
    const double xavier = 1.0 / std::sqrt(static_cast<double>(out_ch));
    p.proj_weight[s] = store.add(prefix + ".proj.weight",
                                 init::normal({out_ch, cfg.feature_dim}, xavier, rng, dtype));
    p.proj_bias[s] = store.add(prefix + ".proj.bias", init::zeros({cfg.feature_dim}, dtype));
    in_ch = out_ch;
  }
  if (cfg.mode == FeatureMode::kSpatial) {
    const double xavier = 1.0 / std::sqrt(static_cast<double>(in_ch));
    p.grid_weight =
        store.add("vision.grid.weight", init::normal({in_ch, cfg.feature_dim}, xavier, rng, dtype));
    p.grid_bias = store.add("vision.grid.bias", init::zeros({cfg.feature_dim}, dtype));
  }
  return p;
}

Tensor ImageFeatures::tokens() const {
  if (!grid.defined()) return pooled;
  const std::vector<Tensor> parts{pooled, grid};
  return ops::concat_rows(parts);
}

ImageFeatures encode_image(const Tensor& image, const VisionParams& params, const VisionConfig& cfg) {
  require(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == cfg.input_size &&
              image.dim(2) == cfg.input_size,
          ErrorKind::kShape,
          "encode_image: expected [3x" + std::to_string(cfg.input_size) + "x" +
              std::to_string(cfg.input_size) + "], got " + shape_string(image.shape()));
  ImageFeatures out;
  out.mode = cfg.mode;
  std::vector<Tensor> pooled;
  Tensor x = image;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t padding = s == 0 ? 3 : 1;
    x = ops::gelu(ops::conv2d(x, params.conv_weight[s], params.conv_bias[s], 2, padding),
                  cfg.gelu_exact);
    pooled.push_back(
        ops::linear(ops::global_avg_pool(x), params.proj_weight[s], params.proj_bias[s]));
  }
  out.pooled = ops::concat_rows(pooled);
  if (cfg.mode == FeatureMode::kSpatial) {
    const std::size_t channels = x.dim(0), g = x.dim(1);
    Tensor cells = ops::transpose(ops::reshape(x, {channels, g * g}));
    out.grid = ops::linear(cells, params.grid_weight, params.grid_bias);
    out.grid_size = g;
  }
  return out;
}

}  // namespace mmbert
