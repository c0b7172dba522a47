#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmbert/grad_check.h"
#include "mmbert/ops.h"
#include "mmbert/tape.h"
#include "mmbert/vision.h"
#include "test_util.h"

using namespace mmbert;

namespace {

std::vector<std::uint8_t> ppm_bytes(const std::string& header, std::size_t pixel_bytes,
                                    std::uint8_t fill) {
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixel_bytes, fill);
  return out;
}

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image img(h, w);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

VisionConfig small_config(FeatureMode mode) {
  VisionConfig cfg;
  cfg.input_size = 32;
  cfg.widths = {3, 4, 4, 5, 5};
  cfg.feature_dim = 6;
  cfg.mode = mode;
  return cfg;
}

}  // namespace

TEST_CASE("decode_ppm examples") {
  Image white = decode_ppm(ppm_bytes("P6\n2 2\n255\n", 12, 255));
  CHECK(white.height == 2);
  CHECK(white.width == 2);
  for (float v : white.data) CHECK(v == 1.0f);
  Image black = decode_ppm(ppm_bytes("P6\n2 2\n255\n", 12, 0));
  for (float v : black.data) CHECK(v == 0.0f);

  CHECK_ERROR_KIND(decode_ppm(ppm_bytes("P6\n2 2\n255\n", 11, 0)), ErrorKind::kDecode);
  CHECK_ERROR_KIND(decode_ppm(ppm_bytes("P6\n2 2\n", 0, 0)), ErrorKind::kDecode);
  CHECK_ERROR_KIND(decode_ppm(ppm_bytes("P5\n2 2\n255\n", 12, 0)), ErrorKind::kDecode);
  CHECK_ERROR_KIND(decode_ppm(ppm_bytes("P6\n2 2\n65535\n", 24, 0)), ErrorKind::kDecode);
  // Comments in the header are skipped.
  CHECK(decode_ppm(ppm_bytes("P6\n# c\n2 2\n255\n", 12, 0)).width == 2);
}

TEST_CASE("ppm file round trip") {
  testing::TempDir dir("vision");
  Rng rng(3);
  Image img = random_image(5, 7, rng);
  for (float& v : img.data) v = std::round(v * 255.0f) / 255.0f;
  write_ppm(img, dir / "x.ppm");
  Image back = decode_image(dir / "x.ppm");
  REQUIRE(back.height == 5);
  REQUIRE(back.width == 7);
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == doctest::Approx(img.data[i]));
  CHECK_ERROR_KIND(decode_image(dir / "missing.ppm"), ErrorKind::kIo);
}

TEST_CASE("resize_bilinear examples") {
  Rng rng(5);
  Image img = random_image(9, 11, rng);
  CHECK(resize_bilinear(img, 9, 11) == img);

  Image constant(4, 6, 0.25f);
  Image up = resize_bilinear(constant, 13, 3);
  for (float v : up.data) CHECK(v == doctest::Approx(0.25f));

  // 2x2 checkerboard resized to 3x3: the centre samples all four pixels equally.
  Image board(2, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    board.at(c, 0, 0) = 1.0f;
    board.at(c, 1, 1) = 1.0f;
  }
  Image r = resize_bilinear(board, 3, 3);
  CHECK(r.at(0, 1, 1) == doctest::Approx(0.5f));
  CHECK_ERROR_KIND(resize_bilinear(board, 0, 3), ErrorKind::kShape);
}

TEST_CASE("augment identity and determinism") {
  Rng rng(11);
  Image img = random_image(16, 16, rng);

  AugmentConfig off;
  off.enabled = false;
  Rng r1(1);
  CHECK(augment(img, off, r1) == img);

  AugmentConfig zero;
  zero.crop_min = zero.crop_max = 1.0;
  zero.rotation_min = zero.rotation_max = 0.0;
  zero.brightness = zero.contrast = zero.saturation = 0.0;
  Rng r2(2);
  CHECK(augment(img, zero, r2) == img);

  AugmentConfig on;
  Rng a(7), b(7);
  Image ia = augment(img, on, a);
  Image ib = augment(img, on, b);
  CHECK(ia == ib);
  CHECK(a == b);
  for (float v : ia.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  // Disabled augmentation consumes the same draws as enabled.
  Rng c(7);
  (void)augment(img, off, c);
  CHECK(c == a);

  AugmentConfig bad;
  bad.crop_min = 0.0;
  Rng r3(3);
  CHECK_ERROR_KIND(augment(img, bad, r3), ErrorKind::kConfig);
}

TEST_CASE("multiscale encoder emits exactly five features") {
  VisionConfig cfg = small_config(FeatureMode::kMultiscale);
  CHECK(cfg.grid_size() == 1);
  CHECK(cfg.token_count() == 5);
  Rng rng(1);
  ParameterStore store;
  VisionParams p = VisionParams::create(cfg, rng, DType::kF32, store);
  Rng img_rng(2);
  Tensor x = image_to_tensor(random_image(32, 32, img_rng));
  ImageFeatures f = encode_image(x, p, cfg);
  CHECK(f.pooled.shape() == Shape{5, 6});
  CHECK(!f.grid.defined());
  CHECK(f.tokens().shape() == Shape{5, 6});

  // Purity.
  ImageFeatures again = encode_image(x, p, cfg);
  CHECK(f.pooled.bitwise_equal(again.pooled));

  Tensor wrong({3, 16, 16}, DType::kF32);
  CHECK_ERROR_KIND(encode_image(wrong, p, cfg), ErrorKind::kShape);
}

TEST_CASE("spatial encoder emits a grid") {
  VisionConfig cfg = small_config(FeatureMode::kSpatial);
  cfg.input_size = 64;
  CHECK(cfg.grid_size() == 2);
  CHECK(cfg.token_count() == 9);
  Rng rng(1);
  ParameterStore store;
  VisionParams p = VisionParams::create(cfg, rng, DType::kF32, store);
  Rng img_rng(2);
  ImageFeatures f = encode_image(image_to_tensor(random_image(64, 64, img_rng)), p, cfg);
  CHECK(f.grid.shape() == Shape{4, 6});
  CHECK(f.grid_size == 2);
  CHECK(f.tokens().shape() == Shape{9, 6});
}

TEST_CASE("zero image with zero biases gives zero pooled features") {
  VisionConfig cfg = small_config(FeatureMode::kMultiscale);
  Rng rng(4);
  ParameterStore store;
  VisionParams p = VisionParams::create(cfg, rng, DType::kF32, store);
  ImageFeatures f = encode_image(image_to_tensor(Image(32, 32)), p, cfg);
  for (double v : f.pooled.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("encode_image gradients match finite differences") {
  VisionConfig cfg = small_config(FeatureMode::kSpatial);
  cfg.input_size = 16;
  cfg.widths = {2, 2, 3, 3, 3};
  cfg.feature_dim = 3;
  cfg.gelu_exact = true;
  Rng rng(8);
  ParameterStore store;
  VisionParams p = VisionParams::create(cfg, rng, DType::kF64, store);
  // Non-zero biases so every path is exercised.
  for (const auto& [name, handle] : store.entries()) {
    if (!name.ends_with("bias")) continue;
    Tensor t = handle;
    for (double& x : t.mutable_values<double>()) x = 0.1 * rng.normal();
  }
  Rng img_rng(9);
  Tensor image = image_to_tensor(random_image(16, 16, img_rng), DType::kF64);
  Tensor weights = Tensor::from_values({1, 3}, {0.3, -0.7, 1.1}, DType::kF64);
  auto loss = [&]() {
    ImageFeatures f = encode_image(image, p, cfg);
    Tensor t = f.tokens();
    return ops::sum(ops::mul(t, ops::matmul(Tensor::full({t.dim(0), 1}, 1.0, DType::kF64), weights)));
  };
  std::vector<Tensor> params = store.tensors();
  Rng pick(10);
  CHECK(grad_check_params(loss, params, 1e-5, 6, pick) < 1e-6);

  auto of_image = [&](const Tensor& img) { return ops::sum(encode_image(img, p, cfg).tokens()); };
  CHECK(grad_check(of_image, image) < 1e-6);
}
