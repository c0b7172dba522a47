#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmbert/parameters.h"
#include "mmbert/random.h"
#include "mmbert/tensor.h"
#include "mmbert/vision.h"

namespace mmbert {

struct ModelConfig {
  std::size_t hidden = 128;
  std::size_t layers = 4;
  std::size_t heads = 3;  // per layer
  std::size_t ffn = 0;    // 0 -> 4 * hidden
  std::size_t max_text = 64;
  double dropout = 0.1;
  std::size_t vocab_size = 0;
  std::size_t answer_count = 2;
  std::size_t category_count = 5;
  VisionConfig vision;
  DType dtype = DType::kF32;
  bool gelu_exact = false;

  std::size_t ffn_dim() const { return ffn == 0 ? 4 * hidden : ffn; }
  std::size_t head_dim() const { return hidden / heads; }
  std::size_t image_tokens() const { return vision.token_count(); }
  // Rows of the shared position table.
  std::size_t position_count() const;
  void validate() const;
  // Canonical text of every field that determines parameter shapes.
  std::string fingerprint() const;
};

struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;
};

struct DenseHead {
  Tensor dense_weight, dense_bias;
  Tensor out_weight, out_bias;
};

struct ModelParams {
  VisionParams vision;
  Tensor token_embedding;     // [V x D]
  Tensor position_embedding;  // [P x D]
  Tensor segment_embedding;   // [2 x D]
  std::vector<EncoderLayerParams> layers;
  Tensor final_gamma, final_beta;
  DenseHead mlm;
  Tensor mlm_ln_gamma, mlm_ln_beta;
  DenseHead vqa;
  DenseHead category;
};

// Parameter name prefixes, used to select what a training phase updates.
inline constexpr std::string_view kVisionPrefix = "vision.";
inline constexpr std::string_view kEmbeddingPrefix = "embedding.";
inline constexpr std::string_view kEncoderPrefix = "encoder.";
inline constexpr std::string_view kMlmPrefix = "head.mlm.";
inline constexpr std::string_view kVqaPrefix = "head.vqa.";
inline constexpr std::string_view kCategoryPrefix = "head.category.";

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  // Parameters whose names start with any of the prefixes.
  std::vector<Tensor> select(std::span<const std::string_view> prefixes) const;

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  ModelParams params_;
};

// Layout: [CLS] image... [SEP] text... [SEP] [PAD]...
struct MultimodalSequence {
  Tensor embeddings;  // [T x D]
  std::vector<int> token_ids;  // -1 at image positions
  std::vector<int> segment_ids;
  std::vector<std::size_t> position_ids;
  std::vector<std::uint8_t> valid;  // 0 at padding
  std::vector<int> mlm_labels;      // per position, ops::kIgnoreIndex if unused
  std::size_t image_count = 0;
  std::size_t text_begin = 0;
  std::size_t text_count = 0;

  std::size_t length() const { return valid.size(); }
  bool is_text(std::size_t pos) const { return pos >= text_begin && pos < text_begin + text_count; }
  // Positions carrying an MLM label, ascending.
  std::vector<std::size_t> masked_positions() const;
};

// image_tokens: [n_img x D]. Text longer than max_text is truncated; pad_to
// (0 = no padding) pads the sequence with [PAD] up to that length.
MultimodalSequence assemble_sequence(const Tensor& image_tokens, std::span<const int> text_ids,
                                     const Model& model, std::size_t pad_to = 0,
                                     std::span<const int> mlm_labels = {});
// [CLS] text... [SEP] [PAD]...
MultimodalSequence assemble_text_only(std::span<const int> text_ids, const Model& model,
                                      std::size_t pad_to = 0);

struct EncoderOutput {
  Tensor hidden;  // [T x D], after the final layer norm
  // Per layer, [H x T x T] detached attention probabilities.
  std::vector<Tensor> attention;
};

// Training mode (dropout active) when dropout_rng is non-null.
EncoderOutput encoder_forward(const MultimodalSequence& seq, const Model& model,
                              Rng* dropout_rng = nullptr);

// [|positions| x V]; an undefined tensor when positions is empty.
Tensor mlm_logits(const EncoderOutput& out, const MultimodalSequence& seq,
                  std::span<const std::size_t> positions, const Model& model);
// [1 x A]
Tensor vqa_logits(const EncoderOutput& out, const MultimodalSequence& seq, const Model& model);
// [1 x C]
Tensor category_logits(const EncoderOutput& out, const MultimodalSequence& seq, const Model& model);

// Index of the largest entry of each row; ties resolve to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace mmbert
