#include "mmbert/model.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mmbert/error.h"
#include "mmbert/ops.h"
#include "mmbert/tokenizer.h"

namespace mmbert {
namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-6;

Tensor weight(ParameterStore& store, const std::string& name, Shape shape, Rng& rng, DType dtype) {
  return store.add(name, init::normal(std::move(shape), kInitStd, rng, dtype));
}

Tensor zeros(ParameterStore& store, const std::string& name, Shape shape, DType dtype) {
  return store.add(name, init::zeros(std::move(shape), dtype));
}

Tensor ones(ParameterStore& store, const std::string& name, Shape shape, DType dtype) {
  return store.add(name, init::ones(std::move(shape), dtype));
}

DenseHead make_head(ParameterStore& store, const std::string& prefix, std::size_t d,
                    std::size_t out, Rng& rng, DType dtype) {
  DenseHead h;
  h.dense_weight = weight(store, prefix + "dense.weight", {d, d}, rng, dtype);
  h.dense_bias = zeros(store, prefix + "dense.bias", {d}, dtype);
  h.out_weight = weight(store, prefix + "out.weight", {d, out}, rng, dtype);
  h.out_bias = zeros(store, prefix + "out.bias", {out}, dtype);
  return h;
}

Tensor pooled_head(const EncoderOutput& out, const MultimodalSequence& seq, const DenseHead& head,
                   bool exact) {
  Tensor pooled = ops::masked_mean_rows(out.hidden, seq.valid);
  Tensor h = ops::gelu(ops::linear(pooled, head.dense_weight, head.dense_bias), exact);
  return ops::linear(h, head.out_weight, head.out_bias);
}

Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  if (rng == nullptr || rate == 0.0) return x;
  return ops::dropout(x, rate, *rng);
}

// Shared tail of both layouts: content rows are already in sequence order.
MultimodalSequence finish(MultimodalSequence seq, std::vector<Tensor> content, const Model& model,
                          std::size_t pad_to) {
  const ModelParams& p = model.params();
  const std::size_t used = seq.valid.size();
  if (pad_to > used) {
    const std::size_t extra = pad_to - used;
    const std::vector<std::size_t> pad_rows(extra, static_cast<std::size_t>(kPadId));
    content.push_back(ops::gather_rows(p.token_embedding, pad_rows));
    seq.token_ids.insert(seq.token_ids.end(), extra, kPadId);
    seq.segment_ids.insert(seq.segment_ids.end(), extra, 1);
    seq.position_ids.insert(seq.position_ids.end(), extra, 0);
    seq.valid.insert(seq.valid.end(), extra, 0);
    seq.mlm_labels.insert(seq.mlm_labels.end(), extra, ops::kIgnoreIndex);
  }
  std::vector<std::size_t> segments(seq.segment_ids.begin(), seq.segment_ids.end());
  Tensor x = ops::concat_rows(content);
  x = ops::add(x, ops::gather_rows(p.position_embedding, seq.position_ids));
  x = ops::add(x, ops::gather_rows(p.segment_embedding, segments));
  seq.embeddings = x;
  return seq;
}

std::vector<std::size_t> checked_rows(std::span<const int> ids, std::size_t vocab) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab, ErrorKind::kContract,
            "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    rows.push_back(static_cast<std::size_t>(id));
  }
  return rows;
}

}  // namespace

std::size_t ModelConfig::position_count() const {
  return std::max(image_tokens(), max_text) + 1;
}

void ModelConfig::validate() const {
  require(hidden >= 1 && layers >= 1 && heads >= 1, ErrorKind::kConfig,
          "model: hidden, layers and heads must be positive");
  require(hidden % heads == 0, ErrorKind::kConfig,
          "model: hidden dim " + std::to_string(hidden) + " not divisible by heads " +
              std::to_string(heads));
  require(max_text >= 1, ErrorKind::kConfig, "model: max_text must be positive");
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::kConfig, "model: dropout must lie in [0, 1)");
  require(vocab_size > static_cast<std::size_t>(kNumSpecialTokens), ErrorKind::kConfig,
          "model: vocab_size must exceed the special tokens");
  require(answer_count >= 2, ErrorKind::kConfig, "model: answer_count must be at least 2");
  require(category_count >= 1, ErrorKind::kConfig, "model: category_count must be positive");
  require(vision.feature_dim == hidden, ErrorKind::kConfig,
          "model: vision feature dim must equal hidden dim");
  vision.validate();
}

std::string ModelConfig::fingerprint() const {
  std::ostringstream os;
  os << "hidden=" << hidden << ";layers=" << layers << ";heads=" << heads << ";ffn=" << ffn_dim()
     << ";max_text=" << max_text << ";vocab=" << vocab_size << ";answers=" << answer_count
     << ";categories=" << category_count << ";image_size=" << vision.input_size << ";widths=";
  for (std::size_t i = 0; i < kNumStages; ++i) os << (i ? "," : "") << vision.widths[i];
  os << ";mode=" << (vision.mode == FeatureMode::kSpatial ? "spatial" : "multiscale")
     << ";gelu=" << (gelu_exact ? "exact" : "tanh") << ";dtype=" << dtype_name(dtype);
  return os.str();
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.vision.gelu_exact = cfg_.gelu_exact;
  cfg_.validate();
  Rng rng(seed);
  const DType dt = cfg_.dtype;
  const std::size_t d = cfg_.hidden;
  params_.vision = VisionParams::create(cfg_.vision, rng, dt, store_);
  params_.token_embedding = weight(store_, "embedding.token", {cfg_.vocab_size, d}, rng, dt);
  params_.position_embedding =
      weight(store_, "embedding.position", {cfg_.position_count(), d}, rng, dt);
  params_.segment_embedding = weight(store_, "embedding.segment", {2, d}, rng, dt);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "encoder.layer" + std::to_string(l) + ".";
    EncoderLayerParams L;
    L.ln1_gamma = ones(store_, pre + "ln1.gamma", {d}, dt);
    L.ln1_beta = zeros(store_, pre + "ln1.beta", {d}, dt);
    L.wq = weight(store_, pre + "attn.q.weight", {d, d}, rng, dt);
    L.bq = zeros(store_, pre + "attn.q.bias", {d}, dt);
    L.wk = weight(store_, pre + "attn.k.weight", {d, d}, rng, dt);
    L.bk = zeros(store_, pre + "attn.k.bias", {d}, dt);
    L.wv = weight(store_, pre + "attn.v.weight", {d, d}, rng, dt);
    L.bv = zeros(store_, pre + "attn.v.bias", {d}, dt);
    L.wo = weight(store_, pre + "attn.out.weight", {d, d}, rng, dt);
    L.bo = zeros(store_, pre + "attn.out.bias", {d}, dt);
    L.ln2_gamma = ones(store_, pre + "ln2.gamma", {d}, dt);
    L.ln2_beta = zeros(store_, pre + "ln2.beta", {d}, dt);
    L.w1 = weight(store_, pre + "ffn.in.weight", {d, cfg_.ffn_dim()}, rng, dt);
    L.b1 = zeros(store_, pre + "ffn.in.bias", {cfg_.ffn_dim()}, dt);
    L.w2 = weight(store_, pre + "ffn.out.weight", {cfg_.ffn_dim(), d}, rng, dt);
    L.b2 = zeros(store_, pre + "ffn.out.bias", {d}, dt);
    params_.layers.push_back(std::move(L));
  }
  params_.final_gamma = ones(store_, "encoder.final_ln.gamma", {d}, dt);
  params_.final_beta = zeros(store_, "encoder.final_ln.beta", {d}, dt);
  params_.mlm = make_head(store_, "head.mlm.", d, cfg_.vocab_size, rng, dt);
  params_.mlm_ln_gamma = ones(store_, "head.mlm.ln.gamma", {d}, dt);
  params_.mlm_ln_beta = zeros(store_, "head.mlm.ln.beta", {d}, dt);
  params_.vqa = make_head(store_, "head.vqa.", d, cfg_.answer_count, rng, dt);
  params_.category = make_head(store_, "head.category.", d, cfg_.category_count, rng, dt);
}

std::vector<Tensor> Model::select(std::span<const std::string_view> prefixes) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : store_.entries()) {
    for (std::string_view p : prefixes) {
      if (name.starts_with(p)) {
        out.push_back(t);
        break;
      }
    }
  }
  return out;
}

std::vector<std::size_t> MultimodalSequence::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mlm_labels.size(); ++i) {
    if (mlm_labels[i] != ops::kIgnoreIndex) out.push_back(i);
  }
  return out;
}

MultimodalSequence assemble_sequence(const Tensor& image_tokens, std::span<const int> text_ids,
                                     const Model& model, std::size_t pad_to,
                                     std::span<const int> mlm_labels) {
  const ModelConfig& cfg = model.config();
  const ModelParams& p = model.params();
  require(image_tokens.rank() == 2 && image_tokens.dim(1) == cfg.hidden, ErrorKind::kShape,
          "assemble_sequence: image features " + shape_string(image_tokens.shape()) +
              " do not match hidden dim " + std::to_string(cfg.hidden));
  require(image_tokens.dim(0) < cfg.position_count(), ErrorKind::kShape,
          "assemble_sequence: too many image tokens");
  require(mlm_labels.empty() || mlm_labels.size() == text_ids.size(), ErrorKind::kContract,
          "assemble_sequence: label count differs from token count");
  const std::size_t n_img = image_tokens.dim(0);
  const std::size_t n_txt = std::min(text_ids.size(), cfg.max_text);
  const auto text = text_ids.first(n_txt);

  MultimodalSequence seq;
  seq.image_count = n_img;
  seq.text_begin = n_img + 2;
  seq.text_count = n_txt;
  seq.token_ids.push_back(kClsId);
  seq.token_ids.insert(seq.token_ids.end(), n_img, -1);
  seq.token_ids.push_back(kSepId);
  seq.token_ids.insert(seq.token_ids.end(), text.begin(), text.end());
  seq.token_ids.push_back(kSepId);

  seq.segment_ids.assign(n_img + 2, 0);
  seq.segment_ids.insert(seq.segment_ids.end(), n_txt + 1, 1);

  seq.position_ids.push_back(0);
  for (std::size_t i = 0; i < n_img; ++i) seq.position_ids.push_back(i);
  seq.position_ids.push_back(n_img);
  for (std::size_t i = 0; i < n_txt; ++i) seq.position_ids.push_back(i);
  seq.position_ids.push_back(n_txt);

  seq.valid.assign(seq.token_ids.size(), 1);
  seq.mlm_labels.assign(seq.token_ids.size(), ops::kIgnoreIndex);
  for (std::size_t i = 0; i < n_txt && !mlm_labels.empty(); ++i) {
    seq.mlm_labels[seq.text_begin + i] = mlm_labels[i];
  }

  std::vector<int> tail{kSepId};
  tail.insert(tail.end(), text.begin(), text.end());
  tail.push_back(kSepId);
  const std::vector<std::size_t> cls_row{static_cast<std::size_t>(kClsId)};
  std::vector<Tensor> content{ops::gather_rows(p.token_embedding, cls_row), image_tokens,
                              ops::gather_rows(p.token_embedding, checked_rows(tail, cfg.vocab_size))};
  if (n_img == 0) content.erase(content.begin() + 1);
  return finish(std::move(seq), std::move(content), model, pad_to);
}

MultimodalSequence assemble_text_only(std::span<const int> text_ids, const Model& model,
                                      std::size_t pad_to) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_txt = std::min(text_ids.size(), cfg.max_text);
  const auto text = text_ids.first(n_txt);
  MultimodalSequence seq;
  seq.text_begin = 1;
  seq.text_count = n_txt;
  seq.token_ids.push_back(kClsId);
  seq.token_ids.insert(seq.token_ids.end(), text.begin(), text.end());
  seq.token_ids.push_back(kSepId);
  seq.segment_ids.push_back(0);
  seq.segment_ids.insert(seq.segment_ids.end(), n_txt + 1, 1);
  seq.position_ids.push_back(0);
  for (std::size_t i = 0; i < n_txt; ++i) seq.position_ids.push_back(i);
  seq.position_ids.push_back(n_txt);
  seq.valid.assign(seq.token_ids.size(), 1);
  seq.mlm_labels.assign(seq.token_ids.size(), ops::kIgnoreIndex);
  std::vector<Tensor> content{
      ops::gather_rows(model.params().token_embedding, checked_rows(seq.token_ids, cfg.vocab_size))};
  return finish(std::move(seq), std::move(content), model, pad_to);
}

EncoderOutput encoder_forward(const MultimodalSequence& seq, const Model& model, Rng* dropout_rng) {
  const ModelConfig& cfg = model.config();
  const ModelParams& p = model.params();
  require(seq.embeddings.defined() && seq.embeddings.rank() == 2 &&
              seq.embeddings.dim(0) == seq.length() && seq.embeddings.dim(1) == cfg.hidden,
          ErrorKind::kShape, "encoder_forward: malformed sequence");
  const std::size_t t = seq.length();
  const std::size_t heads = cfg.heads;
  const std::size_t dk = cfg.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  const double rate = cfg.dropout;

  EncoderOutput out;
  Tensor x = maybe_dropout(seq.embeddings, rate, dropout_rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const EncoderLayerParams& L = p.layers[l];
    try {
      Tensor h = ops::layer_norm(x, L.ln1_gamma, L.ln1_beta, kLayerNormEps);
      Tensor q = ops::linear(h, L.wq, L.bq);
      Tensor k = ops::linear(h, L.wk, L.bk);
      Tensor v = ops::linear(h, L.wv, L.bv);
      std::vector<Tensor> contexts;
      std::vector<double> maps;
      maps.reserve(heads * t * t);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        Tensor qh = ops::slice_cols(q, hd * dk, dk);
        Tensor kh = ops::slice_cols(k, hd * dk, dk);
        Tensor vh = ops::slice_cols(v, hd * dk, dk);
        Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_dk);
        Tensor probs = ops::masked_softmax(scores, seq.valid);
        const auto pv = probs.to_vector();
        maps.insert(maps.end(), pv.begin(), pv.end());
        contexts.push_back(ops::matmul(maybe_dropout(probs, rate, dropout_rng), vh));
      }
      out.attention.push_back(Tensor::from_values({heads, t, t}, maps, cfg.dtype));
      Tensor attn = ops::linear(ops::concat_cols(contexts), L.wo, L.bo);
      x = ops::add(x, maybe_dropout(attn, rate, dropout_rng));
      Tensor h2 = ops::layer_norm(x, L.ln2_gamma, L.ln2_beta, kLayerNormEps);
      Tensor ff = ops::gelu(ops::linear(h2, L.w1, L.b1), cfg.gelu_exact);
      ff = ops::linear(ff, L.w2, L.b2);
      x = ops::add(x, maybe_dropout(ff, rate, dropout_rng));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNumeric) throw;
      fail(ErrorKind::kNumeric, "encoder layer " + std::to_string(l) + ": " + e.what());
    }
  }
  out.hidden = ops::layer_norm(x, p.final_gamma, p.final_beta, kLayerNormEps);
  return out;
}

Tensor mlm_logits(const EncoderOutput& out, const MultimodalSequence& seq,
                  std::span<const std::size_t> positions, const Model& model) {
  const ModelParams& p = model.params();
  for (std::size_t pos : positions) {
    require(seq.is_text(pos), ErrorKind::kContract,
            "mlm_logits: position " + std::to_string(pos) + " is outside the text region");
  }
  if (positions.empty()) return Tensor();
  Tensor rows = ops::gather_rows(out.hidden, positions);
  Tensor h = ops::gelu(ops::linear(rows, p.mlm.dense_weight, p.mlm.dense_bias),
                       model.config().gelu_exact);
  h = ops::layer_norm(h, p.mlm_ln_gamma, p.mlm_ln_beta, kLayerNormEps);
  return ops::linear(h, p.mlm.out_weight, p.mlm.out_bias);
}

Tensor vqa_logits(const EncoderOutput& out, const MultimodalSequence& seq, const Model& model) {
  return pooled_head(out, seq, model.params().vqa, model.config().gelu_exact);
}

Tensor category_logits(const EncoderOutput& out, const MultimodalSequence& seq, const Model& model) {
  require(seq.image_count == 0, ErrorKind::kContract,
          "category_logits: sequence contains image tokens");
  return pooled_head(out, seq, model.params().category, model.config().gelu_exact);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  require(logits.rank() == 2 && logits.dim(1) >= 1, ErrorKind::kShape, "argmax_rows: need 2-D logits");
  const auto v = logits.to_vector();
  const std::size_t n = logits.dim(1);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c) {
      if (v[r * n + c] > v[r * n + best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace mmbert
