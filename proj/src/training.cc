#include "mmbert/training.h"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include "mmbert/error.h"
#include "mmbert/ops.h"
#include "mmbert/tape.h"

namespace mmbert {
namespace {

constexpr std::string_view kMagic = "MMBC";
constexpr std::uint64_t kValStream = 0x76616c;    // validation masks
constexpr std::uint64_t kSplitStream = 0x73706c;  // train/val split

template <typename F>
void with_dtype(DType dt, F&& f) {
  if (dt == DType::kF32) {
    f.template operator()<float>();
  } else {
    f.template operator()<double>();
  }
}

void copy_values(Tensor& dst, const Tensor& src) {
  require(dst.shape() == src.shape(), ErrorKind::kShape,
          "copy: shape mismatch " + shape_string(dst.shape()) + " vs " + shape_string(src.shape()));
  const auto v = src.to_vector();
  with_dtype(dst.dtype(), [&]<typename T>() {
    auto out = dst.mutable_values<T>();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
  });
}

void log_line(const TrainConfig& cfg, const std::string& line) {
  if (cfg.log) *cfg.log << line << std::endl;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const std::string& what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::kCheckpointCorrupt,
          "checkpoint: malformed number for " + what);
  return v;
}

std::uint64_t parse_uint(std::string_view s, const std::string& what) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty(),
          ErrorKind::kCheckpointCorrupt, "checkpoint: malformed integer for " + what);
  return v;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

std::uint32_t crc_of(const std::string& bytes, std::size_t begin, std::size_t count) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + begin), static_cast<uInt>(count));
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
  std::string widths;
  for (std::size_t i = 0; i < kNumStages; ++i) widths += (i ? "," : "") + std::to_string(c.vision.widths[i]);
  return {
      {"hidden", std::to_string(c.hidden)},
      {"layers", std::to_string(c.layers)},
      {"heads", std::to_string(c.heads)},
      {"ffn", std::to_string(c.ffn)},
      {"max_text", std::to_string(c.max_text)},
      {"dropout", format_double(c.dropout)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"answer_count", std::to_string(c.answer_count)},
      {"category_count", std::to_string(c.category_count)},
      {"image_size", std::to_string(c.vision.input_size)},
      {"widths", widths},
      {"feature_mode", c.vision.mode == FeatureMode::kSpatial ? "spatial" : "multiscale"},
      {"gelu", c.gelu_exact ? "exact" : "tanh"},
      {"dtype", std::string(dtype_name(c.dtype))},
  };
}

void apply_config_entry(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "hidden") {
    c.hidden = parse_uint(value, key);
    c.vision.feature_dim = c.hidden;
  } else if (key == "layers") {
    c.layers = parse_uint(value, key);
  } else if (key == "heads") {
    c.heads = parse_uint(value, key);
  } else if (key == "ffn") {
    c.ffn = parse_uint(value, key);
  } else if (key == "max_text") {
    c.max_text = parse_uint(value, key);
  } else if (key == "dropout") {
    c.dropout = parse_double(value, key);
  } else if (key == "vocab_size") {
    c.vocab_size = parse_uint(value, key);
  } else if (key == "answer_count") {
    c.answer_count = parse_uint(value, key);
  } else if (key == "category_count") {
    c.category_count = parse_uint(value, key);
  } else if (key == "image_size") {
    c.vision.input_size = parse_uint(value, key);
  } else if (key == "widths") {
    std::stringstream ss(value);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
      require(i < kNumStages, ErrorKind::kCheckpointCorrupt, "checkpoint: too many widths");
      c.vision.widths[i++] = parse_uint(part, key);
    }
    require(i == kNumStages, ErrorKind::kCheckpointCorrupt, "checkpoint: too few widths");
  } else if (key == "feature_mode") {
    require(value == "spatial" || value == "multiscale", ErrorKind::kCheckpointCorrupt,
            "checkpoint: unknown feature mode " + value);
    c.vision.mode = value == "spatial" ? FeatureMode::kSpatial : FeatureMode::kMultiscale;
  } else if (key == "gelu") {
    c.gelu_exact = value == "exact";
    c.vision.gelu_exact = c.gelu_exact;
  } else if (key == "dtype") {
    require(value == "f32" || value == "f64", ErrorKind::kCheckpointCorrupt,
            "checkpoint: unknown dtype " + value);
    c.dtype = value == "f32" ? DType::kF32 : DType::kF64;
  } else {
    fail(ErrorKind::kCheckpointCorrupt, "checkpoint: unknown config key " + key);
  }
}

// ---- shared training loop ----

struct Contribution {
  Tensor logits;
  std::vector<int> targets;
};

struct ValScore {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct Task {
  std::size_t train_count = 0;
  std::function<std::optional<Contribution>(std::size_t index, Rng& rng)> item;
  std::function<ValScore()> validate;
  std::vector<std::string_view> trainable;
  bool select_by_accuracy = false;
  std::map<std::string, std::string> meta;
};

NamedTensors named_subset(const Model& model, std::span<const std::string_view> prefixes) {
  NamedTensors out;
  for (const auto& [name, t] : model.store().entries()) {
    for (std::string_view p : prefixes) {
      if (name.starts_with(p)) {
        out.emplace_back(name, t);
        break;
      }
    }
  }
  return out;
}

TrainResult run_training(Model& model, const Task& task, const TrainConfig& cfg, const Vocab& vocab,
                         const AnswerSpace* answers) {
  cfg.validate();
  const NamedTensors trainable = named_subset(model, task.trainable);
  AdamState adam;
  TrainResult result;
  std::vector<double> val_history;
  double lr = cfg.lr;
  bool have_best = false;
  double best_loss = std::numeric_limits<double>::infinity();
  double best_acc = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order(task.train_count);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::derive(cfg.seed, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0, contributions = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      std::vector<Tensor> logits;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        Rng rng(Rng::derive(cfg.seed, epoch + 1, order[i] + 1));
        auto c = task.item(order[i], rng);
        if (!c) continue;
        logits.push_back(c->logits);
        targets.insert(targets.end(), c->targets.begin(), c->targets.end());
      }
      if (logits.empty()) continue;
      contributions += logits.size();
      Tensor loss = ops::cross_entropy(ops::concat_rows(logits), targets);
      tape.backward(loss);
      clip_grad_norm(trainable, cfg.clip_norm);
      adam_step(trainable, adam, lr);
      model.store().clear_grads();
      loss_sum += loss.item();
      ++batches;
    }
    require(contributions > 0, ErrorKind::kEmptyLoss,
            "training: no sample produced a training target (nothing maskable?)");

    const ValScore val = task.validate();
    EpochStats stats{epoch, loss_sum / static_cast<double>(batches), val.loss, val.accuracy, lr};
    result.history.push_back(stats);
    val_history.push_back(val.loss);
    lr = plateau_schedule(val_history, cfg.lr, cfg.plateau);

    bool improved;
    if (task.select_by_accuracy) {
      improved = !have_best || val.accuracy > best_acc ||
                 (val.accuracy == best_acc && val.loss < best_loss);
    } else {
      improved = !have_best || val.loss < best_loss;
    }
    std::ostringstream line;
    line << "epoch " << epoch + 1 << " train_loss " << stats.train_loss << " val_loss " << val.loss
         << " val_acc " << val.accuracy << " lr " << stats.lr << (improved ? " *" : "");
    log_line(cfg, line.str());
    if (improved) {
      have_best = true;
      best_loss = val.loss;
      best_acc = val.accuracy;
      since_best = 0;
      result.best = capture(model, vocab, answers);
      result.best.epoch = epoch + 1;
      result.best.best_val_loss = val.loss;
      result.best.rng_state = shuffle_rng.serialize();
      result.best.meta = task.meta;
    } else if (cfg.early_stop > 0 && ++since_best >= cfg.early_stop) {
      log_line(cfg, "early stop after epoch " + std::to_string(epoch + 1));
      break;
    }
  }
  require(have_best, ErrorKind::kConfig, "training: max_epochs must be at least 1");
  return result;
}

template <typename Record>
std::pair<std::vector<Record>, std::vector<Record>> split_or_use(std::span<const Record> train,
                                                                  std::span<const Record> val,
                                                                  const TrainConfig& cfg) {
  std::vector<Record> tr(train.begin(), train.end());
  if (!val.empty()) return {tr, std::vector<Record>(val.begin(), val.end())};
  if (tr.size() < 2) return {tr, tr};
  std::vector<std::size_t> idx(tr.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::derive(cfg.seed, kSplitStream));
  rng.shuffle(idx);
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(cfg.val_fraction * static_cast<double>(tr.size()))), 1,
      tr.size() - 1);
  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> tr_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(tr_idx.begin(), tr_idx.end());
  std::vector<Record> a, b;
  for (std::size_t i : tr_idx) a.push_back(tr[i]);
  for (std::size_t i : val_idx) b.push_back(tr[i]);
  return {a, b};
}

Tensor image_tokens(const Model& model, const Image& img) {
  const ModelConfig& c = model.config();
  return encode_image(image_to_tensor(img, c.dtype), model.params().vision, c.vision).tokens();
}

std::vector<int> question_ids(const std::string& question, const Vocab& vocab) {
  return tokenize(question, vocab).ids;
}

// Masked-token MLM forward for one caption.
std::optional<Contribution> mlm_item(const Model& model, const Vocab& vocab, const Image& img,
                                     const CaptionRecord& rec, const MaskPolicy& policy,
                                     Rng& mask_rng, Rng* dropout_rng) {
  TokenSequence toks = tokenize(rec.caption, vocab, rec.keywords);
  MaskingOutcome masked = mask_keywords(toks, policy, mask_rng);
  if (masked.skippable) return std::nullopt;
  MultimodalSequence seq =
      assemble_sequence(image_tokens(model, img), masked.input_ids, model, 0, masked.labels);
  const auto pos = seq.masked_positions();
  if (pos.empty()) return std::nullopt;
  EncoderOutput out = encoder_forward(seq, model, dropout_rng);
  Contribution c;
  c.logits = mlm_logits(out, seq, pos, model);
  for (std::size_t p : pos) c.targets.push_back(seq.mlm_labels[p]);
  return c;
}

// Sums cross-entropy and counts argmax hits over rows.
void score_rows(const Contribution& c, double& loss_sum, std::size_t& rows, std::size_t& correct) {
  const Tensor loss = ops::cross_entropy(c.logits, c.targets);
  loss_sum += loss.item() * static_cast<double>(c.targets.size());
  rows += c.targets.size();
  const auto pred = argmax_rows(c.logits);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (static_cast<int>(pred[i]) == c.targets[i]) ++correct;
  }
}

}  // namespace

// ---- optimizer ----

void adam_step(const NamedTensors& params, AdamState& state, double lr) {
  for (const auto& [name, t] : params) {
    require(t.has_grad(), ErrorKind::kContract, "adam_step: parameter " + name + " has no gradient");
  }
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  require(state.m.size() == params.size(), ErrorKind::kContract,
          "adam_step: optimizer state does not match the parameter list");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    auto& m = state.m[k];
    auto& v = state.v[k];
    require(m.size() == p.numel(), ErrorKind::kContract,
            "adam_step: state size mismatch for " + params[k].first);
    with_dtype(p.dtype(), [&]<typename T>() {
      auto w = p.mutable_values<T>();
      auto g = p.grad_values<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
      }
    });
    p.clear_grad();
  }
}

double clip_grad_norm(const NamedTensors& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad_vector()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const double factor = max_norm / norm;
  for (const auto& [name, handle] : params) {
    if (!handle.has_grad()) continue;
    Tensor t = handle;
    with_dtype(t.dtype(), [&]<typename T>() {
      for (T& g : t.mutable_grad<T>()) g = static_cast<T>(g * factor);
    });
  }
  return norm;
}

// ---- schedule ----

void PlateauConfig::validate() const {
  require(patience >= 1, ErrorKind::kConfig, "plateau: patience must be at least 1");
  require(factor > 0.0 && factor < 1.0, ErrorKind::kConfig, "plateau: factor must lie in (0, 1)");
  require(min_lr >= 0.0, ErrorKind::kConfig, "plateau: min_lr must be non-negative");
}

double plateau_schedule(std::span<const double> history, double base_lr, const PlateauConfig& cfg) {
  cfg.validate();
  require(base_lr > 0.0, ErrorKind::kConfig, "plateau: base lr must be positive");
  double lr = base_lr;
  double best = std::numeric_limits<double>::infinity();
  std::size_t streak = 0;
  for (double loss : history) {
    if (loss < best) {
      best = loss;
      streak = 0;
      continue;
    }
    if (++streak >= cfg.patience) {
      lr = std::max(lr * cfg.factor, cfg.min_lr);
      streak = 0;
    }
  }
  return lr;
}

// ---- checkpoints ----

Checkpoint capture(const Model& model, const Vocab& vocab, const AnswerSpace* answers) {
  Checkpoint c;
  c.config = model.config();
  c.vocab = vocab.tokens();
  if (answers) c.answers = answers->answers();
  for (const auto& [name, t] : model.store().entries()) c.tensors.emplace_back(name, t.detach());
  return c;
}

Model instantiate(const Checkpoint& ckpt) {
  Model model(ckpt.config, 0);
  const auto& entries = model.store().entries();
  require(entries.size() == ckpt.tensors.size(), ErrorKind::kCheckpointCorrupt,
          "checkpoint: tensor count " + std::to_string(ckpt.tensors.size()) +
              " does not match the model's " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    require(entries[i].first == ckpt.tensors[i].first &&
                entries[i].second.shape() == ckpt.tensors[i].second.shape(),
            ErrorKind::kCheckpointCorrupt,
            "checkpoint: tensor " + ckpt.tensors[i].first + " does not match model parameter " +
                entries[i].first);
    Tensor dst = entries[i].second;
    copy_values(dst, ckpt.tensors[i].second);
  }
  return model;
}

void load_weights(Model& model, const Checkpoint& ckpt, std::span<const std::string_view> prefixes) {
  std::map<std::string, const Tensor*> source;
  for (const auto& [name, t] : ckpt.tensors) source[name] = &t;
  for (const auto& [name, handle] : model.store().entries()) {
    const bool wanted = std::any_of(prefixes.begin(), prefixes.end(),
                                    [&](std::string_view p) { return name.starts_with(p); });
    if (!wanted) continue;
    auto it = source.find(name);
    require(it != source.end(), ErrorKind::kCheckpointFingerprint,
            "checkpoint lacks parameter " + name);
    require(it->second->shape() == handle.shape(), ErrorKind::kCheckpointFingerprint,
            "checkpoint parameter " + name + " has shape " + shape_string(it->second->shape()) +
                ", model expects " + shape_string(handle.shape()));
    Tensor dst = handle;
    copy_values(dst, *it->second);
  }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string manifest;
  manifest += "fingerprint " + ckpt.config.fingerprint() + "\n";
  for (const auto& [k, v] : config_entries(ckpt.config)) manifest += "config " + k + " " + v + "\n";
  for (const auto& [k, v] : ckpt.meta) {
    require(k.find_first_of(" \n") == std::string::npos && v.find('\n') == std::string::npos,
            ErrorKind::kContract, "checkpoint: meta entries must be single-line");
    manifest += "meta " + k + " " + v + "\n";
  }
  for (const std::string& t : ckpt.vocab) manifest += "vocab " + t + "\n";
  for (const std::string& a : ckpt.answers) {
    require(a.find('\n') == std::string::npos, ErrorKind::kContract, "checkpoint: answer with newline");
    manifest += "answer " + a + "\n";
  }
  manifest += "epoch " + std::to_string(ckpt.epoch) + "\n";
  manifest += "best_val_loss " + format_double(ckpt.best_val_loss) + "\n";
  manifest += "rng " + ckpt.rng_state + "\n";
  for (const auto& [name, t] : ckpt.tensors) {
    manifest += "tensor " + name + " " + std::string(dtype_name(t.dtype())) + " " +
                std::to_string(t.rank());
    for (std::size_t d : t.shape()) manifest += " " + std::to_string(d);
    manifest += "\n";
  }
  manifest += "end\n";

  std::string payload;
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.dtype() == DType::kF32) {
      for (float f : t.values<float>()) put_u32(payload, std::bit_cast<std::uint32_t>(f));
    } else {
      for (double d : t.values<double>()) put_u64(payload, std::bit_cast<std::uint64_t>(d));
    }
  }
  std::string out(kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, manifest.size());
  out += manifest;
  out += payload;
  put_u32(out, crc_of(payload, 0, payload.size()));
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source,
                            const ModelConfig* expected) {
  const std::size_t header = kMagic.size() + 4 + 8;
  if (bytes.size() < kMagic.size() || bytes.compare(0, kMagic.size(), kMagic) != 0) {
    fail(ErrorKind::kCheckpointVersion, source + ": not a checkpoint (bad magic)");
  }
  require(bytes.size() >= header, ErrorKind::kCheckpointTruncated, source + ": truncated header");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, kMagic.size(), 4));
  require(version == kCheckpointVersion, ErrorKind::kCheckpointVersion,
          source + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t manifest_size = get_le(bytes, kMagic.size() + 4, 8);
  require(manifest_size <= bytes.size() - header, ErrorKind::kCheckpointTruncated,
          source + ": truncated manifest");
  const std::string manifest = bytes.substr(header, manifest_size);

  Checkpoint ckpt;
  std::string fingerprint;
  bool ended = false;
  std::vector<std::pair<std::string, Shape>> shapes;
  std::vector<DType> dtypes;
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    require(!ended, ErrorKind::kCheckpointCorrupt, source + ": data after manifest end");
    const std::size_t sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "end") {
      ended = true;
    } else if (key == "fingerprint") {
      fingerprint = rest;
    } else if (key == "config") {
      const std::size_t s2 = rest.find(' ');
      require(s2 != std::string::npos, ErrorKind::kCheckpointCorrupt, source + ": malformed config line");
      apply_config_entry(ckpt.config, rest.substr(0, s2), rest.substr(s2 + 1));
    } else if (key == "meta") {
      const std::size_t s2 = rest.find(' ');
      require(s2 != std::string::npos, ErrorKind::kCheckpointCorrupt, source + ": malformed meta line");
      ckpt.meta[rest.substr(0, s2)] = rest.substr(s2 + 1);
    } else if (key == "vocab") {
      ckpt.vocab.push_back(rest);
    } else if (key == "answer") {
      ckpt.answers.push_back(rest);
    } else if (key == "epoch") {
      ckpt.epoch = parse_uint(rest, "epoch");
    } else if (key == "best_val_loss") {
      ckpt.best_val_loss = parse_double(rest, "best_val_loss");
    } else if (key == "rng") {
      ckpt.rng_state = rest;
    } else if (key == "tensor") {
      std::istringstream ts(rest);
      std::string name, dt;
      std::size_t rank = 0;
      ts >> name >> dt >> rank;
      require(!ts.fail() && (dt == "f32" || dt == "f64") && rank >= 1 && rank <= 8,
              ErrorKind::kCheckpointCorrupt, source + ": malformed tensor line");
      Shape shape(rank);
      for (std::size_t& d : shape) ts >> d;
      require(!ts.fail(), ErrorKind::kCheckpointCorrupt, source + ": malformed tensor extents");
      shapes.emplace_back(name, shape);
      dtypes.push_back(dt == "f32" ? DType::kF32 : DType::kF64);
    } else {
      fail(ErrorKind::kCheckpointCorrupt, source + ": unknown manifest entry '" + key + "'");
    }
  }
  require(ended, ErrorKind::kCheckpointCorrupt, source + ": manifest lacks end marker");
  ckpt.config.vision.feature_dim = ckpt.config.hidden;
  require(ckpt.config.fingerprint() == fingerprint, ErrorKind::kCheckpointCorrupt,
          source + ": stored fingerprint does not match stored config");
  if (expected != nullptr && expected->fingerprint() != fingerprint) {
    fail(ErrorKind::kCheckpointFingerprint, source + ": checkpoint config [" + fingerprint +
                                                "] does not match the requested config [" +
                                                expected->fingerprint() + "]");
  }

  std::size_t payload_size = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    payload_size += shape_numel(shapes[i].second) * (dtypes[i] == DType::kF32 ? 4 : 8);
  }
  const std::size_t payload_begin = header + manifest_size;
  require(bytes.size() >= payload_begin + payload_size + 4, ErrorKind::kCheckpointTruncated,
          source + ": truncated payload (" + std::to_string(bytes.size()) + " bytes, expected " +
              std::to_string(payload_begin + payload_size + 4) + ")");
  require(bytes.size() == payload_begin + payload_size + 4, ErrorKind::kCheckpointCorrupt,
          source + ": trailing bytes after checksum");
  const auto stored_crc = static_cast<std::uint32_t>(get_le(bytes, payload_begin + payload_size, 4));
  require(stored_crc == crc_of(bytes, payload_begin, payload_size), ErrorKind::kCheckpointCorrupt,
          source + ": payload checksum mismatch");

  std::size_t pos = payload_begin;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::size_t n = shape_numel(shapes[i].second);
    Tensor t(shapes[i].second, dtypes[i]);
    if (dtypes[i] == DType::kF32) {
      auto out = t.mutable_values<float>();
      for (std::size_t j = 0; j < n; ++j, pos += 4) {
        out[j] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, pos, 4)));
      }
    } else {
      auto out = t.mutable_values<double>();
      for (std::size_t j = 0; j < n; ++j, pos += 8) out[j] = std::bit_cast<double>(get_le(bytes, pos, 8));
    }
    ckpt.tensors.emplace_back(shapes[i].first, std::move(t));
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string(), expected);
}

// ---- training loops ----

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kGeneral:
      return "general";
    case Variant::kExclusive:
      return "exclusive";
    case Variant::kNonPretrained:
      return "np";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
  if (name == "general") return Variant::kGeneral;
  if (name == "exclusive") return Variant::kExclusive;
  if (name == "np" || name == "non_pretrained") return Variant::kNonPretrained;
  return std::nullopt;
}

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.lr = 2e-5;
  c.plateau.patience = 5;
  c.max_epochs = 60;
  return c;
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.lr = 1e-4;
  c.plateau.patience = 10;
  c.max_epochs = 100;
  c.early_stop = 20;
  return c;
}

void TrainConfig::validate() const {
  require(lr > 0.0, ErrorKind::kConfig, "train: lr must be positive");
  plateau.validate();
  require(batch_size >= 1, ErrorKind::kConfig, "train: batch_size must be positive");
  require(val_fraction > 0.0 && val_fraction < 1.0, ErrorKind::kConfig,
          "train: val_fraction must lie in (0, 1)");
  require(category < kNumCategories, ErrorKind::kConfig, "train: unknown category index");
  augment.validate();
}

const Image& ImageCache::get(const std::filesystem::path& path) {
  auto it = images_.find(path.string());
  if (it != images_.end()) return it->second;
  Image img = decode_image(path);
  if (img.height != input_size_ || img.width != input_size_) {
    img = resize_bilinear(img, input_size_, input_size_);
  }
  return images_.emplace(path.string(), std::move(img)).first->second;
}

Image noise_image(std::size_t size, Rng& rng) {
  Image img(size, size);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

std::vector<VqaRecord> filter_category(std::span<const VqaRecord> records, std::size_t category) {
  std::vector<VqaRecord> out;
  for (const VqaRecord& r : records) {
    if (r.category == category) out.push_back(r);
  }
  require(!out.empty(), ErrorKind::kData,
          "no records in category " + std::string(kCategoryNames.at(category)));
  return out;
}

TrainResult pretrain(std::span<const CaptionRecord> train_in, std::span<const CaptionRecord> val_in,
                     const Vocab& vocab, const ModelConfig& model_cfg, const TrainConfig& cfg,
                     ImageCache& images) {
  require(!train_in.empty(), ErrorKind::kData, "pretrain: empty corpus");
  ModelConfig mc = model_cfg;
  mc.vocab_size = vocab.size();
  auto [train, val] = split_or_use(train_in, val_in, cfg);
  Model model(mc, cfg.seed);

  Task task;
  task.train_count = train.size();
  task.trainable = {kVisionPrefix, kEmbeddingPrefix, kEncoderPrefix, kMlmPrefix};
  task.meta = {{"phase", "pretrain"}};
  task.item = [&](std::size_t i, Rng& rng) {
    const Image img = augment(images.get(train[i].image), cfg.augment, rng);
    return mlm_item(model, vocab, img, train[i], cfg.mask, rng, &rng);
  };
  task.validate = [&]() {
    NoGradGuard guard;
    double loss = 0.0;
    std::size_t rows = 0, correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      Rng rng(Rng::derive(cfg.seed, kValStream, i));
      auto c = mlm_item(model, vocab, images.get(val[i].image), val[i], cfg.mask, rng, nullptr);
      if (c) score_rows(*c, loss, rows, correct);
    }
    if (rows == 0) return ValScore{0.0, 0.0};
    return ValScore{loss / static_cast<double>(rows), static_cast<double>(correct) / static_cast<double>(rows)};
  };
  return run_training(model, task, cfg, vocab, nullptr);
}

TrainResult finetune(std::span<const VqaRecord> train_in, std::span<const VqaRecord> val_in,
                     const AnswerSpace& answers, const Vocab& vocab, const Checkpoint* init,
                     const ModelConfig& model_cfg, const TrainConfig& cfg, ImageCache& images) {
  require(cfg.variant != Variant::kNonPretrained || init == nullptr, ErrorKind::kConfig,
          "finetune: the non-pretrained variant cannot take an initial checkpoint");
  std::vector<VqaRecord> train_all(train_in.begin(), train_in.end());
  std::vector<VqaRecord> val_all(val_in.begin(), val_in.end());
  if (cfg.variant == Variant::kExclusive) {
    train_all = filter_category(train_all, cfg.category);
    if (!val_all.empty()) val_all = filter_category(val_all, cfg.category);
  }
  require(!train_all.empty(), ErrorKind::kData, "finetune: empty training set");
  auto [train, val] = split_or_use<VqaRecord>(train_all, val_all, cfg);

  ModelConfig mc = model_cfg;
  mc.vocab_size = vocab.size();
  mc.answer_count = answers.size();
  Model model(mc, cfg.seed);
  if (init != nullptr) {
    require(init->vocab == vocab.tokens(), ErrorKind::kCheckpointFingerprint,
            "finetune: initial checkpoint was trained with a different vocabulary");
    const std::vector<std::string_view> backbone = {kVisionPrefix, kEmbeddingPrefix, kEncoderPrefix};
    load_weights(model, *init, backbone);
  }

  std::vector<std::vector<int>> train_ids, val_ids;
  std::vector<int> train_target, val_target;
  for (const auto& r : train) {
    train_ids.push_back(question_ids(r.question, vocab));
    const auto a = answers.find(r.answer);
    train_target.push_back(a ? static_cast<int>(*a) : -1);
  }
  for (const auto& r : val) {
    val_ids.push_back(question_ids(r.question, vocab));
    const auto a = answers.find(r.answer);
    val_target.push_back(a ? static_cast<int>(*a) : -1);
  }

  Task task;
  task.train_count = train.size();
  task.trainable = {kVisionPrefix, kEmbeddingPrefix, kEncoderPrefix, kVqaPrefix};
  task.select_by_accuracy = true;
  task.meta = {{"phase", "finetune"}, {"variant", std::string(variant_name(cfg.variant))}};
  if (cfg.variant == Variant::kExclusive) task.meta["category"] = std::string(kCategoryNames[cfg.category]);
  task.item = [&](std::size_t i, Rng& rng) -> std::optional<Contribution> {
    const Image img = augment(images.get(train[i].image), cfg.augment, rng);
    if (train_target[i] < 0) return std::nullopt;
    MultimodalSequence seq = assemble_sequence(image_tokens(model, img), train_ids[i], model);
    EncoderOutput out = encoder_forward(seq, model, &rng);
    return Contribution{vqa_logits(out, seq, model), {train_target[i]}};
  };
  task.validate = [&]() {
    NoGradGuard guard;
    double loss = 0.0;
    std::size_t rows = 0, correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (val_target[i] < 0) continue;
      MultimodalSequence seq = assemble_sequence(image_tokens(model, images.get(val[i].image)), val_ids[i], model);
      EncoderOutput out = encoder_forward(seq, model);
      score_rows(Contribution{vqa_logits(out, seq, model), {val_target[i]}}, loss, rows, correct);
    }
    const double n = static_cast<double>(val.size());
    return ValScore{rows ? loss / static_cast<double>(rows) : 0.0, static_cast<double>(correct) / n};
  };
  return run_training(model, task, cfg, vocab, &answers);
}

TrainResult train_router(std::span<const VqaRecord> train_in, std::span<const VqaRecord> val_in,
                         const Vocab& vocab, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  require(!train_in.empty(), ErrorKind::kData, "router: empty training set");
  auto [train, val] = split_or_use(train_in, val_in, cfg);
  ModelConfig mc = model_cfg;
  mc.vocab_size = vocab.size();
  mc.category_count = kNumCategories;
  Model model(mc, cfg.seed);

  Task task;
  task.train_count = train.size();
  task.trainable = {kEmbeddingPrefix, kEncoderPrefix, kCategoryPrefix};
  task.select_by_accuracy = true;
  task.meta = {{"phase", "router"}};
  auto forward = [&](const VqaRecord& r, Rng* rng) {
    MultimodalSequence seq = assemble_text_only(question_ids(r.question, vocab), model);
    EncoderOutput out = encoder_forward(seq, model, rng);
    return Contribution{category_logits(out, seq, model), {static_cast<int>(r.category)}};
  };
  task.item = [&](std::size_t i, Rng& rng) -> std::optional<Contribution> {
    return forward(train[i], &rng);
  };
  task.validate = [&]() {
    NoGradGuard guard;
    double loss = 0.0;
    std::size_t rows = 0, correct = 0;
    for (const auto& r : val) score_rows(forward(r, nullptr), loss, rows, correct);
    return ValScore{loss / static_cast<double>(rows), static_cast<double>(correct) / static_cast<double>(rows)};
  };
  return run_training(model, task, cfg, vocab, nullptr);
}

MlmScore evaluate_mlm(const Model& model, const Vocab& vocab, std::span<const CaptionRecord> records,
                      ImageCache& images, ImageSource source, std::uint64_t noise_seed) {
  NoGradGuard guard;
  const MaskPolicy all_keywords{1.0, 0.0};
  double loss = 0.0;
  std::size_t rows = 0, correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    Rng mask_rng(0);
    Image img;
    if (source == ImageSource::kNoise) {
      Rng noise(Rng::derive(noise_seed, i));
      img = noise_image(model.config().vision.input_size, noise);
    } else {
      img = images.get(records[i].image);
    }
    auto c = mlm_item(model, vocab, img, records[i], all_keywords, mask_rng, nullptr);
    if (c) score_rows(*c, loss, rows, correct);
  }
  MlmScore s;
  s.masked = rows;
  if (rows > 0) {
    s.accuracy = static_cast<double>(correct) / static_cast<double>(rows);
    s.loss = loss / static_cast<double>(rows);
  }
  return s;
}

}  // namespace mmbert
