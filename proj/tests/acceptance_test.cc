// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "bleu_oracle.h"
#include "mmbert/data.h"
#include "mmbert/error.h"
#include "mmbert/evaluation.h"
#include "mmbert/grad_check.h"
#include "mmbert/interpretability.h"
#include "mmbert/model.h"
#include "mmbert/ops.h"
#include "mmbert/tape.h"
#include "mmbert/training.h"
#include "op_cases.h"

using namespace mmbert;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Synthetic oracle shared by criteria 3, 4, 6 and 8.
constexpr std::size_t kCanvas = 64;
constexpr std::size_t kFinetuneImages = 150;

ModelConfig synthetic_model(std::size_t vocab_size) {
  ModelConfig c;
  c.hidden = 48;
  c.layers = 2;
  c.heads = 3;
  c.max_text = 16;
  c.dropout = 0.0;
  c.vocab_size = vocab_size;
  c.vision.input_size = kCanvas;
  c.vision.widths = {8, 16, 16, 32, 32};
  c.vision.feature_dim = 48;
  c.vision.mode = FeatureMode::kSpatial;
  return c;
}

TrainConfig synthetic_train(TrainConfig c, std::size_t epochs) {
  c.lr = 1e-3;
  c.max_epochs = epochs;
  c.augment.enabled = false;
  return c;
}

struct World {
  fs::path root;
  SyntheticSpec spec;
  SyntheticLayout layout;
  Vocab vocab;
  std::vector<CaptionRecord> cap_train, cap_val, cap_test;
  std::vector<VqaRecord> vqa_train, vqa_val, vqa_test;
  std::unordered_map<std::string, Box> boxes;
  std::optional<ImageCache> cache;

  std::optional<Checkpoint> pretrained;
  std::optional<Checkpoint> finetuned;
  std::optional<AnswerSpace> answers;
};

World make_world(const fs::path& root) {
  World w;
  w.root = root;
  w.spec.canvas = kCanvas;
  w.spec.object_size = kCanvas * 20 / 64;
  w.spec.seed = 0;
  w.layout = gen_synthetic(w.spec, root);
  w.cap_train = load_caption_corpus(w.layout.captions_train).records;
  w.cap_val = load_caption_corpus(w.layout.captions_val).records;
  w.cap_test = load_caption_corpus(w.layout.captions_test).records;
  auto all = load_vqa_dataset(w.layout.vqa_train).records;
  // Finetuning budget: the first kFinetuneImages training images.
  std::set<std::string> seen;
  for (const VqaRecord& r : all) {
    seen.insert(r.image.string());
    if (seen.size() > kFinetuneImages) break;
    w.vqa_train.push_back(r);
  }
  w.vqa_val = load_vqa_dataset(w.layout.vqa_val).records;
  w.vqa_test = load_vqa_dataset(w.layout.vqa_test).records;
  w.boxes = load_boxes(w.layout.boxes);
  std::vector<std::string> corpus;
  for (const auto& r : w.cap_train) corpus.push_back(r.caption);
  for (const auto& r : all) corpus.push_back(r.question);
  w.vocab = Vocab::build(corpus, 200);
  w.cache.emplace(kCanvas);
  w.answers = AnswerSpace::build(w.vqa_train);
  return w;
}

// ---- criterion 1 ----

ModelConfig toy_config() {
  ModelConfig c;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_text = 8;
  c.dropout = 0.0;
  c.vocab_size = 12;
  c.answer_count = 3;
  c.vision.input_size = 16;
  c.vision.widths = {2, 2, 3, 3, 3};
  c.vision.feature_dim = 16;
  c.vision.mode = FeatureMode::kSpatial;
  c.dtype = DType::kF64;
  c.gelu_exact = true;
  return c;
}

Tensor random_image(std::size_t size, Rng& rng, DType dtype) {
  std::vector<double> v(3 * size * size);
  for (double& x : v) x = rng.uniform();
  return Tensor::from_values({3, size, size}, v, dtype);
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  constexpr int kPoints = 20;
  double worst_op = 0.0;
  std::string worst_name;
  Rng rng(2024);
  const auto cases = testing::op_cases(rng);
  for (const testing::OpCase& c : cases) {
    for (int p = 0; p < kPoints; ++p) {
      const double e = grad_check(c.f, testing::random_tensor(c.shape, rng, DType::kF64, 2.0), 1e-5);
      if (e > worst_op) {
        worst_op = e;
        worst_name = c.name;
      }
    }
  }

  // Composite loss: MLM + VQA cross-entropy through vision, assembly and encoder,
  // plus the text-only router loss, at kPoints random inputs.
  Model m(toy_config(), 8);
  std::vector<Tensor> params = m.store().tensors();
  double worst_model = 0.0;
  for (int p = 0; p < kPoints; ++p) {
    Rng data(100 + p);
    Tensor image = random_image(16, data, DType::kF64);
    std::vector<int> text;
    for (int i = 0; i < 4; ++i) text.push_back(5 + static_cast<int>(data.uniform_int(7)));
    std::vector<int> labels(text.size(), ops::kIgnoreIndex);
    labels[data.uniform_int(text.size())] = 5 + static_cast<int>(data.uniform_int(7));
    const int answer = static_cast<int>(data.uniform_int(3));
    const int category = static_cast<int>(data.uniform_int(5));
    auto loss = [&]() {
      Tensor tokens = encode_image(image, m.params().vision, m.config().vision).tokens();
      MultimodalSequence seq = assemble_sequence(tokens, text, m, 0, labels);
      EncoderOutput out = encoder_forward(seq, m);
      const auto pos = seq.masked_positions();
      std::vector<int> targets;
      for (std::size_t q : pos) targets.push_back(seq.mlm_labels[q]);
      const std::vector<int> a{answer};
      Tensor l = ops::add(ops::cross_entropy(mlm_logits(out, seq, pos, m), targets),
                          ops::cross_entropy(vqa_logits(out, seq, m), a));
      MultimodalSequence tseq = assemble_text_only(text, m);
      const std::vector<int> c{category};
      return ops::add(l, ops::cross_entropy(category_logits(encoder_forward(tseq, m), tseq, m), c));
    };
    Rng pick(300 + p);
    worst_model = std::max(worst_model, grad_check_params(loss, params, 1e-5, 1, pick));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_op < 1e-6 && worst_model < 1e-6 && secs < 60.0;
  o.detail = std::to_string(cases.size()) + " ops x 20 points max rel err " + fmt("%.2e", worst_op) +
             " (" + worst_name + "); composite loss x 20 points " + fmt("%.2e", worst_model) + "; " +
             fmt("%.1f", secs) + "s";
  return o;
}

// ---- criterion 2 ----

Outcome attention_invariants() {
  ModelConfig cfg = toy_config();
  cfg.dtype = DType::kF32;
  Model m32(cfg, 3);
  Model m64(toy_config(), 11);
  double worst_row = 0.0;
  double padded_attention = 0.0;
  double padded_grad = 0.0;
  double unpadded_grad = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(500 + trial);
    const std::size_t n = 1 + rng.uniform_int(6);
    std::vector<int> text;
    for (std::size_t i = 0; i < n; ++i) text.push_back(5 + static_cast<int>(rng.uniform_int(7)));
    const std::size_t image_n = m32.config().image_tokens();
    const std::size_t pad_to = image_n + n + 3 + 1 + rng.uniform_int(5);

    Tensor img = encode_image(random_image(16, rng, DType::kF32), m32.params().vision, cfg.vision).tokens();
    MultimodalSequence seq = assemble_sequence(img, text, m32, pad_to);
    EncoderOutput out = encoder_forward(seq, m32);
    const std::size_t t = seq.length();
    for (const Tensor& a : out.attention) {
      const auto v = a.to_vector();
      for (std::size_t r = 0; r < v.size() / t; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < t; ++c) {
          if (seq.valid[c]) {
            s += v[r * t + c];
          } else {
            padded_attention = std::max(padded_attention, std::abs(v[r * t + c]));
          }
        }
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    }

    // Gradient w.r.t. the assembled embeddings at padded rows.
    Tensor img64 = encode_image(random_image(16, rng, DType::kF64), m64.params().vision,
                                m64.config().vision).tokens();
    std::vector<int> labels(n, ops::kIgnoreIndex);
    labels[0] = 9;
    MultimodalSequence s64 = assemble_sequence(img64, text, m64, pad_to, labels);
    s64.embeddings = s64.embeddings.detach();
    s64.embeddings.set_requires_grad(true);
    Tape tape;
    EncoderOutput o64 = encoder_forward(s64, m64);
    const auto pos = s64.masked_positions();
    const std::vector<int> targets{9};
    const std::vector<int> answer{1};
    Tensor loss = ops::add(ops::cross_entropy(mlm_logits(o64, s64, pos, m64), targets),
                           ops::cross_entropy(vqa_logits(o64, s64, m64), answer));
    tape.backward(loss);
    const auto g = s64.embeddings.grad_vector();
    const std::size_t d = m64.config().hidden;
    for (std::size_t r = 0; r < s64.length(); ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        (s64.valid[r] ? unpadded_grad : padded_grad) += std::abs(g[r * d + c]);
      }
    }
  }
  Outcome o;
  o.pass = worst_row <= 1e-5 && padded_attention == 0.0 && padded_grad == 0.0 && unpadded_grad > 0.0;
  o.detail = "20 padded sequences: max |row sum - 1| " + fmt("%.2e", worst_row) +
             ", max padded-key attention " + fmt("%g", padded_attention) + ", padded-row gradient mass " +
             fmt("%g", padded_grad);
  return o;
}

// ---- criterion 3 ----

Outcome mlm_grounding(World& w) {
  const auto t0 = Clock::now();
  ModelConfig mc = synthetic_model(w.vocab.size());
  TrainConfig tc = synthetic_train(TrainConfig::pretrain_defaults(), 15);
  TrainResult r = pretrain(w.cap_train, w.cap_val, w.vocab, mc, tc, *w.cache);
  const double secs = seconds_since(t0);
  w.pretrained = r.best;
  const Model m = instantiate(r.best);
  const MlmScore real = evaluate_mlm(m, w.vocab, w.cap_test, *w.cache);
  const MlmScore noise = evaluate_mlm(m, w.vocab, w.cap_test, *w.cache, ImageSource::kNoise, 7);
  const double ceiling = text_only_ceiling(w.spec);
  Outcome o;
  o.pass = w.cap_train.size() >= 2000 && real.accuracy >= 0.90 && noise.accuracy <= ceiling + 0.10 &&
           secs <= 15 * 60;
  o.detail = std::to_string(w.cap_train.size()) + " pairs: held-out masked-keyword accuracy " +
             fmt("%.4f", real.accuracy) + " (>= 0.90), noise images " + fmt("%.4f", noise.accuracy) +
             " (<= ceiling " + fmt("%.4f", ceiling) + " + 0.10); pretraining " + fmt("%.0f", secs) + "s";
  return o;
}

// ---- criterion 4 ----

Outcome pretraining_benefit(World& w) {
  if (!w.pretrained) return {false, "no pretrained checkpoint (criterion 3 did not produce one)"};
  const auto t0 = Clock::now();
  ModelConfig mc = w.pretrained->config;
  mc.answer_count = w.answers->size();
  TrainConfig tc = synthetic_train(TrainConfig::finetune_defaults(), 40);
  TrainResult pre = finetune(w.vqa_train, w.vqa_val, *w.answers, w.vocab, &*w.pretrained, mc, tc, *w.cache);
  tc.variant = Variant::kNonPretrained;
  TrainResult scratch = finetune(w.vqa_train, w.vqa_val, *w.answers, w.vocab, nullptr, mc, tc, *w.cache);
  const double secs = seconds_since(t0);
  w.finetuned = pre.best;
  const Model mp = instantiate(pre.best);
  const Model ms = instantiate(scratch.best);
  const double ap = evaluate_direct(mp, *w.answers, w.vocab, w.vqa_test, *w.cache).overall.accuracy();
  const double as = evaluate_direct(ms, *w.answers, w.vocab, w.vqa_test, *w.cache).overall.accuracy();
  Outcome o;
  o.pass = ap >= 0.95 && ap - as >= 0.05 && secs <= 20 * 60;
  o.detail = std::to_string(w.vqa_train.size()) + " train questions, 40 epochs each: pretrained " +
             fmt("%.4f", ap) + ", scratch " + fmt("%.4f", as) + ", gap " + fmt("%.1f", 100 * (ap - as)) +
             " points; " + fmt("%.0f", secs) + "s";
  return o;
}

// ---- criterion 5 ----

std::string random_sentence(Rng& rng, std::size_t len) {
  static const std::vector<std::string> words{"the", "a", "lung", "ct", "mri", "axial", "left",
                                              "no", "yes", "mass", "in", "of"};
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += words[rng.uniform_int(words.size())];
  }
  return s;
}

Outcome bleu_oracle() {
  Rng rng(77);
  double worst = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    // The first 18 pairs cover every combination of lengths 1..3 twice.
    const std::size_t lp = i < 18 ? 1 + i % 3 : 1 + rng.uniform_int(8);
    const std::size_t lg = i < 18 ? 1 + (i / 3) % 3 : 1 + rng.uniform_int(8);
    const std::string p = random_sentence(rng, lp);
    const std::string g = random_sentence(rng, lg);
    worst = std::max(worst, std::abs(bleu(p, g) - testing::brute_force_bleu(p, g)));
    ++pairs;
  }
  bool identity = true;
  bool disjoint = true;
  for (std::size_t len = 1; len <= 6; ++len) {
    const std::string s = random_sentence(rng, len);
    identity = identity && bleu(s, s) == 1.0;
  }
  disjoint = bleu("alpha beta", "gamma delta epsilon") == 0.0 && bleu("x", "y") == 0.0;
  Outcome o;
  o.pass = worst <= 1e-9 && identity && disjoint;
  o.detail = std::to_string(pairs) + " pairs max |diff| " + fmt("%.2e", worst) +
             ", bleu(x,x)=1 " + (identity ? "holds" : "violated") + ", disjoint=0 " +
             (disjoint ? "holds" : "violated");
  return o;
}

// ---- criterion 6 ----

Outcome router_consistency(World& w) {
  if (!w.pretrained) return {false, "no pretrained checkpoint"};
  ModelConfig mc = w.pretrained->config;
  mc.answer_count = w.answers->size();
  TrainConfig tc = synthetic_train(TrainConfig::finetune_defaults(), 2);
  tc.variant = Variant::kExclusive;
  std::map<std::size_t, Checkpoint> ckpts;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (std::none_of(w.vqa_train.begin(), w.vqa_train.end(),
                     [&](const VqaRecord& r) { return r.category == c; })) {
      continue;
    }
    tc.category = c;
    ckpts[c] = finetune(w.vqa_train, w.vqa_val, *w.answers, w.vocab, &*w.pretrained, mc, tc, *w.cache).best;
  }
  std::map<std::size_t, Model> models;
  std::map<std::size_t, Expert> experts;
  for (const auto& [c, ck] : ckpts) {
    models.emplace(c, instantiate(ck));
    experts[c] = Expert{&models.at(c), &*w.answers};
  }
  const EvalReport routed = evaluate_routed(nullptr, experts, w.vocab, w.vqa_test, *w.cache);
  std::size_t compared = 0;
  std::size_t mismatches = 0;
  std::map<std::size_t, std::size_t> cursor;
  std::map<std::size_t, EvalReport> direct;
  for (const auto& [c, e] : experts) {
    direct[c] = evaluate_direct(*e.model, *e.answers, w.vocab, filter_category(w.vqa_test, c), *w.cache);
  }
  for (const SampleRow& r : routed.rows) {
    const SampleRow& d = direct.at(r.category).rows.at(cursor[r.category]++);
    ++compared;
    if (d.id != r.id || d.question != r.question || d.prediction != r.prediction || d.correct != r.correct ||
        d.bleu != r.bleu) {
      ++mismatches;
    }
  }
  bool scores_equal = true;
  for (const auto& [c, d] : direct) {
    const Score& a = routed.categories[c];
    const Score& b = d.overall;
    scores_equal = scores_equal && a.count == b.count && a.correct == b.correct && a.bleu_sum == b.bleu_sum;
  }
  Outcome o;
  o.pass = mismatches == 0 && scores_equal && compared == w.vqa_test.size();
  o.detail = std::to_string(experts.size()) + " exclusive models, " + std::to_string(compared) +
             " test questions, " + std::to_string(mismatches) + " per-sample mismatches, category scores " +
             (scores_equal ? "identical" : "differ");
  return o;
}

// ---- criterion 7 ----

template <typename Fn>
bool fails_with(Fn fn, ErrorKind kind) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

Outcome determinism(World& w) {
  std::vector<CaptionRecord> small(w.cap_train.begin(), w.cap_train.begin() + 64);
  ModelConfig mc = synthetic_model(w.vocab.size());
  TrainConfig tc = synthetic_train(TrainConfig::pretrain_defaults(), 2);
  tc.augment.enabled = true;
  tc.seed = 5;
  const std::string a = serialize_checkpoint(pretrain(small, {}, w.vocab, mc, tc, *w.cache).best);
  const std::string b = serialize_checkpoint(pretrain(small, {}, w.vocab, mc, tc, *w.cache).best);
  const bool bitwise = a == b;

  // save -> load -> forward
  const Checkpoint& src = w.finetuned ? *w.finetuned : parse_checkpoint(a, "memory");
  const fs::path file = w.root / "roundtrip.ckpt";
  save_checkpoint(src, file);
  const Model before = instantiate(src);
  const Model after = instantiate(load_checkpoint(file));
  bool forward_equal = true;
  const AnswerSpace answers = AnswerSpace::build(w.vqa_train);
  for (std::size_t i = 0; i < 10 && i < w.vqa_test.size(); ++i) {
    const VqaRecord& r = w.vqa_test[i];
    const Image& img = w.cache->get(r.image);
    if (w.finetuned) {
      forward_equal = forward_equal &&
                      predict(before, answers, w.vocab, img, r.question).logits ==
                          predict(after, answers, w.vocab, img, r.question).logits;
    }
  }
  const bool resave = serialize_checkpoint(load_checkpoint(file)) == serialize_checkpoint(src);

  // tampering
  const std::string bytes = serialize_checkpoint(src);
  std::string magic = bytes;
  magic[0] = 'X';
  std::string version = bytes;
  version[4] = static_cast<char>(version[4] + 1);
  std::string flipped = bytes;
  flipped[flipped.size() - 9] = static_cast<char>(flipped[flipped.size() - 9] ^ 0x5a);
  ModelConfig other = src.config;
  other.hidden = 24;
  other.vision.feature_dim = 24;
  const bool tamper =
      fails_with([&] { parse_checkpoint(magic, "t"); }, ErrorKind::kCheckpointVersion) &&
      fails_with([&] { parse_checkpoint(version, "t"); }, ErrorKind::kCheckpointVersion) &&
      fails_with([&] { parse_checkpoint(bytes.substr(0, bytes.size() / 2), "t"); },
                 ErrorKind::kCheckpointTruncated) &&
      fails_with([&] { parse_checkpoint(flipped, "t"); }, ErrorKind::kCheckpointCorrupt) &&
      fails_with([&] { parse_checkpoint(bytes + "x", "t"); }, ErrorKind::kCheckpointCorrupt) &&
      fails_with([&] { parse_checkpoint(bytes, "t", &other); }, ErrorKind::kCheckpointFingerprint) &&
      fails_with([&] { load_checkpoint(w.root / "missing.ckpt"); }, ErrorKind::kIo);
  Outcome o;
  o.pass = bitwise && forward_equal && resave && tamper && w.finetuned.has_value();
  o.detail = std::string("two seeded runs ") + (bitwise ? "bitwise identical" : "DIFFER") +
             "; save/load/forward " + (forward_equal && w.finetuned ? "exact" : "NOT exact") +
             "; re-save " + (resave ? "byte-identical" : "differs") + "; tampered files " +
             (tamper ? "fail with the expected kinds" : "NOT rejected as expected");
  return o;
}

// ---- criterion 8 ----

Outcome interpretability(World& w) {
  if (!w.finetuned) return {false, "no finetuned model (criterion 4 did not produce one)"};
  const Model m = instantiate(*w.finetuned);
  std::map<Reduction, std::size_t> hits;
  for (const VqaRecord& r : w.vqa_test) {
    const Box& box = w.boxes.at(r.image.string());
    const double base = box_baseline(box, kCanvas, kCanvas);
    for (Reduction red : {Reduction::kLastLayerMeanHeads, Reduction::kRollout}) {
      HeatmapOptions opts;
      opts.reduction = red;
      const Heatmap h = explain(m, w.vocab, w.cache->get(r.image), r.question, opts);
      if (box_mass(h, box, kCanvas, kCanvas) > base) ++hits[red];
    }
  }
  const double n = static_cast<double>(w.vqa_test.size());
  const double last = hits[Reduction::kLastLayerMeanHeads] / n;
  const double roll = hits[Reduction::kRollout] / n;
  Outcome o;
  o.pass = last >= 0.80;
  o.detail = std::to_string(w.vqa_test.size()) + " held-out questions: box mass above baseline on " +
             fmt("%.3f", last) + " (last layer, mean heads; need >= 0.80); rollout " + fmt("%.3f", roll);
  return o;
}

// ---- criterion 9 ----

Outcome schedule() {
  const PlateauConfig pre = TrainConfig::pretrain_defaults().plateau;
  const PlateauConfig ft = TrainConfig::finetune_defaults().plateau;
  const double base_pre = TrainConfig::pretrain_defaults().lr;
  const double base_ft = TrainConfig::finetune_defaults().lr;
  // history[0] is the best epoch; every later epoch stagnates.
  auto first_drop = [](double base, const PlateauConfig& cfg, double& lr_after) {
    std::vector<double> h{1.0};
    for (std::size_t k = 1; k <= 50; ++k) {
      h.push_back(1.0);
      const double lr = plateau_schedule(h, base, cfg);
      if (lr != base) {
        lr_after = lr;
        return k;
      }
    }
    lr_after = base;
    return std::size_t{0};
  };
  double lr_pre = 0, lr_ft = 0;
  const std::size_t k_pre = first_drop(base_pre, pre, lr_pre);
  const std::size_t k_ft = first_drop(base_ft, ft, lr_ft);
  Outcome o;
  o.pass = base_pre == 2e-5 && k_pre == 5 && std::abs(lr_pre - 2e-6) < 1e-18 && base_ft == 1e-4 && k_ft == 10 &&
           std::abs(lr_ft - 1e-5) < 1e-17;
  o.detail = fmt("%g", base_pre) + " -> " + fmt("%g", lr_pre) + " after " + std::to_string(k_pre) +
             " stagnant epochs; " + fmt("%g", base_ft) + " -> " + fmt("%g", lr_ft) + " after " +
             std::to_string(k_ft);
  return o;
}

Outcome guarded(const std::function<Outcome()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  fs::path root = fs::temp_directory_path() / "mmbert_acceptance";
  if (argc > 1) root = argv[1];
  fs::remove_all(root);
  fs::create_directories(root);

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
  std::optional<World> world;
  auto need_world = [&]() -> World& {
    if (!world) world = make_world(root / "synth");
    return *world;
  };
  criteria.emplace_back("gradient fidelity", [] { return gradient_fidelity(); });
  criteria.emplace_back("attention invariants", [] { return attention_invariants(); });
  criteria.emplace_back("synthetic MLM image grounding", [&] { return mlm_grounding(need_world()); });
  criteria.emplace_back("pretraining benefit", [&] { return pretraining_benefit(need_world()); });
  criteria.emplace_back("BLEU oracle equivalence", [] { return bleu_oracle(); });
  criteria.emplace_back("router consistency", [&] { return router_consistency(need_world()); });
  criteria.emplace_back("determinism and persistence", [&] { return determinism(need_world()); });
  criteria.emplace_back("interpretability proxy", [&] { return interpretability(need_world()); });
  criteria.emplace_back("schedule conformance", [] { return schedule(); });

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const Outcome o = guarded(criteria[i].second);
    if (!o.pass) ++failed;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  fs::remove_all(root);
  return failed == 0 ? 0 : 1;
}
