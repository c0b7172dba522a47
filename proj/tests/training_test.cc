#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmbert/ops.h"
#include "mmbert/tape.h"
#include "mmbert/training.h"
#include "test_util.h"

using namespace mmbert;

namespace {

struct Corpus {
  testing::TempDir dir{"train"};
  SyntheticLayout layout;
  std::vector<CaptionRecord> captions;
  std::vector<VqaRecord> vqa;
  Vocab vocab;

  Corpus() {
    SyntheticSpec spec;
    spec.canvas = 32;
    spec.object_size = 8;
    spec.pretrain_train = 8;
    spec.pretrain_val = 2;
    spec.pretrain_test = 1;
    spec.vqa_train = 4;
    spec.vqa_val = 1;
    spec.vqa_test = 1;
    layout = gen_synthetic(spec, dir.path());
    captions = load_caption_corpus(layout.captions_train).records;
    vqa = load_vqa_dataset(layout.vqa_train).records;
    std::vector<std::string> lines;
    for (const auto& c : captions) lines.push_back(c.caption);
    for (const auto& q : vqa) lines.push_back(q.question);
    vocab = Vocab::build(lines, 200);
  }
};

ModelConfig tiny_model(const Vocab& vocab, std::size_t answers = 2) {
  ModelConfig cfg;
  cfg.hidden = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_text = 12;
  cfg.dropout = 0.1;
  cfg.vocab_size = vocab.size();
  cfg.answer_count = answers;
  cfg.vision.input_size = 32;
  cfg.vision.widths = {2, 2, 3, 3, 3};
  cfg.vision.feature_dim = 16;
  return cfg;
}

TrainConfig quick(std::size_t epochs, double lr = 1e-2) {
  TrainConfig t = TrainConfig::pretrain_defaults();
  t.max_epochs = epochs;
  t.lr = lr;
  t.batch_size = 4;
  t.seed = 3;
  return t;
}

NamedTensors scalar_param(double value, bool with_grad, double grad = 0.0) {
  Tensor p = Tensor::from_values({1}, std::vector<double>{value}, DType::kF64);
  p.set_requires_grad(true);
  if (with_grad) {
    Tape tape;
    Tensor loss = ops::scale(p, grad);
    tape.backward(loss);
  }
  return {{"p", p}};
}

}  // namespace

TEST_CASE("adam first step moves each weight by about lr against the gradient sign") {
  for (double g : {3.0, -0.02}) {
    NamedTensors params = scalar_param(1.0, true, g);
    AdamState st;
    adam_step(params, st, 0.1);
    CHECK(params[0].second.value(0) == doctest::Approx(1.0 - 0.1 * (g > 0 ? 1 : -1)).epsilon(1e-6));
    CHECK_FALSE(params[0].second.has_grad());
  }
  NamedTensors zero = scalar_param(1.0, true, 0.0);
  AdamState st;
  adam_step(zero, st, 0.1);
  CHECK(zero[0].second.value(0) == 1.0);

  NamedTensors missing = scalar_param(1.0, false);
  AdamState st2;
  CHECK_ERROR_KIND(adam_step(missing, st2, 0.1), ErrorKind::kContract);
}

TEST_CASE("gradient clipping") {
  NamedTensors params = scalar_param(1.0, true, 4.0);
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(4.0));
  CHECK(params[0].second.grad_vector()[0] == doctest::Approx(1.0));
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("plateau schedule") {
  PlateauConfig pre;
  std::vector<double> h{1.0};
  for (int i = 0; i < 4; ++i) h.push_back(1.0);
  CHECK(plateau_schedule(h, 2e-5, pre) == 2e-5);
  h.push_back(1.0);
  CHECK(plateau_schedule(h, 2e-5, pre) == doctest::Approx(2e-6).epsilon(1e-12));
  for (int i = 0; i < 5; ++i) h.push_back(1.0);
  CHECK(plateau_schedule(h, 2e-5, pre) == doctest::Approx(2e-7).epsilon(1e-12));
  for (int i = 0; i < 5; ++i) h.push_back(1.0);
  CHECK(plateau_schedule(h, 2e-5, pre) == 1e-7);

  // Improvement resets the streak.
  std::vector<double> r{1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6, 0.6};
  CHECK(plateau_schedule(r, 2e-5, pre) == 2e-5);
  r.push_back(0.7);
  CHECK(plateau_schedule(r, 2e-5, pre) == doctest::Approx(2e-6).epsilon(1e-12));

  PlateauConfig ft = TrainConfig::finetune_defaults().plateau;
  std::vector<double> f(10, 1.0);
  CHECK(plateau_schedule(f, 1e-4, ft) == 1e-4);
  f.push_back(1.0);
  CHECK(plateau_schedule(f, 1e-4, ft) == doctest::Approx(1e-5).epsilon(1e-12));

  PlateauConfig bad;
  bad.patience = 0;
  CHECK_ERROR_KIND(plateau_schedule(f, 1e-4, bad), ErrorKind::kConfig);
}

TEST_CASE("defaults") {
  const TrainConfig p = TrainConfig::pretrain_defaults();
  CHECK(p.lr == 2e-5);
  CHECK(p.plateau.patience == 5);
  const TrainConfig f = TrainConfig::finetune_defaults();
  CHECK(f.lr == 1e-4);
  CHECK(f.plateau.patience == 10);
  CHECK(parse_variant("np") == Variant::kNonPretrained);
  CHECK(variant_name(Variant::kExclusive) == "exclusive");
  CHECK_FALSE(parse_variant("other").has_value());
}

TEST_CASE("checkpoint round trip and tampering") {
  testing::TempDir dir("ckpt");
  Vocab vocab = Vocab::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b"});
  ModelConfig cfg = tiny_model(vocab, 2);
  Model m(cfg, 5);
  AnswerSpace answers = AnswerSpace::from_answers({"yes", "no"});
  Checkpoint c = capture(m, vocab, &answers);
  c.meta["phase"] = "finetune";
  c.epoch = 7;
  c.best_val_loss = 0.123456789012345;
  save_checkpoint(c, dir / "m.ckpt");
  Checkpoint back = load_checkpoint(dir / "m.ckpt", &cfg);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(c));
  CHECK(back.best_val_loss == c.best_val_loss);
  CHECK(back.answers == answers.answers());
  CHECK(back.meta.at("phase") == "finetune");

  Model loaded = instantiate(back);
  Image img(32, 32, 0.4f);
  NoGradGuard guard;
  auto logits = [&](const Model& model) {
    Tensor f = encode_image(image_to_tensor(img), model.params().vision, model.config().vision).tokens();
    MultimodalSequence seq = assemble_sequence(f, std::vector<int>{5, 6}, model);
    return vqa_logits(encoder_forward(seq, model), seq, model);
  };
  CHECK(logits(loaded).bitwise_equal(logits(m)));

  const std::string bytes = serialize_checkpoint(c);
  CHECK_ERROR_KIND(parse_checkpoint("XXXX" + bytes.substr(4), "t"), ErrorKind::kCheckpointVersion);
  std::string v2 = bytes;
  v2[4] = 2;
  CHECK_ERROR_KIND(parse_checkpoint(v2, "t"), ErrorKind::kCheckpointVersion);
  CHECK_ERROR_KIND(parse_checkpoint(bytes.substr(0, bytes.size() - 10), "t"), ErrorKind::kCheckpointTruncated);
  CHECK_ERROR_KIND(parse_checkpoint(bytes.substr(0, 10), "t"), ErrorKind::kCheckpointTruncated);
  std::string flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x01;
  CHECK_ERROR_KIND(parse_checkpoint(flipped, "t"), ErrorKind::kCheckpointCorrupt);
  CHECK_ERROR_KIND(parse_checkpoint(bytes + "x", "t"), ErrorKind::kCheckpointCorrupt);
  ModelConfig other = cfg;
  other.hidden = 32;
  other.vision.feature_dim = 32;
  CHECK_ERROR_KIND(parse_checkpoint(bytes, "t", &other), ErrorKind::kCheckpointFingerprint);
  CHECK_ERROR_KIND(load_checkpoint(dir / "absent.ckpt"), ErrorKind::kIo);

  Model wrong(other, 5);
  const std::vector<std::string_view> prefixes{kEncoderPrefix};
  CHECK_ERROR_KIND(load_weights(wrong, c, prefixes), ErrorKind::kCheckpointFingerprint);
}

TEST_CASE("pretraining descends, is deterministic and validates") {
  Corpus data;
  ImageCache cache(32);
  const ModelConfig cfg = tiny_model(data.vocab);
  TrainResult a = pretrain(data.captions, {}, data.vocab, cfg, quick(4), cache);
  REQUIRE(a.history.size() == 4);
  CHECK(a.history.back().train_loss < a.history.front().train_loss);
  TrainResult b = pretrain(data.captions, {}, data.vocab, cfg, quick(4), cache);
  CHECK(serialize_checkpoint(a.best) == serialize_checkpoint(b.best));
  CHECK(a.best.meta.at("phase") == "pretrain");

  MlmScore s = evaluate_mlm(instantiate(a.best), data.vocab, data.captions, cache);
  CHECK(s.masked == 3 * data.captions.size());
  CHECK(s.accuracy >= 0.0);
  MlmScore n = evaluate_mlm(instantiate(a.best), data.vocab, data.captions, cache, ImageSource::kNoise, 1);
  CHECK(n.masked == s.masked);

  // One sample: the validation set is the training set.
  TrainResult one = pretrain(std::span(data.captions).first(1), {}, data.vocab, cfg, quick(1), cache);
  CHECK(one.history.size() == 1);

  TrainConfig bad = quick(1);
  bad.lr = 0.0;
  CHECK_ERROR_KIND(pretrain(data.captions, {}, data.vocab, cfg, bad, cache), ErrorKind::kConfig);

  std::vector<CaptionRecord> bare = data.captions;
  for (auto& r : bare) r.keywords.clear();
  TrainConfig nomask = quick(1);
  nomask.mask.fallback_rate = 0.0;
  CHECK_ERROR_KIND(pretrain(bare, {}, data.vocab, cfg, nomask, cache), ErrorKind::kEmptyLoss);
}

TEST_CASE("finetuning variants and router") {
  Corpus data;
  ImageCache cache(32);
  AnswerSpace answers = AnswerSpace::build(data.vqa);
  const ModelConfig cfg = tiny_model(data.vocab, answers.size());
  TrainConfig t = quick(2, 1e-3);
  t.augment.enabled = true;

  TrainResult pre = pretrain(data.captions, {}, data.vocab, cfg, quick(1), cache);
  TrainResult ft = finetune(data.vqa, {}, answers, data.vocab, &pre.best, cfg, t, cache);
  CHECK(ft.best.answers == answers.answers());
  CHECK(ft.best.meta.at("variant") == "general");
  // The pretrained encoder is the starting point: epoch-0 weights differ from
  // a scratch model with the same seed.
  TrainResult scratch = finetune(data.vqa, {}, answers, data.vocab, nullptr, cfg, t, cache);
  CHECK(serialize_checkpoint(scratch.best) != serialize_checkpoint(ft.best));

  TrainConfig np = t;
  np.variant = Variant::kNonPretrained;
  CHECK_ERROR_KIND(finetune(data.vqa, {}, answers, data.vocab, &pre.best, cfg, np, cache), ErrorKind::kConfig);
  CHECK_NOTHROW(finetune(data.vqa, {}, answers, data.vocab, nullptr, cfg, np, cache));

  TrainConfig ex = t;
  ex.variant = Variant::kExclusive;
  ex.category = kYesNoCategory;
  TrainResult yn = finetune(data.vqa, {}, answers, data.vocab, &pre.best, cfg, ex, cache);
  CHECK(yn.best.meta.at("category") == "yesno");
  ex.category = 3;
  CHECK_ERROR_KIND(finetune(data.vqa, {}, answers, data.vocab, &pre.best, cfg, ex, cache), ErrorKind::kData);

  Vocab other = Vocab::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "z"});
  ModelConfig other_cfg = cfg;
  other_cfg.vocab_size = other.size();
  CHECK_ERROR_KIND(finetune(data.vqa, {}, answers, other, &pre.best, other_cfg, t, cache),
                   ErrorKind::kCheckpointFingerprint);

  TrainResult router = train_router(data.vqa, {}, data.vocab, cfg, quick(2, 1e-3));
  CHECK(router.best.meta.at("phase") == "router");
  CHECK(router.history.size() == 2);
}
