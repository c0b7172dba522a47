#include "mmbert/cli.h"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "mmbert/data.h"
#include "mmbert/error.h"
#include "mmbert/evaluation.h"
#include "mmbert/interpretability.h"
#include "mmbert/training.h"

namespace mmbert::cli {
namespace {

namespace fs = std::filesystem;

struct Key {
  std::string name;
  std::string def;
  std::string help;
};

using Keys = std::vector<Key>;

void append(Keys& dst, const Keys& src) { dst.insert(dst.end(), src.begin(), src.end()); }

const Keys& model_keys() {
  static const Keys keys = {
      {"hidden", "128", "encoder width D (also the image feature width)"},
      {"layers", "4", "transformer layers"},
      {"heads", "3", "attention heads per layer"},
      {"ffn", "0", "feed-forward width (0 = 4 * hidden)"},
      {"max_text", "64", "maximum text tokens per sequence"},
      {"dropout", "0.1", "dropout probability"},
      {"image_size", "224", "input image side in pixels"},
      {"widths", "16,32,64,128,128", "channel widths of the five vision stages"},
      {"feature_mode", "multiscale", "image tokens: multiscale (5 pooled) or spatial (pooled + grid)"},
      {"gelu", "tanh", "gelu form: tanh or exact"},
      {"dtype", "f32", "parameter dtype: f32 or f64"},
  };
  return keys;
}

Keys train_keys(const TrainConfig& d) {
  auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  return {
      {"lr", num(d.lr), "base learning rate"},
      {"epochs", std::to_string(d.max_epochs), "maximum epochs"},
      {"batch_size", std::to_string(d.batch_size), "samples per optimizer step"},
      {"patience", std::to_string(d.plateau.patience), "plateau epochs before the lr drops"},
      {"factor", num(d.plateau.factor), "lr multiplier on plateau"},
      {"min_lr", num(d.plateau.min_lr), "lr floor"},
      {"early_stop", std::to_string(d.early_stop), "stop after this many epochs without improvement (0 = off)"},
      {"clip_norm", num(d.clip_norm), "global gradient norm limit (0 = off)"},
      {"val_fraction", num(d.val_fraction), "held-out share when no validation file is given"},
      {"augment", "true", "random crop, rotation and color jitter during training"},
  };
}

// ---- resolved settings ----

class Settings {
 public:
  Settings(std::string command, Keys keys) : command_(std::move(command)), keys_(std::move(keys)) {
    for (const Key& k : keys_) values_[k.name] = k.def;
  }

  const Keys& keys() const { return keys_; }
  bool known(const std::string& k) const { return values_.count(k) > 0; }
  void set(const std::string& k, const std::string& v) { values_.at(k) = v; }

  const std::string& str(const std::string& k) const { return values_.at(k); }

  std::uint64_t u64(const std::string& k) const {
    const std::string& s = str(k);
    std::uint64_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty(), ErrorKind::kConfig,
            "key '" + k + "': expected a non-negative integer, got '" + s + "'");
    return v;
  }
  std::size_t size(const std::string& k) const { return static_cast<std::size_t>(u64(k)); }

  long long integer(const std::string& k) const {
    const std::string& s = str(k);
    long long v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty(), ErrorKind::kConfig,
            "key '" + k + "': expected an integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& k) const {
    const std::string& s = str(k);
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty(), ErrorKind::kConfig,
            "key '" + k + "': expected a number, got '" + s + "'");
    return v;
  }

  bool flag(const std::string& k) const {
    const std::string s = ascii_lower(str(k));
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail(ErrorKind::kConfig, "key '" + k + "': expected true or false, got '" + str(k) + "'");
  }

  std::vector<std::string> list(const std::string& k) const {
    std::vector<std::string> out;
    std::stringstream ss(str(k));
    for (std::string part; std::getline(ss, part, ',');) {
      part.erase(0, part.find_first_not_of(" \t"));
      part.erase(part.find_last_not_of(" \t") + 1);
      if (!part.empty()) out.push_back(part);
    }
    return out;
  }

  fs::path path(const std::string& k) const {
    require(!str(k).empty(), ErrorKind::kConfig, "key '" + k + "' is required");
    return fs::path(str(k));
  }

  void echo(std::ostream& out, std::size_t threads) const {
    out << "# mmvqa " << command_ << " resolved config\n";
    for (const Key& k : keys_) out << k.name << " = " << values_.at(k.name) << '\n';
    out << "# threads = " << threads << '\n';
  }

 private:
  std::string command_;
  Keys keys_;
  std::map<std::string, std::string> values_;
};

void apply_config_file(Settings& s, const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open config file " + path.string());
  std::string line;
  std::size_t number = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(number);
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig, where + ": expected key = value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    for (std::string* t : {&key, &value}) {
      t->erase(0, t->find_first_not_of(" \t"));
      t->erase(t->find_last_not_of(" \t") + 1);
    }
    require(s.known(key), ErrorKind::kConfig, where + ": unknown key '" + key + "'");
    const auto [it, fresh] = seen.emplace(key, number);
    require(fresh, ErrorKind::kConfig,
            where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    s.set(key, value);
  }
}

std::size_t thread_count() {
  const char* env = std::getenv("MMVQA_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  const std::string s(env);
  std::size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size() && v >= 1, ErrorKind::kConfig,
          "MMVQA_THREADS: expected a positive integer, got '" + s + "'");
  return v;
}

// ---- conversions ----

ModelConfig model_config(const Settings& s) {
  ModelConfig c;
  c.hidden = s.size("hidden");
  c.layers = s.size("layers");
  c.heads = s.size("heads");
  c.ffn = s.size("ffn");
  c.max_text = s.size("max_text");
  c.dropout = s.real("dropout");
  c.vision.input_size = s.size("image_size");
  c.vision.feature_dim = c.hidden;
  const auto widths = s.list("widths");
  require(widths.size() == kNumStages, ErrorKind::kConfig,
          "key 'widths': expected " + std::to_string(kNumStages) + " comma-separated values");
  for (std::size_t i = 0; i < kNumStages; ++i) {
    std::size_t w = 0;
    auto r = std::from_chars(widths[i].data(), widths[i].data() + widths[i].size(), w);
    require(r.ec == std::errc() && w > 0, ErrorKind::kConfig, "key 'widths': bad value '" + widths[i] + "'");
    c.vision.widths[i] = w;
  }
  const std::string& mode = s.str("feature_mode");
  require(mode == "multiscale" || mode == "spatial", ErrorKind::kConfig,
          "key 'feature_mode': expected multiscale or spatial, got '" + mode + "'");
  c.vision.mode = mode == "spatial" ? FeatureMode::kSpatial : FeatureMode::kMultiscale;
  const std::string& gelu = s.str("gelu");
  require(gelu == "tanh" || gelu == "exact", ErrorKind::kConfig,
          "key 'gelu': expected tanh or exact, got '" + gelu + "'");
  c.gelu_exact = gelu == "exact";
  const std::string& dt = s.str("dtype");
  require(dt == "f32" || dt == "f64", ErrorKind::kConfig, "key 'dtype': expected f32 or f64, got '" + dt + "'");
  c.dtype = dt == "f64" ? DType::kF64 : DType::kF32;
  return c;
}

TrainConfig train_config(const Settings& s, TrainConfig t, std::ostream& log) {
  t.lr = s.real("lr");
  t.max_epochs = s.size("epochs");
  t.batch_size = s.size("batch_size");
  t.plateau.patience = s.size("patience");
  t.plateau.factor = s.real("factor");
  t.plateau.min_lr = s.real("min_lr");
  t.early_stop = s.size("early_stop");
  t.clip_norm = s.real("clip_norm");
  t.val_fraction = s.real("val_fraction");
  t.augment.enabled = s.flag("augment");
  t.seed = s.u64("seed");
  t.log = &log;
  t.validate();
  return t;
}

void print_history_summary(const TrainResult& r, std::ostream& out) {
  out << "best epoch " << r.best.epoch << " val_loss " << r.best.best_val_loss;
  for (const EpochStats& e : r.history) {
    if (e.epoch + 1 == r.best.epoch) out << " val_acc " << e.val_accuracy;
  }
  out << '\n';
}

AnswerSpace answers_of(const Checkpoint& c, const fs::path& source) {
  require(!c.answers.empty(), ErrorKind::kData,
          source.string() + ": checkpoint has no answer space (not a finetuned model)");
  return AnswerSpace::from_answers(c.answers);
}

// ---- subcommands ----

struct Command {
  std::string name;
  std::string description;
  Keys keys;
  std::function<void(const Settings&, std::ostream&, std::size_t threads)> body;
};

void cmd_gen_synth(const Settings& s, std::ostream& out, std::size_t) {
  SyntheticSpec spec;
  spec.canvas = s.size("canvas");
  spec.object_size = s.size("object_size");
  spec.shapes = s.list("shapes");
  spec.colors = s.list("colors");
  spec.planes = s.list("planes");
  spec.pretrain_train = s.size("pretrain_train");
  spec.pretrain_val = s.size("pretrain_val");
  spec.pretrain_test = s.size("pretrain_test");
  spec.vqa_train = s.size("vqa_train");
  spec.vqa_val = s.size("vqa_val");
  spec.vqa_test = s.size("vqa_test");
  spec.seed = s.u64("seed");
  spec.validate();
  const SyntheticLayout l = gen_synthetic(spec, s.path("out"));
  out << "captions " << l.captions_train.string() << ' ' << l.captions_val.string() << ' '
      << l.captions_test.string() << '\n';
  out << "vqa " << l.vqa_train.string() << ' ' << l.vqa_val.string() << ' ' << l.vqa_test.string() << '\n';
  out << "boxes " << l.boxes.string() << '\n';
  out << "text_only_ceiling " << text_only_ceiling(spec) << '\n';
}

void cmd_build_vocab(const Settings& s, std::ostream& out, std::size_t) {
  std::vector<std::string> lines;
  for (const std::string& p : s.list("captions")) {
    for (const CaptionRecord& r : load_caption_corpus(p).records) lines.push_back(r.caption);
  }
  for (const std::string& p : s.list("vqa")) {
    for (const VqaRecord& r : load_vqa_dataset(p).records) lines.push_back(r.question);
  }
  require(!lines.empty(), ErrorKind::kConfig, "build-vocab: give at least one file via 'captions' or 'vqa'");
  Vocab v = Vocab::build(lines, s.size("size"), s.size("min_freq"));
  v.save(s.path("out"));
  out << "vocab " << v.size() << " tokens -> " << s.str("out") << '\n';
}

void cmd_pretrain(const Settings& s, std::ostream& out, std::size_t) {
  const Vocab vocab = Vocab::load(s.path("vocab"));
  ModelConfig mc = model_config(s);
  TrainConfig tc = train_config(s, TrainConfig::pretrain_defaults(), out);
  tc.mask.keyword_rate = s.real("keyword_rate");
  tc.mask.fallback_rate = s.real("fallback_rate");
  const auto train = load_caption_corpus(s.path("train")).records;
  std::vector<CaptionRecord> val;
  if (!s.str("val").empty()) val = load_caption_corpus(s.path("val")).records;
  ImageCache cache(mc.vision.input_size);
  TrainResult r = pretrain(train, val, vocab, mc, tc, cache);
  save_checkpoint(r.best, s.path("out"));
  print_history_summary(r, out);
  out << "checkpoint " << s.str("out") << '\n';
  if (!s.str("test").empty()) {
    const auto test = load_caption_corpus(s.path("test")).records;
    const Model m = instantiate(r.best);
    const MlmScore real = evaluate_mlm(m, vocab, test, cache);
    const MlmScore noise = evaluate_mlm(m, vocab, test, cache, ImageSource::kNoise, tc.seed);
    out << "test masked_keyword_accuracy " << real.accuracy << " (" << real.masked << " masked)\n";
    out << "test noise_image_accuracy " << noise.accuracy << '\n';
  }
}

void cmd_finetune(const Settings& s, std::ostream& out, std::size_t) {
  const auto variant = parse_variant(s.str("variant"));
  require(variant.has_value(), ErrorKind::kConfig,
          "key 'variant': expected general, exclusive or np, got '" + s.str("variant") + "'");
  std::optional<Checkpoint> init;
  if (!s.str("init").empty()) {
    require(*variant != Variant::kNonPretrained, ErrorKind::kConfig,
            "key 'init': the np variant trains from scratch and takes no initial checkpoint");
    init = load_checkpoint(s.path("init"));
  }
  const Vocab vocab = init ? Vocab::from_tokens(init->vocab) : Vocab::load(s.path("vocab"));
  ModelConfig mc = init ? init->config : model_config(s);
  if (init) {
    out << "# model config taken from " << s.str("init") << ": " << mc.fingerprint() << '\n';
  }
  TrainConfig tc = train_config(s, TrainConfig::finetune_defaults(), out);
  tc.variant = *variant;

  const auto train = load_vqa_dataset(s.path("train")).records;
  std::vector<VqaRecord> val;
  if (!s.str("val").empty()) val = load_vqa_dataset(s.path("val")).records;
  const AnswerSpace answers = AnswerSpace::build(train, s.size("min_answer_count"));
  out << "answers " << answers.size() << '\n';
  ImageCache cache(mc.vision.input_size);
  const Checkpoint* init_ptr = init ? &*init : nullptr;

  if (*variant != Variant::kExclusive) {
    TrainResult r = finetune(train, val, answers, vocab, init_ptr, mc, tc, cache);
    save_checkpoint(r.best, s.path("out"));
    print_history_summary(r, out);
    out << "checkpoint " << s.str("out") << '\n';
    return;
  }

  // Exclusive: out is a directory of per-category models plus the router.
  const fs::path dir = s.path("out");
  fs::create_directories(dir);
  const std::string& which = s.str("category");
  const bool all = which == "all";
  if (all || which == "router") {
    TrainResult r = train_router(train, val, vocab, mc, tc);
    save_checkpoint(r.best, dir / "router.ckpt");
    out << "router ";
    print_history_summary(r, out);
  }
  if (which == "router") return;
  std::vector<std::size_t> cats;
  if (all) {
    for (std::size_t c = 0; c < kNumCategories; ++c) {
      if (std::any_of(train.begin(), train.end(), [&](const VqaRecord& r) { return r.category == c; })) {
        cats.push_back(c);
      }
    }
  } else {
    const auto c = parse_category(which);
    require(c.has_value(), ErrorKind::kConfig, "key 'category': unknown category '" + which + "'");
    cats.push_back(*c);
  }
  for (std::size_t c : cats) {
    tc.category = c;
    TrainResult r = finetune(train, val, answers, vocab, init_ptr, mc, tc, cache);
    const fs::path p = dir / (std::string(kCategoryNames[c]) + ".ckpt");
    save_checkpoint(r.best, p);
    out << kCategoryNames[c] << ' ';
    print_history_summary(r, out);
  }
}

void cmd_evaluate(const Settings& s, std::ostream& out, std::size_t threads) {
  const auto variant = parse_variant(s.str("variant"));
  require(variant.has_value(), ErrorKind::kConfig,
          "key 'variant': expected general, exclusive or np, got '" + s.str("variant") + "'");
  const auto test = load_vqa_dataset(s.path("test")).records;
  EvalReport report;
  std::string title;
  if (*variant != Variant::kExclusive) {
    const fs::path p = s.path("ckpt");
    const Checkpoint ck = load_checkpoint(p);
    const Model m = instantiate(ck);
    const AnswerSpace answers = answers_of(ck, p);
    ImageCache cache(m.config().vision.input_size);
    report = evaluate_direct(m, answers, Vocab::from_tokens(ck.vocab), test, cache, threads);
    title = *variant == Variant::kGeneral ? "MMBERT General" : "MMBERT NP";
  } else {
    const fs::path dir = s.path("dir");
    const std::string& routing = s.str("routing");
    require(routing == "predicted" || routing == "oracle", ErrorKind::kConfig,
            "key 'routing': expected predicted or oracle, got '" + routing + "'");
    std::vector<std::unique_ptr<Model>> models;
    std::vector<std::unique_ptr<AnswerSpace>> spaces;
    std::map<std::size_t, Expert> experts;
    std::optional<std::vector<std::string>> vocab_tokens;
    for (std::size_t c = 0; c < kNumCategories; ++c) {
      const fs::path p = dir / (std::string(kCategoryNames[c]) + ".ckpt");
      if (!fs::exists(p)) continue;
      const Checkpoint ck = load_checkpoint(p);
      require(!vocab_tokens || *vocab_tokens == ck.vocab, ErrorKind::kData,
              p.string() + ": vocabulary differs from the other per-category checkpoints");
      vocab_tokens = ck.vocab;
      spaces.push_back(std::make_unique<AnswerSpace>(answers_of(ck, p)));
      models.push_back(std::make_unique<Model>(instantiate(ck)));
      experts[c] = Expert{models.back().get(), spaces.back().get()};
    }
    require(!experts.empty(), ErrorKind::kData,
            "evaluate: no per-category checkpoints (<category>.ckpt) found in " + dir.string());
    std::unique_ptr<Model> router;
    if (routing == "predicted") {
      const fs::path rp = dir / "router.ckpt";
      require(fs::exists(rp), ErrorKind::kData, "evaluate: missing router checkpoint " + rp.string());
      const Checkpoint rc = load_checkpoint(rp);
      require(rc.vocab == *vocab_tokens, ErrorKind::kData, rp.string() + ": vocabulary differs from the experts");
      router = std::make_unique<Model>(instantiate(rc));
    }
    ImageCache cache(models.front()->config().vision.input_size);
    report = evaluate_routed(router.get(), experts, Vocab::from_tokens(*vocab_tokens), test, cache, threads);
    title = "MMBERT Exclusive (" + routing + " routing)";
  }
  const std::string table = report.table(title);
  out << table;
  if (!s.str("predictions").empty()) {
    export_predictions(report, s.path("predictions"));
    out << "predictions " << s.str("predictions") << '\n';
  }
  if (!s.str("report").empty()) {
    std::ofstream f(s.path("report"), std::ios::binary);
    f << table;
    require(f.good(), ErrorKind::kIo, "cannot write report " + s.str("report"));
    out << "report " << s.str("report") << '\n';
  }
}

void cmd_predict(const Settings& s, std::ostream& out, std::size_t) {
  const fs::path p = s.path("ckpt");
  const Checkpoint ck = load_checkpoint(p);
  const Model m = instantiate(ck);
  const Prediction pr = predict(m, answers_of(ck, p), Vocab::from_tokens(ck.vocab),
                                decode_image(s.path("image")), s.str("question"));
  out << "answer " << pr.answer << '\n';
}

void cmd_attnmap(const Settings& s, std::ostream& out, std::size_t) {
  const fs::path p = s.path("ckpt");
  const Checkpoint ck = load_checkpoint(p);
  const Model m = instantiate(ck);
  const Vocab vocab = Vocab::from_tokens(ck.vocab);
  const Image img = decode_image(s.path("image"));
  HeatmapOptions o;
  const auto red = parse_reduction(s.str("reduction"));
  require(red.has_value(), ErrorKind::kConfig,
          "key 'reduction': expected last_layer_mean_heads or rollout, got '" + s.str("reduction") + "'");
  o.reduction = *red;
  const std::string& layout = s.str("layout");
  require(layout == "grid" || layout == "profile", ErrorKind::kConfig,
          "key 'layout': expected grid or profile, got '" + layout + "'");
  o.layout = layout == "grid" ? HeatmapLayout::kGrid : HeatmapLayout::kProfile;
  if (s.integer("layer") >= 0) o.layer = static_cast<std::size_t>(s.integer("layer"));
  if (s.integer("head") >= 0) o.head = static_cast<std::size_t>(s.integer("head"));
  if (!ck.answers.empty()) {
    out << "answer " << predict(m, answers_of(ck, p), vocab, img, s.str("question")).answer << '\n';
  }
  const Heatmap h = explain(m, vocab, img, s.str("question"), o);
  out << "heatmap " << h.rows << "x" << h.cols << " layer " << h.layer << ' ' << reduction_name(h.reduction) << '\n';
  for (std::size_t r = 0; r < h.rows; ++r) {
    for (std::size_t c = 0; c < h.cols; ++c) out << (c ? " " : "") << h.at(r, c);
    out << '\n';
  }
  if (o.layout == HeatmapLayout::kGrid) {
    fs::path base = s.str("out").empty() ? fs::path(s.str("image")).filename() : fs::path(s.str("out"));
    RenderOptions ro;
    ro.alpha = s.real("alpha");
    ro.overlay = s.flag("overlay");
    const RenderedPaths rp = render_heatmap(h, img, base, ro);
    out << "wrote " << rp.heatmap.string();
    if (!rp.overlay.empty()) out << ' ' << rp.overlay.string();
    out << '\n';
  }
}

std::vector<Command> commands() {
  const SyntheticSpec sd;
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
  };
  std::vector<Command> cmds;

  cmds.push_back({"gen-synth", "Generate the synthetic image/caption/VQA corpus",
                  {{"out", "synth", "output directory"},
                   {"canvas", std::to_string(sd.canvas), "image side in pixels"},
                   {"object_size", std::to_string(sd.object_size), "object side in pixels"},
                   {"shapes", join(sd.shapes), "shape names"},
                   {"colors", join(sd.colors), "color names"},
                   {"planes", join(sd.planes), "plane names"},
                   {"pretrain_train", std::to_string(sd.pretrain_train), "caption training images"},
                   {"pretrain_val", std::to_string(sd.pretrain_val), "caption validation images"},
                   {"pretrain_test", std::to_string(sd.pretrain_test), "caption test images"},
                   {"vqa_train", std::to_string(sd.vqa_train), "VQA training images"},
                   {"vqa_val", std::to_string(sd.vqa_val), "VQA validation images"},
                   {"vqa_test", std::to_string(sd.vqa_test), "VQA test images"},
                   {"seed", "0", "generator seed"}},
                  cmd_gen_synth});

  cmds.push_back({"build-vocab", "Build a subword vocabulary from captions and questions",
                  {{"captions", "", "comma-separated caption TSV files"},
                   {"vqa", "", "comma-separated VQA TSV files (questions are added)"},
                   {"size", "1000", "target vocabulary size"},
                   {"min_freq", "1", "minimum pair frequency for a merge"},
                   {"out", "vocab.txt", "output vocabulary file"},
                   {"seed", "0", "unused; echoed for reproducibility"}},
                  cmd_build_vocab});

  Keys pre = {{"train", "", "caption TSV for training"},
              {"val", "", "caption TSV for validation (empty = split from train)"},
              {"test", "", "optional caption TSV scored after training"},
              {"vocab", "vocab.txt", "vocabulary file"},
              {"out", "pretrain.ckpt", "output checkpoint"},
              {"keyword_rate", "1", "probability that each keyword is masked"},
              {"fallback_rate", "0.15", "per-token mask rate for captions without keywords"},
              {"seed", "0", "initialization, shuffling, masking and dropout seed"}};
  append(pre, model_keys());
  append(pre, train_keys(TrainConfig::pretrain_defaults()));
  cmds.push_back({"pretrain", "Masked-keyword pretraining on image/caption pairs", pre, cmd_pretrain});

  Keys ft = {{"train", "", "VQA TSV for training"},
             {"val", "", "VQA TSV for validation (empty = split from train)"},
             {"init", "", "pretrained checkpoint (model config and vocabulary come from it)"},
             {"vocab", "vocab.txt", "vocabulary file when training without init"},
             {"variant", "general", "general, exclusive or np"},
             {"category", "all", "exclusive only: all, router or one category name"},
             {"min_answer_count", "1", "answers seen fewer times are dropped from the answer space"},
             {"out", "finetune.ckpt", "output checkpoint (a directory for exclusive)"},
             {"seed", "0", "initialization, shuffling, augmentation and dropout seed"}};
  append(ft, model_keys());
  append(ft, train_keys(TrainConfig::finetune_defaults()));
  cmds.push_back({"finetune", "Answer-classification finetuning", ft, cmd_finetune});

  cmds.push_back({"evaluate", "Score a finetuned model on a VQA split",
                  {{"test", "", "VQA TSV to score"},
                   {"variant", "general", "general, exclusive or np"},
                   {"ckpt", "finetune.ckpt", "checkpoint for general and np"},
                   {"dir", "exclusive", "directory of <category>.ckpt and router.ckpt for exclusive"},
                   {"routing", "predicted", "exclusive only: predicted (router) or oracle (gold category)"},
                   {"predictions", "", "optional per-sample TSV output"},
                   {"report", "", "optional report file"},
                   {"seed", "0", "unused; echoed for reproducibility"}},
                  cmd_evaluate});

  cmds.push_back({"predict", "Answer one question about one image",
                  {{"ckpt", "finetune.ckpt", "finetuned checkpoint"},
                   {"image", "", "PPM image"},
                   {"question", "", "question text"},
                   {"seed", "0", "unused; echoed for reproducibility"}},
                  cmd_predict});

  cmds.push_back({"attnmap", "Write the attention heatmap for one image and question",
                  {{"ckpt", "finetune.ckpt", "checkpoint"},
                   {"image", "", "PPM image"},
                   {"question", "", "question text"},
                   {"out", "", "output base path (default: image file name in the working directory)"},
                   {"reduction", "last_layer_mean_heads", "last_layer_mean_heads or rollout"},
                   {"layout", "grid", "grid (spatial features) or profile (one bin per pooled token)"},
                   {"layer", "-1", "layer index (-1 = last)"},
                   {"head", "-1", "head index (-1 = mean over heads)"},
                   {"alpha", "0.5", "overlay opacity"},
                   {"overlay", "true", "also write the .attn.ppm overlay"},
                   {"seed", "0", "unused; echoed for reproducibility"}},
                  cmd_attnmap});
  return cmds;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kMode:
      return kExitUsage;
    case ErrorKind::kNumeric:
    case ErrorKind::kEmptyLoss:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal BERT for medical visual question answering", "mmvqa"};
  app.require_subcommand(1);
  const auto cmds = commands();
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  std::map<std::string, std::string> config_paths;
  for (const Command& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.description);
    sub->add_option("--config", config_paths[c.name], "key = value file; flags override it");
    for (const Key& k : c.keys) {
      opts[c.name][k.name] = sub->add_option("--" + k.name, flags[c.name][k.name], k.help)->default_str(k.def);
    }
  }

  if (args.empty()) {
    out << app.help();
    return kExitUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (const Command& c : cmds) {
    if (app.got_subcommand(c.name) == false) continue;
    try {
      Settings s(c.name, c.keys);
      if (!config_paths[c.name].empty()) apply_config_file(s, config_paths[c.name]);
      for (const Key& k : c.keys) {
        if (opts[c.name][k.name]->count() > 0) s.set(k.name, flags[c.name][k.name]);
      }
      const std::size_t threads = thread_count();
      s.echo(out, threads);
      c.body(s, out, threads);
      return kExitOk;
    } catch (const Error& e) {
      err << "mmvqa " << c.name << ": " << e.what() << '\n';
      return exit_code(e.kind());
    } catch (const std::exception& e) {
      err << "mmvqa " << c.name << ": " << e.what() << '\n';
      return kExitData;
    }
  }
  return kExitUsage;
}

}  // namespace mmbert::cli
