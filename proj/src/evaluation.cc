#include "mmbert/evaluation.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "mmbert/error.h"
#include "mmbert/tape.h"

namespace mmbert {
namespace {

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{normalize_answer(text)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks,
                                                             std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

Image fit_image(const Image& image, std::size_t size) {
  if (image.height == size && image.width == size) return image;
  return resize_bilinear(image, size, size);
}

// Runs fn(i) for i in [0, n) on up to `workers` threads, each taking a
// strided share of the indices.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string format_bleu(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

}  // namespace

double accuracy(std::span<const std::string> preds, std::span<const std::string> golds) {
  require(preds.size() == golds.size(), ErrorKind::kContract,
          "accuracy: " + std::to_string(preds.size()) + " predictions vs " +
              std::to_string(golds.size()) + " gold answers");
  require(!preds.empty(), ErrorKind::kContract, "accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (normalize_answer(preds[i]) == normalize_answer(golds[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double bleu(std::string_view pred, std::string_view gold) {
  const auto g = words(gold);
  require(!g.empty(), ErrorKind::kContract, "bleu: empty reference");
  const auto p = words(pred);
  if (p.empty()) return 0.0;
  const std::size_t n_max = std::min<std::size_t>({4, g.size(), p.size()});
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    const auto pc = ngram_counts(p, n);
    const auto gc = ngram_counts(g, n);
    std::size_t clipped = 0;
    for (const auto& [gram, c] : pc) {
      auto it = gc.find(gram);
      if (it != gc.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(p.size() - n + 1));
  }
  double score = std::exp(log_sum / static_cast<double>(n_max));
  if (p.size() < g.size()) {
    score *= std::exp(1.0 - static_cast<double>(g.size()) / static_cast<double>(p.size()));
  }
  return score;
}

SampleRow score_sample(std::string id, std::size_t category, std::string question, std::string gold,
                       std::string prediction) {
  SampleRow row;
  row.correct = normalize_answer(prediction) == normalize_answer(gold);
  row.bleu = bleu(prediction, gold);
  row.id = std::move(id);
  row.category = category;
  row.question = std::move(question);
  row.gold = std::move(gold);
  row.prediction = std::move(prediction);
  return row;
}

EvalReport EvalReport::from_rows(std::vector<SampleRow> rows) {
  EvalReport r;
  for (const SampleRow& s : rows) {
    require(s.category < kNumCategories, ErrorKind::kData, "report: bad category index");
    for (Score* sc : {&r.categories[s.category], &r.overall}) {
      ++sc->count;
      if (s.correct) ++sc->correct;
      sc->bleu_sum += s.bleu;
    }
  }
  r.rows = std::move(rows);
  return r;
}

std::string EvalReport::table(std::string_view title) const {
  std::ostringstream out;
  if (!title.empty()) out << title << '\n';
  char buf[64];
  auto cell = [&](const Score& s, double v) {
    if (s.count == 0) {
      std::snprintf(buf, sizeof buf, "%12s", "-");
    } else {
      std::snprintf(buf, sizeof buf, "%12.2f", 100.0 * v);
    }
    out << buf;
  };
  std::snprintf(buf, sizeof buf, "%-10s", "");
  out << buf;
  for (std::string_view t : kCategoryTitles) {
    std::snprintf(buf, sizeof buf, "%12.*s", static_cast<int>(t.size()), t.data());
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%12s\n", "Overall");
  out << buf;

  std::snprintf(buf, sizeof buf, "%-10s", "Accuracy");
  out << buf;
  for (const Score& s : categories) cell(s, s.accuracy());
  cell(overall, overall.accuracy());
  out << '\n';

  std::snprintf(buf, sizeof buf, "%-10s", "BLEU");
  out << buf;
  for (const Score& s : categories) cell(s, s.bleu());
  cell(overall, overall.bleu());
  out << '\n';

  std::snprintf(buf, sizeof buf, "%-10s", "Count");
  out << buf;
  for (const Score& s : categories) {
    std::snprintf(buf, sizeof buf, "%12zu", s.count);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%12zu\n", overall.count);
  out << buf;
  return out.str();
}

Prediction predict(const Model& model, const AnswerSpace& answers, const Vocab& vocab,
                   const Image& image, const std::string& question) {
  const ModelConfig& c = model.config();
  require(answers.size() == c.answer_count, ErrorKind::kConfig,
          "predict: answer space has " + std::to_string(answers.size()) + " entries, model has " +
              std::to_string(c.answer_count));
  NoGradGuard guard;
  const Image img = fit_image(image, c.vision.input_size);
  Tensor feats =
      encode_image(image_to_tensor(img, c.dtype), model.params().vision, c.vision).tokens();
  MultimodalSequence seq = assemble_sequence(feats, tokenize(question, vocab).ids, model);
  EncoderOutput out = encoder_forward(seq, model);
  Tensor logits = vqa_logits(out, seq, model);
  Prediction p;
  p.logits = logits.to_vector();
  p.answer_id = argmax_rows(logits).at(0);
  p.answer = answers.answer(p.answer_id);
  return p;
}

std::size_t predict_category(const Model& router, const Vocab& vocab, const std::string& question) {
  NoGradGuard guard;
  MultimodalSequence seq = assemble_text_only(tokenize(question, vocab).ids, router);
  EncoderOutput out = encoder_forward(seq, router);
  return argmax_rows(category_logits(out, seq, router)).at(0);
}

EvalReport evaluate_direct(const Model& model, const AnswerSpace& answers, const Vocab& vocab,
                           std::span<const VqaRecord> records, ImageCache& images,
                           std::size_t workers) {
  std::vector<const Image*> imgs;
  for (const VqaRecord& r : records) imgs.push_back(&images.get(r.image));
  std::vector<SampleRow> rows(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const VqaRecord& r = records[i];
    Prediction p = predict(model, answers, vocab, *imgs[i], r.question);
    rows[i] = score_sample(r.image.string(), r.category, r.question, r.answer, p.answer);
  });
  return EvalReport::from_rows(std::move(rows));
}

EvalReport evaluate_routed(const Model* router, const std::map<std::size_t, Expert>& experts,
                           const Vocab& vocab, std::span<const VqaRecord> records, ImageCache& images,
                           std::size_t workers) {
  std::vector<const Image*> imgs;
  for (const VqaRecord& r : records) imgs.push_back(&images.get(r.image));
  std::vector<SampleRow> rows(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const VqaRecord& r = records[i];
    const std::size_t route = router ? predict_category(*router, vocab, r.question) : r.category;
    auto it = experts.find(route);
    require(it != experts.end() && it->second.model && it->second.answers, ErrorKind::kData,
            "evaluate: no exclusive model for category " + std::string(kCategoryNames.at(route)) +
                " (question \"" + r.question + "\")");
    Prediction p = predict(*it->second.model, *it->second.answers, vocab, *imgs[i], r.question);
    rows[i] = score_sample(r.image.string(), r.category, r.question, r.answer, p.answer);
  });
  return EvalReport::from_rows(std::move(rows));
}

void export_predictions(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << "id\tcategory\tquestion\tgold\tprediction\tcorrect\tbleu\n";
  for (const SampleRow& r : report.rows) {
    out << r.id << '\t' << kCategoryNames.at(r.category) << '\t' << r.question << '\t' << r.gold
        << '\t' << r.prediction << '\t' << (r.correct ? 1 : 0) << '\t' << format_bleu(r.bleu)
        << '\n';
  }
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<SampleRow> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<SampleRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) continue;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      std::size_t tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = path.string() + ":" + std::to_string(lineno);
    require(f.size() == 7, ErrorKind::kData, where + ": expected 7 columns");
    auto cat = parse_category(f[1]);
    require(cat.has_value(), ErrorKind::kData, where + ": unknown category " + f[1]);
    SampleRow r;
    r.id = f[0];
    r.category = *cat;
    r.question = f[2];
    r.gold = f[3];
    r.prediction = f[4];
    r.correct = f[5] == "1";
    const char* b = f[6].data();
    auto res = std::from_chars(b, b + f[6].size(), r.bleu);
    require(res.ec == std::errc() && res.ptr == b + f[6].size(), ErrorKind::kData,
            where + ": bad bleu value");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mmbert
