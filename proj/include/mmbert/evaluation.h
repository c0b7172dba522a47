#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmbert/data.h"
#include "mmbert/model.h"
#include "mmbert/tokenizer.h"
#include "mmbert/training.h"

namespace mmbert {

// Exact match after normalize_answer. Lengths must agree and be non-zero.
double accuracy(std::span<const std::string> preds, std::span<const std::string> golds);

// Cumulative BLEU with uniform weights over n = 1..N, N = min(4, |gold|,
// |pred|) on normalized whitespace tokens, clipped n-gram precision, no
// smoothing, brevity penalty exp(1 - |gold| / |pred|) when |pred| < |gold|.
double bleu(std::string_view pred, std::string_view gold);

struct SampleRow {
  std::string id;
  std::size_t category = 0;
  std::string question;
  std::string gold;
  std::string prediction;
  bool correct = false;
  double bleu = 0.0;
};

struct Score {
  std::size_t count = 0;
  std::size_t correct = 0;
  double bleu_sum = 0.0;

  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
  double bleu() const { return count ? bleu_sum / static_cast<double>(count) : 0.0; }
};

struct EvalReport {
  std::array<Score, kNumCategories> categories;
  Score overall;
  std::vector<SampleRow> rows;

  static EvalReport from_rows(std::vector<SampleRow> rows);
  // Aligned table: one column per category plus Overall.
  std::string table(std::string_view title = "") const;
};

// Scores a prediction against its gold answer.
SampleRow score_sample(std::string id, std::size_t category, std::string question, std::string gold,
                       std::string prediction);

struct Prediction {
  std::size_t answer_id = 0;
  std::string answer;
  std::vector<double> logits;
};

// One image + question through a finetuned model.
Prediction predict(const Model& model, const AnswerSpace& answers, const Vocab& vocab,
                   const Image& image, const std::string& question);

// Text-only category prediction.
std::size_t predict_category(const Model& router, const Vocab& vocab, const std::string& question);

// A General (or NP) model answering every question. Samples are independent,
// so the report does not depend on the worker count.
EvalReport evaluate_direct(const Model& model, const AnswerSpace& answers, const Vocab& vocab,
                           std::span<const VqaRecord> records, ImageCache& images,
                           std::size_t workers = 1);

struct Expert {
  const Model* model = nullptr;
  const AnswerSpace* answers = nullptr;
};

// Exclusive evaluation: the router (or, when router is null, the gold
// category) picks the per-category expert. Fails when a record routes to a
// category without an expert.
EvalReport evaluate_routed(const Model* router, const std::map<std::size_t, Expert>& experts,
                           const Vocab& vocab, std::span<const VqaRecord> records, ImageCache& images,
                           std::size_t workers = 1);

// TSV with header: id, category, question, gold, prediction, correct, bleu.
void export_predictions(const EvalReport& report, const std::filesystem::path& path);
std::vector<SampleRow> load_predictions(const std::filesystem::path& path);

}  // namespace mmbert
