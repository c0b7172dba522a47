#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmbert {

// Question categories in report order.
inline constexpr std::size_t kNumCategories = 5;
inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "modality", "plane", "organ", "abnormality", "yesno"};
inline constexpr std::array<std::string_view, kNumCategories> kCategoryTitles = {
    "Modality", "Plane", "Organ", "Abnormality", "Yes/No"};
inline constexpr std::size_t kYesNoCategory = 4;

// Accepts the canonical names plus common spellings ("Organ system",
// "Yes/No", ...), case-insensitively.
std::optional<std::size_t> parse_category(std::string_view name);

// Lowercase, collapse whitespace, strip surrounding ASCII punctuation.
std::string normalize_answer(std::string_view text);

struct CaptionRecord {
  std::filesystem::path image;
  std::string caption;
  std::vector<std::string> keywords;
};

struct VqaRecord {
  std::filesystem::path image;
  std::size_t category = 0;
  std::string question;
  std::string answer;
};

struct LoadSummary {
  std::size_t lines = 0;      // non-comment, non-blank
  std::size_t malformed = 0;
  std::size_t dropped_keywords = 0;
  std::vector<std::string> messages;  // first few problems, "file:line: reason"
};

struct CaptionCorpus {
  std::vector<CaptionRecord> records;
  LoadSummary summary;
};

struct VqaDataset {
  std::vector<VqaRecord> records;
  LoadSummary summary;
};

// TSV: image_path, caption, semicolon-joined keywords. Relative image paths
// resolve against the file's directory. Fails when more than 1% of lines are
// malformed.
CaptionCorpus load_caption_corpus(const std::filesystem::path& path);
// TSV: image_path, category, question, answer. Records whose answer is yes or
// no are assigned to the yes/no category.
VqaDataset load_vqa_dataset(const std::filesystem::path& path);

class AnswerSpace {
 public:
  // Normalized answers with count >= min_count, by (count desc, text asc).
  static AnswerSpace build(std::span<const VqaRecord> records, std::size_t min_count = 1);
  static AnswerSpace from_answers(std::vector<std::string> answers);

  std::size_t size() const { return answers_.size(); }
  const std::string& answer(std::size_t id) const;
  std::optional<std::size_t> find(std::string_view answer) const;  // normalizes
  const std::vector<std::string>& answers() const { return answers_; }

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SyntheticSpec {
  std::size_t canvas = 64;
  std::size_t object_size = 20;
  std::vector<std::string> shapes{"circle", "square", "cross"};
  std::vector<std::string> colors{"red", "green", "blue"};
  std::vector<std::string> planes{"axial", "sagittal", "coronal"};
  // Images per split; splits draw from disjoint id ranges.
  std::size_t pretrain_train = 2000;
  std::size_t pretrain_val = 200;
  std::size_t pretrain_test = 400;
  std::size_t vqa_train = 300;
  std::size_t vqa_val = 100;
  std::size_t vqa_test = 300;
  std::uint64_t seed = 0;

  void validate() const;
};

// Bayes-optimal held-out masked-keyword accuracy when the image is withheld:
// attributes are sampled uniformly and independently, so each masked slot is
// guessed with probability 1 / |values|; averaged over the caption's slots.
double text_only_ceiling(const SyntheticSpec& spec);

struct SyntheticLayout {
  std::filesystem::path root;
  std::filesystem::path captions_train, captions_val, captions_test;
  std::filesystem::path vqa_train, vqa_val, vqa_test;
  std::filesystem::path boxes;

  static SyntheticLayout under(const std::filesystem::path& root);
};

// Writes images/*.ppm, the caption and VQA TSV splits and boxes.tsv.
SyntheticLayout gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel bounds
};

// boxes.tsv: image_path, x0, y0, x1, y1. Keys are the paths as resolved by
// the loaders.
std::unordered_map<std::string, Box> load_boxes(const std::filesystem::path& path);

}  // namespace mmbert
