#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmbert/random.h"

namespace mmbert {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecialTokens = 5;
inline constexpr std::string_view kContinuationPrefix = "##";

// Subword vocabulary. Ids are dense; the five special tokens occupy 0..4 in
// the order [PAD] [UNK] [CLS] [SEP] [MASK].
class Vocab {
 public:
  // Greedy frequency-driven merging of adjacent symbols, starting from the
  // character alphabet of the corpus. Deterministic for a given line order.
  static Vocab build(std::span<const std::string> corpus, std::size_t target_size,
                     std::size_t min_freq = 1);
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab load(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  // File image: one token per line, line number == id.
  std::string serialize() const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<ByteSpan> offsets;
  std::vector<bool> keyword;
  // Index of the (unioned) keyword span a token belongs to, or -1.
  std::vector<int> keyword_group;

  std::size_t size() const { return ids.size(); }
};

// Lowercases, splits on whitespace and ASCII punctuation, then segments each
// word greedily longest-match-first. Words that cannot be segmented become a
// single [UNK].
TokenSequence tokenize(std::string_view text, const Vocab& vocab);
// As above, flagging every token whose byte span intersects a
// case-insensitive occurrence of one of the keywords.
TokenSequence tokenize(std::string_view text, const Vocab& vocab,
                       std::span<const std::string> keywords);

// Joins tokens with spaces, fusing "##" continuations and dropping specials.
std::string detokenize(std::span<const int> ids, const Vocab& vocab);

struct MaskPolicy {
  double keyword_rate = 1.0;
  double fallback_rate = 0.15;
};

struct MaskingOutcome {
  std::vector<int> input_ids;
  // Original id where masked, ops::kIgnoreIndex elsewhere.
  std::vector<int> labels;
  std::size_t masked_count = 0;
  // Nothing was masked, so the sample carries no MLM signal.
  bool skippable = false;
};

// Replaces every piece of each selected keyword with [MASK]; sequences
// without keywords fall back to independent per-token masking.
MaskingOutcome mask_keywords(const TokenSequence& seq, const MaskPolicy& policy, Rng& rng);

std::string ascii_lower(std::string_view text);
bool is_ascii_punct(unsigned char c);

}  // namespace mmbert
