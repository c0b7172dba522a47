#include "mmbert/tokenizer.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mmbert/error.h"
#include "mmbert/ops.h"

namespace mmbert {
namespace {

constexpr std::size_t kMaxWordChars = 100;
const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

struct Word {
  std::string text;  // lowercased
  ByteSpan span;
};

// Whitespace split with ASCII punctuation emitted as standalone words.
std::vector<Word> split_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (is_ascii_punct(c)) {
      words.push_back({std::string(1, static_cast<char>(c)), {i, i + 1}});
      ++i;
      continue;
    }
    const std::size_t begin = i;
    while (i < text.size()) {
      const unsigned char d = static_cast<unsigned char>(text[i]);
      if (is_space(d) || is_ascii_punct(d)) break;
      ++i;
    }
    words.push_back({ascii_lower(text.substr(begin, i - begin)), {begin, i}});
  }
  return words;
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

// Byte offsets of each code point start, plus the end offset.
std::vector<std::size_t> char_boundaries(const std::string& word) {
  std::vector<std::size_t> b;
  std::size_t i = 0;
  while (i < word.size()) {
    b.push_back(i);
    i += std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
  }
  b.push_back(word.size());
  return b;
}

std::string symbol_text(const std::string& symbol) {
  if (symbol.starts_with(kContinuationPrefix)) return symbol.substr(kContinuationPrefix.size());
  return symbol;
}

}  // namespace

bool is_ascii_punct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
         (c >= 123 && c <= 126);
}

std::string ascii_lower(std::string_view text) {
  std::string out(text);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

Vocab Vocab::build(std::span<const std::string> corpus, std::size_t target_size,
                   std::size_t min_freq) {
  // Unique words in first-seen order with their frequencies.
  std::vector<std::string> word_order;
  std::map<std::string, std::size_t> word_index;
  std::vector<std::size_t> word_counts;
  for (const std::string& line : corpus) {
    for (const Word& w : split_words(line)) {
      auto [it, inserted] = word_index.emplace(w.text, word_order.size());
      if (inserted) {
        word_order.push_back(w.text);
        word_counts.push_back(0);
      }
      ++word_counts[it->second];
    }
  }
  require(!word_order.empty(), ErrorKind::kData, "build_vocab: corpus is empty");

  std::vector<std::vector<std::string>> symbols;
  std::set<std::string> alphabet;
  for (const std::string& w : word_order) {
    const auto b = char_boundaries(w);
    std::vector<std::string> s;
    for (std::size_t i = 0; i + 1 < b.size(); ++i) {
      std::string piece = w.substr(b[i], b[i + 1] - b[i]);
      if (i > 0) piece = std::string(kContinuationPrefix) + piece;
      alphabet.insert(piece);
      s.push_back(std::move(piece));
    }
    symbols.push_back(std::move(s));
  }
  require(target_size > kSpecials.size() + alphabet.size(), ErrorKind::kConfig,
          "build_vocab: target size " + std::to_string(target_size) +
              " must exceed specials + alphabet = " +
              std::to_string(kSpecials.size() + alphabet.size()));

  std::vector<std::string> tokens = kSpecials;
  std::set<std::string> present(tokens.begin(), tokens.end());
  // Word-initial characters first, continuations after; each group sorted.
  for (const std::string& a : alphabet) {
    if (!a.starts_with(kContinuationPrefix) && present.insert(a).second) tokens.push_back(a);
  }
  for (const std::string& a : alphabet) {
    if (a.starts_with(kContinuationPrefix) && present.insert(a).second) tokens.push_back(a);
  }

  while (tokens.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (std::size_t w = 0; w < symbols.size(); ++w) {
      const auto& s = symbols[w];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) pair_counts[{s[i], s[i + 1]}] += word_counts[w];
    }
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr || best_count < std::max<std::size_t>(min_freq, 1)) break;
    const std::string merged = best->first + symbol_text(best->second);
    for (auto& s : symbols) {
      std::vector<std::string> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == best->first && s[i + 1] == best->second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
    }
    if (present.insert(merged).second) tokens.push_back(merged);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  require(tokens.size() >= kSpecials.size(), ErrorKind::kData,
          "vocab must start with the five special tokens");
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    require(tokens[i] == kSpecials[i], ErrorKind::kData,
            "vocab line " + std::to_string(i + 1) + " must be " + kSpecials[i] + ", got '" +
                tokens[i] + "'");
  }
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    require(!t.empty(), ErrorKind::kData, "vocab token " + std::to_string(i) + " is empty");
    for (unsigned char c : t) {
      require(!is_space(c), ErrorKind::kData,
              "vocab token " + std::to_string(i) + " contains whitespace");
    }
    require(v.index_.emplace(t, static_cast<int>(i)).second, ErrorKind::kData,
            "duplicate vocab token '" + t + "'");
  }
  v.tokens_ = std::move(tokens);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  try {
    return from_tokens(std::move(tokens));
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write vocab file " + path.string());
  out << serialize();
  require(out.good(), ErrorKind::kIo, "failed writing vocab file " + path.string());
}

std::string Vocab::serialize() const {
  std::string out;
  for (const std::string& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

const std::string& Vocab::token(int id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorKind::kContract,
          "token id " + std::to_string(id) + " out of range for vocab of size " +
              std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab) {
  TokenSequence seq;
  for (const Word& w : split_words(text)) {
    const auto b = char_boundaries(w.text);
    const std::size_t n_chars = b.size() - 1;
    std::vector<std::pair<int, ByteSpan>> pieces;
    bool ok = n_chars <= kMaxWordChars;
    std::size_t start = 0;
    while (ok && start < n_chars) {
      bool found = false;
      for (std::size_t end = n_chars; end > start; --end) {
        std::string piece = w.text.substr(b[start], b[end] - b[start]);
        if (start > 0) piece = std::string(kContinuationPrefix) + piece;
        if (auto id = vocab.find(piece)) {
          pieces.push_back({*id, {w.span.begin + b[start], w.span.begin + b[end]}});
          start = end;
          found = true;
          break;
        }
      }
      ok = found;
    }
    if (!ok) {
      pieces.assign(1, {kUnkId, w.span});
    }
    for (const auto& [id, span] : pieces) {
      seq.ids.push_back(id);
      seq.offsets.push_back(span);
    }
  }
  seq.keyword.assign(seq.ids.size(), false);
  seq.keyword_group.assign(seq.ids.size(), -1);
  return seq;
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab,
                       std::span<const std::string> keywords) {
  TokenSequence seq = tokenize(text, vocab);
  const std::string lowered = ascii_lower(text);
  std::vector<ByteSpan> spans;
  for (const std::string& kw : keywords) {
    const std::string needle = ascii_lower(kw);
    if (needle.empty()) continue;
    std::size_t pos = lowered.find(needle);
    while (pos != std::string::npos) {
      spans.push_back({pos, pos + needle.size()});
      pos = lowered.find(needle, pos + needle.size());
    }
  }
  std::sort(spans.begin(), spans.end(),
            [](const ByteSpan& a, const ByteSpan& b) { return a.begin < b.begin; });
  std::vector<ByteSpan> merged;
  for (const ByteSpan& s : spans) {
    if (!merged.empty() && s.begin < merged.back().end) {
      merged.back().end = std::max(merged.back().end, s.end);
    } else {
      merged.push_back(s);
    }
  }
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const ByteSpan& o = seq.offsets[t];
    for (std::size_t g = 0; g < merged.size(); ++g) {
      if (o.begin < merged[g].end && merged[g].begin < o.end) {
        seq.keyword[t] = true;
        seq.keyword_group[t] = static_cast<int>(g);
        break;
      }
    }
  }
  return seq;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& t = vocab.token(id);
    if (id < kNumSpecialTokens) continue;
    if (t.starts_with(kContinuationPrefix) && !out.empty()) {
      out += t.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

MaskingOutcome mask_keywords(const TokenSequence& seq, const MaskPolicy& policy, Rng& rng) {
  MaskingOutcome out;
  out.input_ids = seq.ids;
  out.labels.assign(seq.size(), ops::kIgnoreIndex);
  bool has_keywords = false;
  int groups = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.keyword[i]) {
      has_keywords = true;
      groups = std::max(groups, seq.keyword_group[i] + 1);
    }
  }
  auto mask_at = [&](std::size_t i) {
    out.labels[i] = seq.ids[i];
    out.input_ids[i] = kMaskId;
    ++out.masked_count;
  };
  if (has_keywords) {
    std::vector<bool> selected(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) selected[g] = rng.uniform() < policy.keyword_rate;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq.keyword[i] && seq.keyword_group[i] >= 0 && selected[seq.keyword_group[i]]) {
        mask_at(i);
      }
    }
  } else {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const bool draw = rng.uniform() < policy.fallback_rate;
      if (draw && seq.ids[i] >= kNumSpecialTokens) mask_at(i);
    }
  }
  out.skippable = out.masked_count == 0;
  return out;
}

}  // namespace mmbert
