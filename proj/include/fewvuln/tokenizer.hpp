#pragma once

// WordPiece subword tokenizer over pre-tokenized input, and the alignment
// between original tokens and subword pieces.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"

namespace fewvuln {

using PieceId = std::int32_t;

// Piece ranges are half-open indices into the full piece sequence, which
// starts with the sentence-open special piece and ends with the close piece.
struct TokenizationAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> token_pieces;
  std::vector<std::size_t> special_positions;
  std::size_t num_pieces = 0;
};

struct Encoding {
  std::vector<PieceId> ids;
  TokenizationAlignment alignment;
};

// First piece of each token carries the tag; continuation and special pieces
// are std::nullopt (excluded from loss and metrics).
inline std::vector<std::optional<Tag>> align_labels(const TaggedSentence& sentence,
                                                    const TokenizationAlignment& alignment) {
  if (alignment.token_pieces.size() != sentence.tags.size())
    throw DomainError("alignment covers " + std::to_string(alignment.token_pieces.size()) + " tokens, sentence has " +
                      std::to_string(sentence.tags.size()));
  std::vector<std::optional<Tag>> labels(alignment.num_pieces);
  for (std::size_t i = 0; i < sentence.tags.size(); ++i) {
    auto [b, e] = alignment.token_pieces[i];
    if (b >= e || e > alignment.num_pieces) throw DomainError("token " + std::to_string(i) + " has no pieces");
    labels[b] = sentence.tags[i];
  }
  return labels;
}

namespace detail {

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte; treat as its own unit
}

inline std::vector<std::string_view> utf8_chars(std::string_view s) {
  std::vector<std::string_view> out;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t n = std::min(utf8_length(static_cast<unsigned char>(s[i])), s.size() - i);
    out.push_back(s.substr(i, n));
    i += n;
  }
  return out;
}

// ASCII punctuation as classified by BERT's basic tokenizer.
inline bool is_punct(std::string_view ch) {
  if (ch.size() != 1) return false;
  unsigned char c = static_cast<unsigned char>(ch[0]);
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

}  // namespace detail

struct TokenizerOptions {
  bool split_punctuation = true;
  std::size_t max_chars_per_word = 100;
  std::string unk = "[UNK]";
  std::string cls = "[CLS]";
  std::string sep = "[SEP]";
  std::string pad = "[PAD]";
};

class WordPieceTokenizer {
 public:
  WordPieceTokenizer() = default;

  WordPieceTokenizer(std::vector<std::string> pieces, TokenizerOptions opts) : opts_(std::move(opts)) {
    pieces_ = std::move(pieces);
    for (std::size_t i = 0; i < pieces_.size(); ++i) index_.emplace(pieces_[i], static_cast<PieceId>(i));
    unk_ = require(opts_.unk);
    cls_ = require(opts_.cls);
    sep_ = require(opts_.sep);
    pad_ = require(opts_.pad);
  }

  // Vocabulary from a corpus: specials, every character seen (as word-initial
  // and as "##" continuation), then whole words by descending frequency.
  static WordPieceTokenizer build(const std::vector<TaggedSentence>& corpus, std::size_t max_vocab = 8000,
                                  std::size_t min_word_freq = 2, TokenizerOptions opts = {}) {
    std::map<std::string, std::size_t> words;
    std::map<std::string, std::size_t> chars;
    WordPieceTokenizer splitter({opts.pad, opts.unk, opts.cls, opts.sep}, opts);
    for (const auto& s : corpus)
      for (const auto& tok : s.tokens)
        for (auto w : splitter.basic_split(tok)) {
          ++words[std::string(w)];
          for (auto ch : detail::utf8_chars(w)) ++chars[std::string(ch)];
        }
    std::vector<std::string> pieces{opts.pad, opts.unk, opts.cls, opts.sep};
    for (const auto& [ch, n] : chars) pieces.push_back(ch);
    for (const auto& [ch, n] : chars) pieces.push_back("##" + ch);
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (const auto& [w, n] : words)
      if (n >= min_word_freq && detail::utf8_chars(w).size() > 1) ranked.emplace_back(w, n);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [w, n] : ranked) {
      if (pieces.size() >= max_vocab) break;
      pieces.push_back(w);
    }
    return WordPieceTokenizer(std::move(pieces), std::move(opts));
  }

  static WordPieceTokenizer load(const std::filesystem::path& vocab_file, TokenizerOptions opts = {}) {
    auto text = read_text_file(vocab_file);
    std::vector<std::string> pieces;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      pieces.push_back(line);
    }
    return WordPieceTokenizer(std::move(pieces), std::move(opts));
  }

  void save(const std::filesystem::path& vocab_file) const {
    std::string out;
    for (const auto& p : pieces_) out += p + "\n";
    write_text_file(vocab_file, out);
  }

  std::size_t vocab_size() const noexcept { return pieces_.size(); }
  const std::string& piece(PieceId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  const TokenizerOptions& options() const noexcept { return opts_; }
  PieceId cls_id() const noexcept { return cls_; }
  PieceId sep_id() const noexcept { return sep_; }
  PieceId unk_id() const noexcept { return unk_; }
  PieceId pad_id() const noexcept { return pad_; }

  // Pieces of one original token. Never empty.
  std::vector<PieceId> tokenize_token(std::string_view token) const {
    std::vector<PieceId> out;
    for (auto w : basic_split(token)) {
      auto pieces = wordpiece(w);
      out.insert(out.end(), pieces.begin(), pieces.end());
    }
    if (out.empty()) out.push_back(unk_);
    return out;
  }

  Encoding encode(const std::vector<std::string>& tokens) const {
    Encoding enc;
    enc.ids.push_back(cls_);
    enc.alignment.special_positions.push_back(0);
    for (const auto& tok : tokens) {
      auto pieces = tokenize_token(tok);
      const std::size_t b = enc.ids.size();
      enc.ids.insert(enc.ids.end(), pieces.begin(), pieces.end());
      enc.alignment.token_pieces.emplace_back(b, enc.ids.size());
    }
    enc.alignment.special_positions.push_back(enc.ids.size());
    enc.ids.push_back(sep_);
    enc.alignment.num_pieces = enc.ids.size();
    return enc;
  }

  std::vector<std::string_view> basic_split(std::string_view token) const {
    std::vector<std::string_view> out;
    if (!opts_.split_punctuation) {
      out.push_back(token);
      return out;
    }
    std::size_t start = 0, pos = 0;
    for (auto ch : detail::utf8_chars(token)) {
      if (detail::is_punct(ch)) {
        if (pos > start) out.push_back(token.substr(start, pos - start));
        out.push_back(ch);
        start = pos + ch.size();
      }
      pos += ch.size();
    }
    if (pos > start) out.push_back(token.substr(start, pos - start));
    return out;
  }

 private:
  PieceId require(const std::string& p) const {
    auto it = index_.find(p);
    if (it == index_.end()) throw DomainError("vocabulary lacks special piece " + p);
    return it->second;
  }

  // Greedy longest-match-first; a word with an unmatched remainder becomes one unknown piece.
  std::vector<PieceId> wordpiece(std::string_view word) const {
    auto chars = detail::utf8_chars(word);
    if (chars.size() > opts_.max_chars_per_word) return {unk_};
    std::vector<std::size_t> bounds{0};
    for (auto ch : chars) bounds.push_back(bounds.back() + ch.size());
    std::vector<PieceId> out;
    std::size_t start = 0;
    std::string candidate;
    while (start < chars.size()) {
      std::size_t end = chars.size();
      PieceId found = -1;
      while (end > start) {
        candidate.assign(start > 0 ? "##" : "");
        candidate.append(word.substr(bounds[start], bounds[end] - bounds[start]));
        auto it = index_.find(candidate);
        if (it != index_.end()) {
          found = it->second;
          break;
        }
        --end;
      }
      if (found < 0) return {unk_};
      out.push_back(found);
      start = end;
    }
    return out;
  }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, PieceId> index_;
  TokenizerOptions opts_;
  PieceId unk_ = 0, cls_ = 0, sep_ = 0, pad_ = 0;
};

}  // namespace fewvuln
