#pragma once

// Data model, CoNLL-style I/O, span extraction and imbalance statistics for
// the vulnerability-report NER corpus (13 categories, tags SN/SV/O).

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fewvuln/errors.hpp"

namespace fewvuln {

// Index order matters: it is the tie-break order for decoding and the column
// order of every probability table.
enum class Tag : std::uint8_t { SN = 0, SV = 1, O = 2 };

inline constexpr std::size_t kNumTags = 3;
inline constexpr std::array<Tag, kNumTags> kAllTags{Tag::SN, Tag::SV, Tag::O};
inline constexpr std::array<Tag, 2> kEntityTags{Tag::SN, Tag::SV};

constexpr std::size_t tag_index(Tag t) noexcept { return static_cast<std::size_t>(t); }
constexpr Tag tag_from_index(std::size_t i) noexcept { return static_cast<Tag>(i); }
constexpr bool is_entity(Tag t) noexcept { return t != Tag::O; }

inline std::string_view to_string(Tag t) noexcept {
  switch (t) {
    case Tag::SN: return "SN";
    case Tag::SV: return "SV";
    case Tag::O: return "O";
  }
  return "O";
}

inline std::optional<Tag> parse_tag(std::string_view s) noexcept {
  if (s == "SN") return Tag::SN;
  if (s == "SV") return Tag::SV;
  if (s == "O") return Tag::O;
  return std::nullopt;
}

struct TaggedSentence {
  std::vector<std::string> tokens;
  std::vector<Tag> tags;
  std::optional<std::string> source_id;

  std::size_t size() const noexcept { return tokens.size(); }
  friend bool operator==(const TaggedSentence&, const TaggedSentence&) = default;
};

inline bool has_whitespace(std::string_view s) noexcept {
  return std::any_of(s.begin(), s.end(), [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
  });
}

// Throws DomainError if the sentence breaks a TaggedSentence invariant.
inline void validate(const TaggedSentence& s) {
  if (s.tokens.empty()) throw DomainError("sentence has no tokens");
  if (s.tokens.size() != s.tags.size())
    throw DomainError("sentence has " + std::to_string(s.tokens.size()) + " tokens but " +
                      std::to_string(s.tags.size()) + " tags");
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (s.tokens[i].empty()) throw DomainError("empty token at index " + std::to_string(i));
    if (has_whitespace(s.tokens[i])) throw DomainError("token with whitespace at index " + std::to_string(i));
  }
  if (s.source_id && (s.source_id->empty() || has_whitespace(*s.source_id)))
    throw DomainError("source id must be a non-empty word");
}

enum class Category : std::uint8_t {
  memc, bypass, csrf, dirtra, dos, execution, fileinc, gainpre, httprs, infor, overflow, sqli, xss
};

inline constexpr std::size_t kNumCategories = 13;
inline constexpr std::array<Category, kNumCategories> kAllCategories{
    Category::memc,    Category::bypass,  Category::csrf,   Category::dirtra, Category::dos,
    Category::execution, Category::fileinc, Category::gainpre, Category::httprs, Category::infor,
    Category::overflow, Category::sqli,    Category::xss};
// The transfer targets, in the fixed (alphabetical) aggregation order.
inline constexpr std::array<Category, 12> kTransferCategories{
    Category::bypass,  Category::csrf,  Category::dirtra,   Category::dos,  Category::execution, Category::fileinc,
    Category::gainpre, Category::httprs, Category::infor, Category::overflow, Category::sqli,    Category::xss};

inline std::string_view to_string(Category c) noexcept {
  static constexpr std::array<std::string_view, kNumCategories> names{
      "memc", "bypass", "csrf", "dirtra", "dos", "execution", "fileinc",
      "gainpre", "httprs", "infor", "overflow", "sqli", "xss"};
  return names[static_cast<std::size_t>(c)];
}

inline std::optional<Category> parse_category(std::string_view s) noexcept {
  for (Category c : kAllCategories)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

enum class Split : std::uint8_t { train, valid, test };
inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::valid, Split::test};

inline std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

inline std::optional<Split> parse_split(std::string_view s) noexcept {
  for (Split sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  return std::nullopt;
}

using CorpusKey = std::pair<Category, Split>;

struct Corpus {
  std::map<CorpusKey, std::vector<TaggedSentence>> entries;

  bool contains(Category c, Split s) const { return entries.count({c, s}) != 0; }

  const std::vector<TaggedSentence>& at(Category c, Split s) const {
    auto it = entries.find({c, s});
    if (it == entries.end())
      throw DomainError("corpus has no " + std::string(to_string(c)) + "/" + std::string(to_string(s)) + " split");
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// CoNLL-style text format
//
//   # id = CVE-2015-2384        (optional, first line of a block)
//   Internet<TAB>SN
//   Explorer<TAB>SN
//   11<TAB>SV
//   <blank line>
// ---------------------------------------------------------------------------

enum class ColumnDelimiter { tab, whitespace };

struct ParseOptions {
  ColumnDelimiter delimiter = ColumnDelimiter::tab;
};

namespace detail {

inline constexpr std::string_view kIdPrefix = "# id = ";

inline std::string_view trim_cr(std::string_view line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
  return line;
}

inline bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t'; });
}

inline std::vector<std::string_view> split_columns(std::string_view line, ColumnDelimiter d) {
  std::vector<std::string_view> cols;
  if (d == ColumnDelimiter::tab) {
    std::size_t start = 0;
    for (;;) {
      auto pos = line.find('\t', start);
      cols.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return cols;
  }
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) cols.push_back(line.substr(i, j - i));
    i = j;
  }
  return cols;
}

}  // namespace detail

inline std::vector<TaggedSentence> parse_conll(std::string_view text, const ParseOptions& opts = {}) {
  std::vector<TaggedSentence> out;
  TaggedSentence cur;
  auto flush = [&] {
    if (!cur.tokens.empty()) out.push_back(std::move(cur));
    cur = TaggedSentence{};
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    line = detail::trim_cr(line);

    if (detail::is_blank(line)) {
      flush();
      continue;
    }
    if (line.substr(0, detail::kIdPrefix.size()) == detail::kIdPrefix) {
      if (!cur.tokens.empty()) throw ParseError("sentence id inside a sentence block", line_no);
      auto id = line.substr(detail::kIdPrefix.size());
      if (id.empty() || has_whitespace(id)) throw ParseError("malformed sentence id", line_no);
      cur.source_id = std::string(id);
      continue;
    }
    auto cols = detail::split_columns(line, opts.delimiter);
    if (cols.size() != 2)
      throw ParseError("expected 2 columns (token, tag), found " + std::to_string(cols.size()), line_no);
    if (cols[0].empty() || has_whitespace(cols[0])) throw ParseError("empty token or token with whitespace", line_no);
    auto tag = parse_tag(cols[1]);
    if (!tag) throw TagError(std::string(cols[1]), line_no);
    cur.tokens.emplace_back(cols[0]);
    cur.tags.push_back(*tag);
  }
  flush();
  return out;
}

inline std::string serialize_conll(const std::vector<TaggedSentence>& sentences) {
  std::string out;
  bool first = true;
  for (const auto& s : sentences) {
    validate(s);
    if (!first) out += '\n';
    first = false;
    if (s.source_id) {
      out += detail::kIdPrefix;
      out += *s.source_id;
      out += '\n';
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      out += s.tokens[i];
      out += '\t';
      out += to_string(s.tags[i]);
      out += '\n';
    }
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<TaggedSentence> read_conll_file(const std::filesystem::path& path, const ParseOptions& opts = {}) {
  auto text = read_text_file(path);
  try {
    return parse_conll(text, opts);
  } catch (ParseError& e) {
    e.set_file(path.string());
    throw;
  }
}

inline void write_conll_file(const std::filesystem::path& path, const std::vector<TaggedSentence>& sentences) {
  write_text_file(path, serialize_conll(sentences));
}

// Dataset layout: <root>/<category>/<split>.<ext>, ext in {txt, conll, tsv}.
// Unknown subdirectories and files are ignored.
inline std::optional<std::filesystem::path> find_split_file(const std::filesystem::path& root, Category c, Split s) {
  for (const char* ext : {".txt", ".conll", ".tsv"}) {
    auto p = root / std::string(to_string(c)) / (std::string(to_string(s)) + ext);
    if (std::filesystem::is_regular_file(p)) return p;
  }
  return std::nullopt;
}

inline Corpus load_viem_dataset(const std::filesystem::path& root, const ParseOptions& opts = {}) {
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  Corpus corpus;
  for (Category c : kAllCategories)
    for (Split s : kAllSplits)
      if (auto file = find_split_file(root, c, s)) corpus.entries[{c, s}] = read_conll_file(*file, opts);
  return corpus;
}

// ---------------------------------------------------------------------------
// Spans and statistics
// ---------------------------------------------------------------------------

struct Span {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  Tag tag = Tag::O;
  friend auto operator<=>(const Span&, const Span&) = default;
};

// Maximal runs of one non-O tag. The tag set has no boundary markers, so
// adjacent entities of the same type merge into one span.
inline std::vector<Span> extract_spans(const std::vector<Tag>& tags) {
  std::vector<Span> spans;
  std::size_t i = 0;
  while (i < tags.size()) {
    if (!is_entity(tags[i])) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < tags.size() && tags[j] == tags[i]) ++j;
    spans.push_back({i, j, tags[i]});
    i = j;
  }
  return spans;
}

inline std::vector<Span> extract_spans(const TaggedSentence& s) { return extract_spans(s.tags); }

struct CorpusStats {
  std::size_t n_sentences = 0;
  double sentence_entity_prop = 0.0;
  double token_prop_sn = 0.0;
  double token_prop_sv = 0.0;
  double nononly_prop = 0.0;
};

inline CorpusStats compute_statistics(const std::vector<TaggedSentence>& sentences) {
  if (sentences.empty()) throw DomainError("statistics of an empty sentence list are undefined");
  std::size_t with_entity = 0, tokens = 0, sn = 0, sv = 0;
  for (const auto& s : sentences) {
    bool any = false;
    for (Tag t : s.tags) {
      sn += t == Tag::SN;
      sv += t == Tag::SV;
      any = any || is_entity(t);
    }
    tokens += s.tags.size();
    with_entity += any;
  }
  CorpusStats st;
  st.n_sentences = sentences.size();
  const double n = static_cast<double>(sentences.size());
  st.sentence_entity_prop = static_cast<double>(with_entity) / n;
  st.nononly_prop = static_cast<double>(sentences.size() - with_entity) / n;
  if (tokens > 0) {
    st.token_prop_sn = static_cast<double>(sn) / static_cast<double>(tokens);
    st.token_prop_sv = static_cast<double>(sv) / static_cast<double>(tokens);
  }
  return st;
}

// Concatenates the requested (category, split) lists that exist in the corpus.
inline std::vector<TaggedSentence> pool(const Corpus& corpus, const std::vector<Category>& categories,
                                        const std::vector<Split>& splits) {
  std::vector<TaggedSentence> out;
  for (Category c : categories)
    for (Split s : splits)
      if (corpus.contains(c, s)) {
        const auto& part = corpus.at(c, s);
        out.insert(out.end(), part.begin(), part.end());
      }
  return out;
}

// Share of sentences without any entity, pooled over the material a model may
// train on: memc train+valid and the train split of the other categories.
// Computed with and without memc.
struct NonEntitySummary {
  std::optional<double> all;
  std::optional<double> without_memc;
};

inline NonEntitySummary non_entity_summary(const Corpus& corpus) {
  std::vector<Category> others(kAllCategories.begin() + 1, kAllCategories.end());
  auto memc = pool(corpus, {Category::memc}, {Split::train, Split::valid});
  auto rest = pool(corpus, others, {Split::train});
  NonEntitySummary out;
  if (!rest.empty()) out.without_memc = compute_statistics(rest).nononly_prop;
  memc.insert(memc.end(), rest.begin(), rest.end());
  if (!memc.empty()) out.all = compute_statistics(memc).nononly_prop;
  return out;
}

struct StatsRow {
  std::string category;
  std::string split;
  CorpusStats stats;
};

inline std::vector<StatsRow> corpus_statistics_table(const Corpus& corpus) {
  std::vector<StatsRow> rows;
  for (const auto& [key, sentences] : corpus.entries) {
    if (sentences.empty()) continue;
    rows.push_back({std::string(to_string(key.first)), std::string(to_string(key.second)), compute_statistics(sentences)});
  }
  return rows;
}

inline std::string render_stats_csv(const std::vector<StatsRow>& rows) {
  std::ostringstream os;
  os << "category,split,n,sentence_entity_prop,token_prop_sn,token_prop_sv\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    os << r.category << ',' << r.split << ',' << r.stats.n_sentences << ',' << r.stats.sentence_entity_prop << ','
       << r.stats.token_prop_sn << ',' << r.stats.token_prop_sv << '\n';
  return os.str();
}

inline std::string render_stats_text(const std::vector<StatsRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "category" << std::setw(7) << "split" << std::right << std::setw(7) << "n"
     << std::setw(14) << "sent-entity" << std::setw(10) << "tok-SN" << std::setw(10) << "tok-SV" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    os << std::left << std::setw(10) << r.category << std::setw(7) << r.split << std::right << std::setw(7)
       << r.stats.n_sentences << std::setw(14) << r.stats.sentence_entity_prop << std::setw(10) << r.stats.token_prop_sn
       << std::setw(10) << r.stats.token_prop_sv << '\n';
  return os.str();
}

}  // namespace fewvuln
