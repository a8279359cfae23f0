#pragma once

// Nearest-neighbour few-shot tagging with Viterbi decoding over estimated
// tag transitions (the StructShot recipe), plus the embedding exchange file.
//
// Distances are squared Euclidean between L2-normalised vectors, which orders
// neighbours exactly as cosine similarity does.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"

namespace fewvuln {

using Embedding = Eigen::VectorXf;
using SentenceEmbeddings = std::vector<Embedding>;

// Anything that maps sentences to one vector per original token.
template <typename M>
concept TokenEmbedder = requires(const M& m, const std::vector<TaggedSentence>& s) {
  { extract_token_embeddings(m, s) } -> std::convertible_to<std::vector<SentenceEmbeddings>>;
};

inline Embedding l2_normalized(const Embedding& v) {
  const double n = v.cast<double>().norm();
  if (n == 0.0) return v;
  return (v.cast<double>() / n).cast<float>();
}

inline double squared_distance(const Embedding& a, const Embedding& b) {
  return (a.cast<double>() - b.cast<double>()).squaredNorm();
}

struct SupportEntry {
  Embedding embedding;  // L2-normalised
  Tag tag = Tag::O;
  std::string sentence_id;
  std::size_t token_index = 0;
};

struct SupportSet {
  std::vector<SupportEntry> entries;
  std::size_t dimension = 0;

  std::size_t size() const noexcept { return entries.size(); }
};

inline std::string sentence_label(const TaggedSentence& s, std::size_t index) {
  return s.source_id ? *s.source_id : "s" + std::to_string(index);
}

// Appends without the tag-coverage check; used when growing a support set one
// sentence at a time.
inline void add_to_support(SupportSet& support, const TaggedSentence& sentence, const SentenceEmbeddings& emb,
                           const std::string& sentence_id) {
  if (emb.size() != sentence.size())
    throw DomainError("sentence " + sentence_id + " has " + std::to_string(sentence.size()) + " tokens but " +
                      std::to_string(emb.size()) + " embeddings");
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto dim = static_cast<std::size_t>(emb[i].size());
    if (dim == 0) throw DomainError("zero-dimensional embedding");
    if (support.dimension == 0) support.dimension = dim;
    if (dim != support.dimension)
      throw DomainError("embedding dimension " + std::to_string(dim) + " does not match support dimension " +
                        std::to_string(support.dimension));
    support.entries.push_back({l2_normalized(emb[i]), sentence.tags[i], sentence_id, i});
  }
}

inline void check_tag_coverage(const SupportSet& support) {
  std::array<bool, kNumTags> seen{};
  for (const auto& e : support.entries) seen[tag_index(e.tag)] = true;
  for (Tag t : kAllTags)
    if (!seen[tag_index(t)])
      throw DomainError("support set has no " + std::string(to_string(t)) + " tokens; every tag needs an emission");
}

inline SupportSet build_support_set(const std::vector<TaggedSentence>& sentences,
                                    const std::vector<SentenceEmbeddings>& embeddings) {
  if (sentences.size() != embeddings.size())
    throw DomainError("support has " + std::to_string(sentences.size()) + " sentences but " +
                      std::to_string(embeddings.size()) + " embedding sequences");
  SupportSet support;
  for (std::size_t i = 0; i < sentences.size(); ++i)
    add_to_support(support, sentences[i], embeddings[i], sentence_label(sentences[i], i));
  check_tag_coverage(support);
  return support;
}

struct Neighbor {
  Tag tag = Tag::O;
  double distance = 0.0;
  std::size_t entry = 0;
};

namespace detail {

inline Embedding normalized_query(const Embedding& query, const SupportSet& support) {
  if (support.entries.empty()) throw DomainError("empty support set");
  if (static_cast<std::size_t>(query.size()) != support.dimension)
    throw DomainError("query dimension " + std::to_string(query.size()) + " does not match support dimension " +
                      std::to_string(support.dimension));
  return l2_normalized(query);
}

}  // namespace detail

inline Neighbor nearest_neighbor(const Embedding& query, const SupportSet& support) {
  const Embedding q = detail::normalized_query(query, support);
  Neighbor best{support.entries[0].tag, std::numeric_limits<double>::infinity(), 0};
  for (std::size_t i = 0; i < support.entries.size(); ++i) {
    const double d = squared_distance(q, support.entries[i].embedding);
    if (d < best.distance) best = {support.entries[i].tag, d, i};
  }
  return best;
}

inline std::pair<Tag, double> nn_tag(const Embedding& query, const SupportSet& support) {
  auto n = nearest_neighbor(query, support);
  return {n.tag, n.distance};
}

// Per-tag minimum distance; +inf for a tag with no entries.
inline std::array<double, kNumTags> min_tag_distances(const Embedding& query, const SupportSet& support) {
  const Embedding q = detail::normalized_query(query, support);
  std::array<double, kNumTags> best;
  best.fill(std::numeric_limits<double>::infinity());
  for (const auto& e : support.entries) {
    double& slot = best[tag_index(e.tag)];
    slot = std::min(slot, squared_distance(q, e.embedding));
  }
  return best;
}

using EmissionRow = std::array<double, kNumTags>;

struct EmissionTable {
  std::vector<EmissionRow> rows;
  std::size_t size() const noexcept { return rows.size(); }
};

inline constexpr double kEmissionSmoothing = 1e-6;

struct EmissionOptions {
  double temperature = 1.0;
  double smoothing = kEmissionSmoothing;
};

inline EmissionRow emission_row(const std::array<double, kNumTags>& min_dist, const EmissionOptions& opts = {}) {
  EmissionRow scores;
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < kNumTags; ++t) {
    scores[t] = -min_dist[t] / opts.temperature;
    top = std::max(top, scores[t]);
  }
  double z = 0.0;
  for (auto& s : scores) {
    s = std::exp(s - top);
    z += s;
  }
  const double denom = 1.0 + static_cast<double>(kNumTags) * opts.smoothing;
  for (auto& s : scores) s = (s / z + opts.smoothing) / denom;
  return scores;
}

inline EmissionTable compute_emissions(const SentenceEmbeddings& tokens, const SupportSet& support,
                                       const EmissionOptions& opts = {}) {
  if (!(opts.temperature > 0.0)) throw DomainError("softmax temperature must be positive");
  check_tag_coverage(support);
  EmissionTable table;
  table.rows.reserve(tokens.size());
  for (const auto& q : tokens) table.rows.push_back(emission_row(min_tag_distances(q, support), opts));
  return table;
}

struct TransitionModel {
  std::array<double, kNumTags> start{};
  std::array<std::array<double, kNumTags>, kNumTags> transition{};  // [from][to]
  std::array<double, kNumTags> end{};                                 // distribution of the final tag
};

// Maximum-likelihood counts with add-one smoothing on every distribution.
inline TransitionModel estimate_transitions(const std::vector<std::vector<Tag>>& sequences) {
  std::size_t nonempty = 0;
  std::array<double, kNumTags> start{}, end{};
  std::array<std::array<double, kNumTags>, kNumTags> trans{};
  for (const auto& seq : sequences) {
    if (seq.empty()) continue;
    ++nonempty;
    start[tag_index(seq.front())] += 1.0;
    end[tag_index(seq.back())] += 1.0;
    for (std::size_t i = 1; i < seq.size(); ++i) trans[tag_index(seq[i - 1])][tag_index(seq[i])] += 1.0;
  }
  if (nonempty == 0) throw DomainError("cannot estimate transitions from an empty corpus");
  auto normalize = [](std::array<double, kNumTags> counts) {
    double z = 0.0;
    for (auto& c : counts) z += (c += 1.0);
    for (auto& c : counts) c /= z;
    return counts;
  };
  TransitionModel m;
  m.start = normalize(start);
  m.end = normalize(end);
  for (std::size_t f = 0; f < kNumTags; ++f) m.transition[f] = normalize(trans[f]);
  return m;
}

struct DecodeResult {
  std::vector<Tag> tags;
  double log_score = 0.0;
};

namespace detail {

inline void require_positive(double p, const char* what) {
  if (!(p > 0.0) || !std::isfinite(p))
    throw DomainError(std::string(what) + " contains a zero or non-finite probability; smooth it first");
}

// Scores within this relative band of the maximum count as ties.
inline bool tied(double a, double best) { return a >= best - 1e-12 * std::max(1.0, std::abs(best)); }

}  // namespace detail

// Highest-scoring tag sequence under
//   log start(y1) + sum log trans(y_{t-1}, y_t) + sum log emit_t(y_t) + log end(yT);
// among tied optima the lexicographically smallest tag-index sequence wins.
inline DecodeResult viterbi_decode_scored(const EmissionTable& emissions, const TransitionModel& transitions) {
  const std::size_t n = emissions.size();
  if (n == 0) return {};
  for (std::size_t t = 0; t < kNumTags; ++t) {
    detail::require_positive(transitions.start[t], "start distribution");
    detail::require_positive(transitions.end[t], "end distribution");
    for (std::size_t u = 0; u < kNumTags; ++u) detail::require_positive(transitions.transition[t][u], "transition");
  }
  for (const auto& row : emissions.rows)
    for (double p : row) detail::require_positive(p, "emission table");

  using Row = std::array<double, kNumTags>;
  auto logs = [](const Row& r) {
    Row o;
    for (std::size_t i = 0; i < kNumTags; ++i) o[i] = std::log(r[i]);
    return o;
  };
  const Row log_start = logs(transitions.start);
  const Row log_end = logs(transitions.end);
  std::array<Row, kNumTags> log_trans;
  for (std::size_t f = 0; f < kNumTags; ++f) log_trans[f] = logs(transitions.transition[f]);

  // Backward pass: suffix[t][y] = best score of positions t..n-1 given y_t = y.
  // Decoding forward from it makes the smallest-index choice at each position
  // yield the lexicographically smallest optimal sequence.
  std::vector<Row> suffix(n);
  for (std::size_t y = 0; y < kNumTags; ++y) suffix[n - 1][y] = std::log(emissions.rows[n - 1][y]) + log_end[y];
  for (std::size_t t = n - 1; t-- > 0;) {
    for (std::size_t y = 0; y < kNumTags; ++y) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t z = 0; z < kNumTags; ++z) best = std::max(best, log_trans[y][z] + suffix[t + 1][z]);
      suffix[t][y] = std::log(emissions.rows[t][y]) + best;
    }
  }

  DecodeResult out;
  out.tags.reserve(n);
  auto pick = [&](const Row& cand) {
    double best = *std::max_element(cand.begin(), cand.end());
    for (std::size_t y = 0; y < kNumTags; ++y)
      if (detail::tied(cand[y], best)) return y;
    return std::size_t{0};
  };
  Row cand;
  for (std::size_t y = 0; y < kNumTags; ++y) cand[y] = log_start[y] + suffix[0][y];
  std::size_t prev = pick(cand);
  out.tags.push_back(tag_from_index(prev));
  double score = log_start[prev] + std::log(emissions.rows[0][prev]);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t y = 0; y < kNumTags; ++y) cand[y] = log_trans[prev][y] + suffix[t][y];
    std::size_t y = pick(cand);
    score += log_trans[prev][y] + std::log(emissions.rows[t][y]);
    out.tags.push_back(tag_from_index(y));
    prev = y;
  }
  out.log_score = score + log_end[prev];
  return out;
}

inline std::vector<Tag> viterbi_decode(const EmissionTable& emissions, const TransitionModel& transitions) {
  return viterbi_decode_scored(emissions, transitions).tags;
}

struct StructShotOptions {
  bool use_crf = true;  // false: plain nearest-neighbour tags
  EmissionOptions emission;
};

// Tags `test` from the embeddings of a pre-built support set.
inline std::vector<std::vector<Tag>> structshot_decode(const std::vector<SentenceEmbeddings>& test_embeddings,
                                                       const SupportSet& support, const TransitionModel& transitions,
                                                       const StructShotOptions& opts = {}) {
  std::vector<std::vector<Tag>> out;
  out.reserve(test_embeddings.size());
  for (const auto& sent : test_embeddings) {
    if (opts.use_crf) {
      out.push_back(viterbi_decode(compute_emissions(sent, support, opts.emission), transitions));
    } else {
      std::vector<Tag> tags;
      tags.reserve(sent.size());
      for (const auto& q : sent) tags.push_back(nn_tag(q, support).first);
      out.push_back(std::move(tags));
    }
  }
  return out;
}

template <TokenEmbedder Model>
std::vector<std::vector<Tag>> structshot_tag(const Model& model, const std::vector<TaggedSentence>& support_sentences,
                                             const std::vector<TaggedSentence>& test_sentences,
                                             const std::vector<std::vector<Tag>>& transition_corpus,
                                             const StructShotOptions& opts = {}) {
  if (test_sentences.empty()) return {};
  const auto support = build_support_set(support_sentences, extract_token_embeddings(model, support_sentences));
  const auto transitions = estimate_transitions(transition_corpus);
  return structshot_decode(extract_token_embeddings(model, test_sentences), support, transitions, opts);
}

// ---------------------------------------------------------------------------
// Embedding exchange file
//
// Text form:
//   <count> <dim>
//   <sentence_id> <token_index> <tag> <v_1> ... <v_dim>      (count rows)
//
// Binary form (all integers and floats little-endian):
//   bytes 0..7   magic "FVEMB01\n"
//   u64          count
//   u32          dim
//   count rows:  u32 id_len, id_len bytes of sentence id (UTF-8),
//                u32 token_index, u8 tag (0=SN 1=SV 2=O), dim x f32 (IEEE-754)
// ---------------------------------------------------------------------------

struct EmbeddingRow {
  std::string sentence_id;
  std::size_t token_index = 0;
  Tag tag = Tag::O;
  Embedding vector;
};

enum class EmbeddingFormat { text, binary };

inline constexpr char kEmbeddingMagic[8] = {'F', 'V', 'E', 'M', 'B', '0', '1', '\n'};

inline std::vector<EmbeddingRow> embedding_rows(const std::vector<TaggedSentence>& sentences,
                                                const std::vector<SentenceEmbeddings>& embeddings) {
  if (sentences.size() != embeddings.size()) throw DomainError("sentence / embedding count mismatch");
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (embeddings[i].size() != sentences[i].size())
      throw DomainError("token / embedding count mismatch in sentence " + std::to_string(i));
    const auto id = sentence_label(sentences[i], i);
    for (std::size_t j = 0; j < embeddings[i].size(); ++j) rows.push_back({id, j, sentences[i].tags[j], embeddings[i][j]});
  }
  return rows;
}

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    int c = is.get();
    if (c == EOF) throw ParseError("truncated binary embedding file", 0);
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace detail

inline void write_embeddings(std::ostream& os, const std::vector<EmbeddingRow>& rows, EmbeddingFormat format) {
  const std::size_t dim = rows.empty() ? 0 : static_cast<std::size_t>(rows.front().vector.size());
  for (const auto& r : rows) {
    if (static_cast<std::size_t>(r.vector.size()) != dim) throw DomainError("rows of unequal dimension");
    if (r.sentence_id.empty() || has_whitespace(r.sentence_id)) throw DomainError("sentence id must be a word");
  }
  if (format == EmbeddingFormat::text) {
    os << rows.size() << ' ' << dim << '\n';
    os << std::setprecision(std::numeric_limits<float>::max_digits10);
    for (const auto& r : rows) {
      os << r.sentence_id << ' ' << r.token_index << ' ' << to_string(r.tag);
      for (Eigen::Index k = 0; k < r.vector.size(); ++k) os << ' ' << r.vector[k];
      os << '\n';
    }
    return;
  }
  os.write(kEmbeddingMagic, sizeof(kEmbeddingMagic));
  detail::put_le<std::uint64_t>(os, rows.size());
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
  for (const auto& r : rows) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.sentence_id.size()));
    os.write(r.sentence_id.data(), static_cast<std::streamsize>(r.sentence_id.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.token_index));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(tag_index(r.tag)));
    for (Eigen::Index k = 0; k < r.vector.size(); ++k) {
      std::uint32_t bits;
      float f = r.vector[k];
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_le<std::uint32_t>(os, bits);
    }
  }
}

inline std::vector<EmbeddingRow> read_embeddings(std::istream& is) {
  char magic[8] = {};
  is.read(magic, sizeof magic);
  std::vector<EmbeddingRow> rows;
  if (is.gcount() == sizeof magic && std::memcmp(magic, kEmbeddingMagic, sizeof magic) == 0) {
    const auto count = detail::get_le<std::uint64_t>(is);
    const auto dim = detail::get_le<std::uint32_t>(is);
    rows.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      EmbeddingRow r;
      const auto len = detail::get_le<std::uint32_t>(is);
      r.sentence_id.resize(len);
      is.read(r.sentence_id.data(), len);
      if (static_cast<std::uint32_t>(is.gcount()) != len) throw ParseError("truncated binary embedding file", 0);
      r.token_index = detail::get_le<std::uint32_t>(is);
      const auto tag = detail::get_le<std::uint8_t>(is);
      if (tag >= kNumTags) throw ParseError("tag byte out of range", 0);
      r.tag = tag_from_index(tag);
      r.vector.resize(dim);
      for (std::uint32_t k = 0; k < dim; ++k) {
        const auto bits = detail::get_le<std::uint32_t>(is);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        r.vector[k] = f;
      }
      rows.push_back(std::move(r));
    }
    return rows;
  }

  // Text form: rewind and parse line by line.
  is.clear();
  is.seekg(0);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) return rows;
  std::size_t count = 0, dim = 0;
  {
    std::istringstream hs(line);
    if (!(hs >> count >> dim)) throw ParseError("expected '<count> <dim>' header", line_no);
  }
  rows.reserve(count);
  while (rows.size() < count && std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    EmbeddingRow r;
    std::string tag;
    if (!(ls >> r.sentence_id >> r.token_index >> tag)) throw ParseError("malformed embedding row", line_no);
    auto t = parse_tag(tag);
    if (!t) throw TagError(tag, line_no);
    r.tag = *t;
    r.vector.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k)
      if (!(ls >> r.vector[static_cast<Eigen::Index>(k)]))
        throw ParseError("expected " + std::to_string(dim) + " vector values", line_no);
    rows.push_back(std::move(r));
  }
  if (rows.size() != count)
    throw ParseError("header announces " + std::to_string(count) + " rows, found " + std::to_string(rows.size()), 0);
  return rows;
}

inline void write_embeddings_file(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows,
                                  EmbeddingFormat format) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_embeddings(os, rows, format);
  if (!os) throw IoError("short write to " + path.string());
}

inline std::vector<EmbeddingRow> read_embeddings_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_embeddings(is);
  } catch (ParseError& e) {
    e.set_file(path.string());
    throw;
  }
}

// Support set straight from exchange-file rows.
inline SupportSet support_from_rows(const std::vector<EmbeddingRow>& rows) {
  SupportSet support;
  for (const auto& r : rows) {
    const auto dim = static_cast<std::size_t>(r.vector.size());
    if (support.dimension == 0) support.dimension = dim;
    if (dim != support.dimension) throw DomainError("rows of unequal dimension");
    support.entries.push_back({l2_normalized(r.vector), r.tag, r.sentence_id, r.token_index});
  }
  check_tag_coverage(support);
  return support;
}

}  // namespace fewvuln
