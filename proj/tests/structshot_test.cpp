#include <gtest/gtest.h>

#include <sstream>

#include "fewvuln/structshot.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fewvuln {
namespace {

// Embeds each token as a fixed random vector keyed by its text; the same
// word gets the same vector anywhere.
struct HashEmbedder {
  std::size_t dim = 16;
};

std::vector<SentenceEmbeddings> extract_token_embeddings(const HashEmbedder& m, const std::vector<TaggedSentence>& s) {
  std::vector<SentenceEmbeddings> out;
  for (const auto& sent : s) {
    SentenceEmbeddings e;
    for (const auto& tok : sent.tokens) {
      Rng rng(fnv1a64(tok));
      e.push_back(oracle::random_embedding(rng, m.dim));
    }
    out.push_back(std::move(e));
  }
  return out;
}

static_assert(TokenEmbedder<HashEmbedder>);

Embedding vec(std::initializer_list<float> v) {
  Embedding e(static_cast<Eigen::Index>(v.size()));
  std::size_t i = 0;
  for (float x : v) e[static_cast<Eigen::Index>(i++)] = x;
  return e;
}

SupportSet three_tag_support() {
  TaggedSentence s{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, {}};
  return build_support_set({s}, {{vec({1, 0}), vec({0, 1}), vec({-1, 0})}});
}

TEST(NearestNeighbor, SingleEntrySupport) {
  SupportSet s;
  s.dimension = 2;
  s.entries.push_back({vec({1, 0}), Tag::SV, "x", 0});
  EXPECT_EQ(nn_tag(vec({0, 5}), s).first, Tag::SV);
}

TEST(NearestNeighbor, ExactMatchHasZeroDistance) {
  auto s = three_tag_support();
  auto [tag, d] = nn_tag(vec({0, 3}), s);
  EXPECT_EQ(tag, Tag::SV);
  EXPECT_NEAR(d, 0.0, 1e-12);
}

TEST(NearestNeighbor, TieGoesToFirstEntry) {
  SupportSet s;
  s.dimension = 2;
  s.entries.push_back({vec({1, 0}), Tag::O, "x", 0});
  s.entries.push_back({vec({1, 0}), Tag::SN, "x", 1});
  EXPECT_EQ(nearest_neighbor(vec({1, 0}), s).entry, 0u);
}

TEST(NearestNeighbor, DimensionMismatchAndEmpty) {
  auto s = three_tag_support();
  EXPECT_THROW(nn_tag(vec({1, 0, 0}), s), DomainError);
  EXPECT_THROW(nn_tag(vec({1, 0}), SupportSet{}), DomainError);
}

TEST(NearestNeighbor, MatchesLinearScan) {
  Rng rng(99);
  for (int trial = 0; trial < 500; ++trial) {
    const auto dim = 1 + rng.below(12);
    auto support = oracle::random_support(rng, 3 + rng.below(40), dim);
    Embedding q = rng.below(4) == 0 ? support.entries[rng.below(support.size())].embedding
                                    : oracle::random_embedding(rng, dim);
    auto got = nn_tag(q, support);
    auto want = oracle::linear_scan_nn(q, support);
    EXPECT_EQ(got.first, want.first);
    EXPECT_NEAR(got.second, want.second, 1e-9);
  }
}

TEST(SupportSet, MissingTagIsDomainError) {
  TaggedSentence s{{"a", "b"}, {Tag::SN, Tag::O}, {}};
  try {
    build_support_set({s}, {{vec({1, 0}), vec({0, 1})}});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("SV"), std::string::npos);
  }
}

TEST(Emissions, RowsAreDistributionsFavouringNearestTag) {
  auto s = three_tag_support();
  auto e = compute_emissions({vec({1, 0.1f})}, s);
  double z = 0;
  for (double p : e.rows[0]) {
    EXPECT_GT(p, 0.0);
    z += p;
  }
  EXPECT_NEAR(z, 1.0, 1e-12);
  EXPECT_GT(e.rows[0][tag_index(Tag::SN)], e.rows[0][tag_index(Tag::SV)]);
  EXPECT_GT(e.rows[0][tag_index(Tag::SV)], e.rows[0][tag_index(Tag::O)]);
}

TEST(Transitions, AddOneCounts) {
  auto m = estimate_transitions({{Tag::SN, Tag::SN, Tag::SV}});
  EXPECT_DOUBLE_EQ(m.start[tag_index(Tag::SN)], 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(m.start[tag_index(Tag::O)], 1.0 / 4.0);
  EXPECT_DOUBLE_EQ(m.transition[tag_index(Tag::SN)][tag_index(Tag::SN)], 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(m.transition[tag_index(Tag::SV)][tag_index(Tag::O)], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.end[tag_index(Tag::SV)], 2.0 / 4.0);
  EXPECT_THROW(estimate_transitions({}), DomainError);
  EXPECT_THROW(estimate_transitions({{}}), DomainError);
}

TEST(Viterbi, LengthOneIsArgmaxOfStartEmitEnd) {
  TransitionModel tr = estimate_transitions({{Tag::O}});
  EmissionTable e{{{0.2, 0.7, 0.1}}};
  EXPECT_EQ(viterbi_decode(e, tr), std::vector<Tag>{Tag::SV});
}

TEST(Viterbi, EmptyAndZeroProbabilities) {
  TransitionModel tr = estimate_transitions({{Tag::O}});
  EXPECT_TRUE(viterbi_decode(EmissionTable{}, tr).empty());
  EXPECT_THROW(viterbi_decode(EmissionTable{{{0.0, 0.5, 0.5}}}, tr), DomainError);
  tr.transition[0][1] = 0.0;
  EXPECT_THROW(viterbi_decode(EmissionTable{{{0.2, 0.4, 0.4}}}, tr), DomainError);
}

TEST(Viterbi, UniformInstanceTieBreaksToSmallestIndex) {
  TransitionModel tr;
  tr.start.fill(1.0 / 3);
  tr.end.fill(1.0 / 3);
  for (auto& r : tr.transition) r.fill(1.0 / 3);
  EmissionTable e{{{1.0 / 3, 1.0 / 3, 1.0 / 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3}}};
  EXPECT_EQ(viterbi_decode(e, tr), (std::vector<Tag>{Tag::SN, Tag::SN}));
}

TEST(Viterbi, MatchesExhaustiveEnumeration) {
  Rng rng(7);
  for (int trial = 0; trial < 400; ++trial) {
    const auto n = 1 + rng.below(6);
    auto [e, tr] = oracle::random_decode_instance(rng, n, trial % 2 == 0);
    auto got = viterbi_decode_scored(e, tr);
    auto want = oracle::exhaustive_decode(e, tr);
    ASSERT_EQ(got.tags, want.tags) << "trial " << trial;
    EXPECT_NEAR(got.log_score, want.log_score, 1e-9);
    EXPECT_NEAR(got.log_score, oracle::sequence_log_score(e, tr, [&] {
                  std::vector<std::size_t> y;
                  for (auto t : got.tags) y.push_back(tag_index(t));
                  return y;
                }()),
                1e-9);
  }
}

TEST(StructShotTag, EmptyTestIsEmpty) {
  HashEmbedder m;
  TaggedSentence s{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, {}};
  EXPECT_TRUE(structshot_tag(m, {s}, {}, {s.tags}).empty());
}

std::vector<TaggedSentence> distinct_word_corpus(Rng& rng, const std::string& prefix) {
  std::vector<TaggedSentence> corpus;
  std::size_t word = 0;
  const auto n = 1 + rng.below(6);
  for (std::size_t i = 0; i < n; ++i) {
    TaggedSentence s;
    const auto len = 1 + rng.below(10);
    for (std::size_t j = 0; j < len; ++j) {
      s.tokens.push_back(prefix + "_" + std::to_string(word++));
      s.tags.push_back(tag_from_index(rng.below(kNumTags)));
    }
    corpus.push_back(s);
  }
  corpus.push_back({{prefix + "x", prefix + "y", prefix + "z"}, {Tag::SN, Tag::SV, Tag::O}, {}});
  return corpus;
}

// Every bigram, start and end tag equally often: transitions come out uniform.
std::vector<std::vector<Tag>> balanced_transition_corpus() {
  std::vector<std::vector<Tag>> out;
  for (Tag a : kAllTags)
    for (Tag b : kAllTags) out.push_back({a, b});
  return out;
}

TEST(StructShotTag, IdentitySupportWithoutCrfIsExact) {
  HashEmbedder m;
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto corpus = distinct_word_corpus(rng, "w" + std::to_string(trial));
    auto got = structshot_tag(m, corpus, corpus, tag_sequences(corpus), StructShotOptions{false, {}});
    EXPECT_EQ(got, tag_sequences(corpus));
  }
}

TEST(StructShotTag, IdentitySupportUnderUniformTransitions) {
  HashEmbedder m;
  Rng rng(4);
  auto tr = estimate_transitions(balanced_transition_corpus());
  for (std::size_t f = 0; f < kNumTags; ++f)
    for (std::size_t t = 0; t < kNumTags; ++t) EXPECT_NEAR(tr.transition[f][t], 1.0 / 3, 1e-12);
  for (int trial = 0; trial < 50; ++trial) {
    auto corpus = distinct_word_corpus(rng, "u" + std::to_string(trial));
    EXPECT_EQ(structshot_tag(m, corpus, corpus, balanced_transition_corpus()), tag_sequences(corpus));
  }
}

TEST(StructShotTag, SkewedTransitionsCanOverrideExactMatches) {
  // Temperature 1 on unit vectors caps the emission log-odds at 4, so strong
  // enough transition evidence wins over a distance-0 match.
  TaggedSentence s{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, {}};
  auto support = build_support_set({s}, {{vec({1, 0}), vec({0, 1}), vec({-1, 0})}});
  std::vector<std::vector<Tag>> skew(200, std::vector<Tag>(5, Tag::O));
  auto out = structshot_decode({{vec({1, 0}), vec({0, 1}), vec({-1, 0})}}, support, estimate_transitions(skew));
  EXPECT_EQ(out[0], (std::vector<Tag>{Tag::O, Tag::O, Tag::O}));
}

TEST(Emissions, ExactSnMatchFarFromOthers) {
  TaggedSentence s{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, {}};
  auto support = build_support_set({s}, {{vec({1, 0}), vec({-1, 0.01f}), vec({-1, -0.01f})}});
  EXPECT_GT(compute_emissions({vec({1, 0})}, support).rows[0][tag_index(Tag::SN)], 0.9);
}

TEST(Emissions, SymmetricSupportGivesUniformRow) {
  TaggedSentence s{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, {}};
  const float h = std::sqrt(3.0f) / 2;
  auto support = build_support_set({s}, {{vec({1, 0, 0}), vec({-0.5f, h, 0}), vec({-0.5f, -h, 0})}});
  auto row = compute_emissions({vec({0, 0, 1})}, support).rows[0];
  for (double p : row) EXPECT_NEAR(p, 1.0 / 3, 1e-6);
}

TEST(Emissions, RandomRowsSumToOne) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    auto support = oracle::random_support(rng, 3 + rng.below(20), 5);
    auto row = compute_emissions({oracle::random_embedding(rng, 5)}, support).rows[0];
    double z = 0;
    for (double p : row) {
      EXPECT_GT(p, 0.0);
      z += p;
    }
    EXPECT_NEAR(z, 1.0, 1e-9);
  }
}

TEST(Transitions, HandCountOutsideThenName) {
  auto m = estimate_transitions({{Tag::O, Tag::SN}});
  EXPECT_DOUBLE_EQ(m.start[tag_index(Tag::O)], 0.5);
  const auto& row = m.transition[tag_index(Tag::O)];
  EXPECT_GT(row[tag_index(Tag::SN)], row[tag_index(Tag::SV)]);
  EXPECT_GT(row[tag_index(Tag::SN)], row[tag_index(Tag::O)]);
}

TEST(Transitions, AllOutsideFavoursStayingOutside) {
  auto m = estimate_transitions({{Tag::O, Tag::O, Tag::O}});
  const auto& row = m.transition[tag_index(Tag::O)];
  EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(), static_cast<long>(tag_index(Tag::O)));
}

TEST(Transitions, UniformRandomTagsConvergeToUniform) {
  Rng rng(12);
  std::vector<std::vector<Tag>> seqs;
  for (int i = 0; i < 2000; ++i) seqs.push_back(testing::random_tags(rng, 20));
  auto m = estimate_transitions(seqs);
  for (const auto& row : m.transition)
    for (double p : row) EXPECT_NEAR(p, 1.0 / 3, 0.02);
}

TEST(SupportSet, EntryCountEqualsTokenCount) {
  HashEmbedder m;
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    auto corpus = distinct_word_corpus(rng, "c");
    std::size_t tokens = 0;
    for (const auto& s : corpus) tokens += s.size();
    EXPECT_EQ(build_support_set(corpus, extract_token_embeddings(m, corpus)).size(), tokens);
  }
}

TEST(SupportSet, AddingEntriesNeverIncreasesMinDistance) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    auto support = oracle::random_support(rng, 3, 6);
    auto q = oracle::random_embedding(rng, 6);
    auto before = min_tag_distances(q, support);
    for (int k = 0; k < 5; ++k) {
      support.entries.push_back({l2_normalized(oracle::random_embedding(rng, 6)), tag_from_index(rng.below(3)), "n", 0});
      auto after = min_tag_distances(q, support);
      for (std::size_t t = 0; t < kNumTags; ++t) EXPECT_LE(after[t], before[t]);
      before = after;
    }
  }
}

TEST(SupportSet, PermutationInvariantWithoutTies) {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    SupportSet support;
    support.dimension = 8;
    for (std::size_t i = 0; i < 30; ++i)
      support.entries.push_back({l2_normalized(oracle::random_embedding(rng, 8)), tag_from_index(i % 3), "s", i});
    SentenceEmbeddings test;
    for (int i = 0; i < 6; ++i) test.push_back(oracle::random_embedding(rng, 8));
    auto tr = estimate_transitions({testing::random_tags(rng, 30)});
    auto a = structshot_decode({test}, support, tr);
    rng.shuffle(support.entries);
    EXPECT_EQ(structshot_decode({test}, support, tr), a);
    EXPECT_EQ(structshot_decode({test}, support, tr, {false, {}}),
              structshot_decode({test}, support, tr, {false, {}}));
  }
}

TEST(EmbeddingFile, TextAndBinaryRoundTrip) {
  Rng rng(17);
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < 25; ++i)
    rows.push_back({"CVE-" + std::to_string(i / 5), i % 5, tag_from_index(rng.below(3)), oracle::random_embedding(rng, 7)});
  for (auto fmt : {EmbeddingFormat::text, EmbeddingFormat::binary}) {
    std::stringstream ss;
    write_embeddings(ss, rows, fmt);
    auto back = read_embeddings(ss);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_EQ(back[i].sentence_id, rows[i].sentence_id);
      EXPECT_EQ(back[i].token_index, rows[i].token_index);
      EXPECT_EQ(back[i].tag, rows[i].tag);
      EXPECT_EQ(back[i].vector, rows[i].vector);  // exact: max_digits10 / raw bits
    }
  }
}

TEST(EmbeddingFile, BinaryLayout) {
  std::vector<EmbeddingRow> rows{{"ab", 3, Tag::SV, vec({1.0f, -2.0f})}};
  std::stringstream ss;
  write_embeddings(ss, rows, EmbeddingFormat::binary);
  const std::string b = ss.str();
  ASSERT_EQ(b.size(), 8u + 8 + 4 + 4 + 2 + 4 + 1 + 8);
  EXPECT_EQ(b.substr(0, 8), std::string("FVEMB01\n"));
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);   // count
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 2);  // dim
  EXPECT_EQ(static_cast<unsigned char>(b[20]), 2);  // id length
  EXPECT_EQ(b.substr(24, 2), "ab");
  EXPECT_EQ(static_cast<unsigned char>(b[26]), 3);  // token index
  EXPECT_EQ(static_cast<unsigned char>(b[30]), 1);  // SV
}

TEST(EmbeddingFile, TruncatedInputIsParseError) {
  std::stringstream ss("2 3\ns0 0 SN 1 2 3\n");
  EXPECT_THROW(read_embeddings(ss), ParseError);
  std::stringstream bad("1 2\ns0 0 XX 1 2\n");
  EXPECT_THROW(read_embeddings(bad), ParseError);
}

TEST(EmbeddingFile, SupportFromRowsMatchesBuild) {
  HashEmbedder m;
  std::vector<TaggedSentence> s{{{"a", "b", "c"}, {Tag::SN, Tag::SV, Tag::O}, "id1"}};
  auto emb = extract_token_embeddings(m, s);
  auto direct = build_support_set(s, emb);
  auto via = support_from_rows(embedding_rows(s, emb));
  ASSERT_EQ(direct.size(), via.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    EXPECT_EQ(direct.entries[i].tag, via.entries[i].tag);
    EXPECT_TRUE(direct.entries[i].embedding.isApprox(via.entries[i].embedding));
  }
}

}  // namespace
}  // namespace fewvuln
