#pragma once

// Template-generated vulnerability-report sentences for tests, demos and
// smoke runs. Nothing here resembles real corpus statistics.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fewvuln/corpus.hpp"
#include "fewvuln/random.hpp"

namespace fewvuln::synthetic {

inline constexpr std::array<std::string_view, 16> kProducts{
    "Apache Tomcat", "OpenSSL", "Internet Explorer", "Adobe Reader", "Cisco IOS", "PHP", "WordPress", "Joomla!",
    "Linux kernel", "Mozilla Firefox", "Oracle MySQL", "Sun PC NetLink", "Microsoft Word", "ImageMagick", "nginx",
    "Drupal"};

inline constexpr std::array<std::string_view, 13> kFlaws{
    "Memory corruption", "Authentication bypass", "Cross-site request forgery", "Directory traversal",
    "Denial of service", "Arbitrary code execution", "Remote file inclusion", "Privilege escalation",
    "HTTP response splitting", "Information disclosure", "Buffer overflow", "SQL injection",
    "Cross-site scripting"};

inline constexpr std::array<std::string_view, 8> kImpacts{
    "allows remote attackers to execute arbitrary code via a crafted file",
    "allows local users to gain privileges via unspecified vectors",
    "allows remote attackers to cause a denial of service via a long request",
    "allows attackers to read arbitrary files via a .. in the path",
    "allows remote attackers to inject arbitrary web script via the name parameter",
    "allows remote authenticated users to bypass intended access restrictions",
    "allows context-dependent attackers to obtain sensitive information",
    "might allow attackers to hijack the authentication of administrators"};

inline constexpr std::array<std::string_view, 6> kPlainSentences{
    "The issue was reported to the vendor and fixed in a later release .",
    "Exploitation requires the victim to open a malicious document .",
    "No workaround is available at this time .",
    "The vulnerability exists because of insufficient input validation .",
    "Successful exploitation could lead to full system compromise .",
    "Users are advised to apply the update as soon as possible ."};

inline std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string random_version(Rng& rng) {
  std::string v = std::to_string(1 + rng.below(12)) + "." + std::to_string(rng.below(10));
  if (rng.below(2)) v += "." + std::to_string(rng.below(20));
  return v;
}

namespace detail {

inline void append(TaggedSentence& s, std::string_view text, Tag tag) {
  for (auto& w : words(text)) {
    s.tokens.push_back(std::move(w));
    s.tags.push_back(tag);
  }
}

}  // namespace detail

// One report sentence for `flaw` (index into kFlaws). Entity sentences name a
// product and one or two versions; the rest are all-O.
inline TaggedSentence report_sentence(Rng& rng, std::size_t flaw, bool with_entities) {
  TaggedSentence s;
  if (!with_entities) {
    detail::append(s, kPlainSentences[rng.below(kPlainSentences.size())], Tag::O);
    return s;
  }
  detail::append(s, kFlaws[flaw % kFlaws.size()], Tag::O);
  detail::append(s, "in", Tag::O);
  detail::append(s, kProducts[rng.below(kProducts.size())], Tag::SN);
  if (rng.below(2)) {
    detail::append(s, "before", Tag::O);
    detail::append(s, random_version(rng), Tag::SV);
  } else {
    detail::append(s, random_version(rng), Tag::SV);
    detail::append(s, "and", Tag::O);
    detail::append(s, random_version(rng), Tag::SV);
  }
  detail::append(s, kImpacts[rng.below(kImpacts.size())], Tag::O);
  detail::append(s, ".", Tag::O);
  return s;
}

// `n` sentences with exactly one SN token and one SV token each, built from
// single-token product names; trivially separable by token identity.
inline std::vector<TaggedSentence> overfit_corpus(std::size_t n = 50, std::uint64_t seed = kDefaultSeed) {
  static constexpr std::array<std::string_view, 10> names{"Tomcat", "OpenSSL", "Firefox", "WordPress", "nginx",
                                                          "Joomla", "Drupal", "MySQL", "PHP", "ImageMagick"};
  static constexpr std::array<std::string_view, 4> heads{"Buffer overflow in", "SQL injection in",
                                                         "Cross-site scripting in", "Directory traversal in"};
  static constexpr std::array<std::string_view, 3> tails{"allows remote attackers to execute code .",
                                                         "allows attackers to read files .",
                                                         "has unspecified impact ."};
  Rng rng(seed);
  std::vector<TaggedSentence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TaggedSentence s;
    detail::append(s, heads[rng.below(heads.size())], Tag::O);
    detail::append(s, names[rng.below(names.size())], Tag::SN);
    detail::append(s, random_version(rng), Tag::SV);
    detail::append(s, tails[rng.below(tails.size())], Tag::O);
    s.source_id = "syn-" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

struct DatasetShape {
  std::size_t memc_train = 200;
  std::size_t memc_valid = 40;
  std::size_t memc_test = 40;
  std::size_t other_train = 80;
  std::size_t other_valid = 16;
  std::size_t other_test = 24;
  double entity_fraction = 0.6;
};

// A full 13-category corpus in memory. Sentence ids encode category, split
// and position.
inline Corpus make_dataset(const DatasetShape& shape = {}, std::uint64_t seed = kDefaultSeed) {
  Corpus c;
  Rng rng(seed);
  for (std::size_t ci = 0; ci < kAllCategories.size(); ++ci) {
    const Category cat = kAllCategories[ci];
    const bool memc = cat == Category::memc;
    const std::array<std::pair<Split, std::size_t>, 3> sizes{
        {{Split::train, memc ? shape.memc_train : shape.other_train},
         {Split::valid, memc ? shape.memc_valid : shape.other_valid},
         {Split::test, memc ? shape.memc_test : shape.other_test}}};
    for (auto [split, n] : sizes) {
      auto& list = c.entries[{cat, split}];
      for (std::size_t i = 0; i < n; ++i) {
        auto s = report_sentence(rng, ci, rng.uniform() < shape.entity_fraction);
        s.source_id = std::string(to_string(cat)) + "-" + std::string(to_string(split)) + "-" + std::to_string(i);
        list.push_back(std::move(s));
      }
    }
  }
  return c;
}

// Writes `<root>/<category>/<split>.txt` for every entry.
inline void write_dataset(const Corpus& c, const std::filesystem::path& root) {
  for (const auto& [key, sentences] : c.entries)
    write_conll_file(root / std::string(to_string(key.first)) / (std::string(to_string(key.second)) + ".txt"),
                     sentences);
}

// A support sentence that reuses the tokens of `victim` verbatim but tags
// every O token as SN: it sits at distance zero from the victim's
// non-entity context and pulls those tokens towards SN.
inline TaggedSentence adversary_for(const TaggedSentence& victim, std::string id = "adversary") {
  TaggedSentence s = victim;
  for (auto& t : s.tags)
    if (t == Tag::O) t = Tag::SN;
  s.source_id = std::move(id);
  return s;
}

}  // namespace fewvuln::synthetic
