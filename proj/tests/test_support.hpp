#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fewvuln/corpus.hpp"
#include "fewvuln/random.hpp"

namespace fewvuln::testing {

inline std::string random_word(Rng& rng, std::size_t max_len = 8) {
  static constexpr std::string_view alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.-_()#";
  std::string w;
  const std::size_t n = 1 + rng.below(max_len);
  for (std::size_t i = 0; i < n; ++i) w += alphabet[rng.below(alphabet.size())];
  return w;
}

inline std::vector<Tag> random_tags(Rng& rng, std::size_t n) {
  std::vector<Tag> tags;
  for (std::size_t i = 0; i < n; ++i) tags.push_back(tag_from_index(rng.below(kNumTags)));
  return tags;
}

inline TaggedSentence random_sentence(Rng& rng, std::size_t max_len = 12, bool with_id = false) {
  TaggedSentence s;
  const std::size_t n = 1 + rng.below(max_len);
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(random_word(rng));
  s.tags = random_tags(rng, n);
  if (with_id) s.source_id = "CVE-" + std::to_string(2000 + rng.below(20)) + "-" + std::to_string(rng.below(10000));
  return s;
}

inline std::vector<TaggedSentence> random_corpus(Rng& rng, std::size_t n, std::size_t max_len = 12) {
  std::vector<TaggedSentence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_sentence(rng, max_len, rng.below(2) == 0));
  return out;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "fewvuln") {
    auto base = std::filesystem::temp_directory_path();
    Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^ reinterpret_cast<std::uintptr_t>(this));
    for (;;) {
      path_ = base / (tag + "-" + hex64(rng.next()).substr(0, 10));
      if (std::filesystem::create_directories(path_)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

}  // namespace fewvuln::testing
