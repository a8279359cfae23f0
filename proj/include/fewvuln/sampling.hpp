#pragma once

// Deterministic few-sample subsets. Every function is a pure function of
// (input order, sizes, seed); subsets keep the source order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"
#include "fewvuln/random.hpp"

namespace fewvuln {

enum class SamplingMode { proportion, count };

struct SamplingSpec {
  SamplingMode mode = SamplingMode::proportion;
  double proportion = 0.10;  // used in proportion mode
  std::size_t count = 0;     // used in count mode
  std::uint64_t seed = kDefaultSeed;

  static SamplingSpec of_proportion(double p, std::uint64_t seed = kDefaultSeed) {
    return {SamplingMode::proportion, p, 0, seed};
  }
  static SamplingSpec of_count(std::size_t k, std::uint64_t seed = kDefaultSeed) {
    return {SamplingMode::count, 0.0, k, seed};
  }
};

// floor(x + 0.5) for x >= 0. The 1e-9 slack keeps products such as
// 0.29 * 50 = 14.499999... from rounding the wrong way.
inline std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

inline std::size_t proportion_size(std::size_t n, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw DomainError("proportion must lie in (0, 1], got " + std::to_string(p));
  return round_half_up(p * static_cast<double>(n));
}

template <typename T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items[i]);
  return out;
}

inline std::vector<TaggedSentence> sample_proportion(const std::vector<TaggedSentence>& sentences, double p,
                                                     std::uint64_t seed = kDefaultSeed) {
  if (sentences.empty()) throw DomainError("cannot sample from an empty sentence list");
  const std::size_t k = proportion_size(sentences.size(), p);
  if (k == 0) throw DomainError("proportion " + std::to_string(p) + " of " + std::to_string(sentences.size()) +
                                " sentences rounds to an empty sample");
  return select(sentences, sample_indices(sentences.size(), k, seed));
}

inline std::vector<TaggedSentence> sample_count(const std::vector<TaggedSentence>& sentences, std::size_t k,
                                                std::uint64_t seed = kDefaultSeed, const std::string& label = "") {
  if (k < 1) throw DomainError("sample count must be at least 1");
  if (k > sentences.size())
    throw DomainError("cannot sample " + std::to_string(k) + " sentences from " +
                      (label.empty() ? std::string("a population") : label) + " of size " +
                      std::to_string(sentences.size()));
  return select(sentences, sample_indices(sentences.size(), k, seed));
}

inline std::vector<TaggedSentence> sample(const std::vector<TaggedSentence>& sentences, const SamplingSpec& spec,
                                          const std::string& label = "") {
  return spec.mode == SamplingMode::proportion ? sample_proportion(sentences, spec.proportion, spec.seed)
                                               : sample_count(sentences, spec.count, spec.seed, label);
}

// Concatenation in category order (std::map key order = enum order, which is
// alphabetical for the transfer targets).
inline std::vector<TaggedSentence> build_aggregate(const std::map<Category, std::vector<TaggedSentence>>& subsets) {
  if (subsets.count(Category::memc))
    throw DomainError("memc is the fine-tuning source and cannot be part of the transfer aggregate");
  std::vector<TaggedSentence> out;
  for (const auto& [cat, part] : subsets) out.insert(out.end(), part.begin(), part.end());
  return out;
}

struct TrainValid {
  std::vector<TaggedSentence> train;
  std::vector<TaggedSentence> valid;
};

inline std::size_t carve_size(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("validation fraction must lie in (0, 1)");
  return round_half_up(fraction * static_cast<double>(n));
}

// Splits a training list into (remainder, held-out validation).
inline TrainValid carve_validation(const std::vector<TaggedSentence>& train, double fraction = 0.10,
                                   std::uint64_t seed = kDefaultSeed) {
  if (train.size() < 10) throw DomainError("need at least 10 sentences to carve a validation split");
  const std::size_t k = carve_size(train.size(), fraction);
  auto valid_idx = sample_indices(train.size(), k, seed);
  TrainValid out;
  out.valid.reserve(k);
  out.train.reserve(train.size() - k);
  std::size_t next = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (next < valid_idx.size() && valid_idx[next] == i) {
      out.valid.push_back(train[i]);
      ++next;
    } else {
      out.train.push_back(train[i]);
    }
  }
  return out;
}

inline std::size_t fewsample_validation_size(std::size_t full_train, std::size_t subset) {
  return std::min(subset, full_train / 10);
}

// Index form: `subset` are indices into `full_train`.
inline std::vector<std::size_t> build_fewsample_validation_indices(std::size_t full_train,
                                                                   const std::vector<std::size_t>& subset,
                                                                   std::uint64_t seed = kDefaultSeed) {
  std::vector<bool> used(full_train, false);
  for (auto i : subset) {
    if (i >= full_train) throw DomainError("subset index out of range");
    if (used[i]) throw DomainError("subset repeats index " + std::to_string(i));
    used[i] = true;
  }
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < full_train; ++i)
    if (!used[i]) remaining.push_back(i);
  const std::size_t k = fewsample_validation_size(full_train, subset.size());
  if (k > remaining.size())
    throw DomainError("only " + std::to_string(remaining.size()) + " sentences remain for a validation set of " +
                      std::to_string(k));
  return select(remaining, sample_indices(remaining.size(), k, seed));
}

// Resolves `train_subset` to positions in `full_train` (multiset matching, so
// duplicate sentences are handled by identity) and draws a disjoint validation set.
inline std::vector<TaggedSentence> build_fewsample_validation(const std::vector<TaggedSentence>& full_train,
                                                              const std::vector<TaggedSentence>& train_subset,
                                                              std::uint64_t seed = kDefaultSeed) {
  std::vector<bool> taken(full_train.size(), false);
  std::vector<std::size_t> subset_idx;
  subset_idx.reserve(train_subset.size());
  std::size_t cursor = 0;  // subsets preserve source order, so scan forward first
  for (const auto& s : train_subset) {
    std::size_t found = full_train.size();
    for (std::size_t pass = 0; pass < 2 && found == full_train.size(); ++pass) {
      std::size_t from = pass == 0 ? cursor : 0;
      std::size_t to = pass == 0 ? full_train.size() : cursor;
      for (std::size_t i = from; i < to; ++i)
        if (!taken[i] && full_train[i] == s) {
          found = i;
          break;
        }
    }
    if (found == full_train.size()) throw DomainError("training subset is not contained in the full training set");
    taken[found] = true;
    subset_idx.push_back(found);
    cursor = found + 1;
  }
  return select(full_train, build_fewsample_validation_indices(full_train.size(), subset_idx, seed));
}

struct FewSampleSplit {
  std::vector<TaggedSentence> train;
  std::vector<TaggedSentence> valid;
  SamplingSpec spec;
  std::vector<CorpusKey> sources;
};

// Draws a train subset per `spec` and its matching validation set.
inline FewSampleSplit make_fewsample_split(const std::vector<TaggedSentence>& full_train, const SamplingSpec& spec,
                                           std::vector<CorpusKey> sources, const std::string& label = "") {
  if (full_train.empty()) throw DomainError("cannot sample from an empty sentence list");
  std::size_t k = spec.mode == SamplingMode::proportion ? proportion_size(full_train.size(), spec.proportion)
                                                        : spec.count;
  if (k == 0) throw DomainError("sample size rounds to zero");
  if (k > full_train.size())
    throw DomainError("cannot sample " + std::to_string(k) + " sentences from " +
                      (label.empty() ? std::string("a population") : label) + " of size " +
                      std::to_string(full_train.size()));
  auto idx = sample_indices(full_train.size(), k, spec.seed);
  FewSampleSplit out;
  out.train = select(full_train, idx);
  out.valid = select(full_train, build_fewsample_validation_indices(full_train.size(), idx, spec.seed));
  out.spec = spec;
  out.sources = std::move(sources);
  return out;
}

inline nlohmann::json to_json(const SamplingSpec& spec) {
  nlohmann::json j;
  j["mode"] = spec.mode == SamplingMode::proportion ? "proportion" : "count";
  if (spec.mode == SamplingMode::proportion)
    j["value"] = spec.proportion;
  else
    j["value"] = spec.count;
  j["seed"] = spec.seed;
  j["generator"] = std::string(kGeneratorId);
  return j;
}

inline std::string content_hash(const std::vector<TaggedSentence>& sentences) {
  return hex64(fnv1a64(serialize_conll(sentences)));
}

}  // namespace fewvuln
