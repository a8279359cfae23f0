#pragma once

// Experiment orchestration: the four-setting matrix, training-size sweeps,
// the adversarial support probe, embedding export and the fine-tuning run
// directory writer.
//
// Every stage writes into a cell directory and drops a DONE marker when it
// finishes; reruns reuse completed cells unless `force` is set. The only
// file whose bytes depend on the clock is timing.json.

#include <chrono>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"
#include "fewvuln/evaluation.hpp"
#include "fewvuln/experiment.hpp"
#include "fewvuln/random.hpp"
#include "fewvuln/sampling.hpp"
#include "fewvuln/structshot.hpp"
#include "fewvuln/tagger.hpp"

namespace fewvuln {

using LogFn = std::function<void(const std::string&)>;

struct RunOptions {
  bool force = false;  // redo cells that already carry a DONE marker
  LogFn log;
};

namespace detail {

inline void say(const RunOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Refuses to resume into a directory that holds a different experiment.
inline void claim_output_dir(const std::filesystem::path& dir, const nlohmann::json& config, bool force) {
  const auto path = dir / "config.json";
  if (std::filesystem::exists(path) && !force) {
    auto old = read_json(path);
    if (old != config)
      throw ConfigError(dir.string() + " holds a different experiment config; pick another directory or use --force");
  }
  write_json(path, config);
}

inline nlohmann::json report_with_categories(const std::map<std::string, EvalReport>& per_cat,
                                             const EvalReport& average) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [k, v] : per_cat) cats[k] = to_json(v);
  return {{"categories", cats}, {"average", to_json(average)}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

inline std::vector<Category> transfer_categories(Category finetune) {
  std::vector<Category> out;
  for (Category c : kAllCategories)
    if (c != finetune) out.push_back(c);
  return out;
}

inline FewSampleSplit finetune_split(const Corpus& corpus, const ExperimentConfig& cfg) {
  auto spec = cfg.finetune_sampling;
  return make_fewsample_split(corpus.at(cfg.finetune_category, Split::train), spec,
                              {{cfg.finetune_category, Split::train}},
                              std::string(to_string(cfg.finetune_category)) + "/train");
}

inline FewSampleSplit category_split(const Corpus& corpus, Category c, std::size_t count, std::uint64_t seed) {
  return make_fewsample_split(corpus.at(c, Split::train), SamplingSpec::of_count(count, seed), {{c, Split::train}},
                              std::string(to_string(c)) + "/train");
}

// Missing splits are configuration errors, reported before any training.
inline void check_corpus(const Corpus& corpus, const ExperimentConfig& cfg, bool need_finetune_data,
                         bool need_transfer_data) {
  std::vector<std::string> missing;
  auto need = [&](Category c, Split s) {
    if (!corpus.contains(c, s) || corpus.at(c, s).empty())
      missing.push_back(std::string(to_string(c)) + "/" + std::string(to_string(s)));
  };
  if (need_finetune_data) need(cfg.finetune_category, Split::train);
  if (need_transfer_data)
    for (Category c : transfer_categories(cfg.finetune_category)) {
      need(c, Split::train);
      need(c, Split::test);
    }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ConfigError("corpus lacks required splits: " + list);
  }
}

inline nlohmann::json split_provenance(const FewSampleSplit& s) {
  return {{"sampling", to_json(s.spec)},
          {"train_size", s.train.size()},
          {"valid_size", s.valid.size()},
          {"train_hash", content_hash(s.train)},
          {"valid_hash", content_hash(s.valid)}};
}

// ---------------------------------------------------------------------------
// Backends
//
// The harness talks to training through a backend so the orchestration can be
// tested with cheap deterministic stand-ins.
// ---------------------------------------------------------------------------

using TagSequences = std::vector<std::vector<Tag>>;

template <typename B>
concept ExperimentBackend =
    requires(B& b, const typename B::Model& m, const std::vector<TaggedSentence>& s, const TagSequences& seqs,
             std::uint64_t seed, const std::filesystem::path& p) {
      { b.fine_tune(s, s, seed) } -> std::same_as<typename B::Model>;
      { b.transfer(m, s, s, seed) } -> std::same_as<typename B::Model>;
      { b.predict(m, s) } -> std::convertible_to<TagSequences>;
      { b.structshot(m, s, s, seqs) } -> std::convertible_to<TagSequences>;
      b.save(m, p);
      { b.load(p) } -> std::same_as<typename B::Model>;
    };

// Real training: grid search over `grid` at every fine-tune and transfer.
class TaggerBackend {
 public:
  using Model = std::shared_ptr<const TaggerModel>;

  TaggerBackend(EncoderHandle encoder, GridSpace grid, TrainingConfig base, StructShotOptions ss = {}, LogFn log = {})
      : encoder_(std::move(encoder)), grid_(std::move(grid)), base_(base), ss_(ss), log_(std::move(log)) {
    base_.keep_all_snapshots = false;
  }

  Model fine_tune(const std::vector<TaggedSentence>& train, const std::vector<TaggedSentence>& valid,
                  std::uint64_t seed) {
    auto cfg = base_;
    cfg.seed = seed;
    auto g = grid_search(encoder_, train, valid, grid_, cfg);
    report("fine-tune", g);
    return g.best.model;
  }

  Model transfer(const Model& from, const std::vector<TaggedSentence>& train,
                 const std::vector<TaggedSentence>& valid, std::uint64_t seed) {
    auto cfg = base_;
    cfg.seed = seed;
    auto g = grid_search(grid_, cfg, [&](const TrainingConfig& c) { return fewvuln::transfer(*from, train, valid, c); });
    report("transfer", g);
    return g.best.model;
  }

  TagSequences predict(const Model& m, const std::vector<TaggedSentence>& s) { return fewvuln::predict(*m, s); }

  TagSequences structshot(const Model& m, const std::vector<TaggedSentence>& support,
                          const std::vector<TaggedSentence>& test, const TagSequences& transitions) {
    return structshot_tag(*m, support, test, transitions, ss_);
  }

  void save(const Model& m, const std::filesystem::path& dir) { save_model(*m, dir); }
  Model load(const std::filesystem::path& dir) { return std::make_shared<const TaggerModel>(load_model(dir)); }

 private:
  void report(const char* what, const GridSearchResult& g) {
    if (!log_) return;
    std::ostringstream os;
    os << what << ": best lr=" << g.best_config.learning_rate << " epochs=" << g.best_config.epochs
       << " step=" << g.best.step << " weighted F1=" << std::fixed << std::setprecision(4) << g.best.weighted_f1;
    log_(os.str());
  }

  EncoderHandle encoder_;
  GridSpace grid_;
  TrainingConfig base_;
  StructShotOptions ss_;
  LogFn log_;
};

inline TaggerBackend make_tagger_backend(const ExperimentConfig& cfg, LogFn log = {}) {
  StructShotOptions ss;
  ss.use_crf = cfg.use_crf;
  ss.emission.temperature = cfg.temperature;
  return TaggerBackend(EncoderHandle{cfg.encoder}, cfg.grid, cfg.training, ss, std::move(log));
}

// ---------------------------------------------------------------------------
// Stage caching
// ---------------------------------------------------------------------------

// Loads the model in `dir` when its stage is complete, otherwise builds it
// with `make`, saves it and marks the stage done.
template <ExperimentBackend B, typename Make>
typename B::Model cached_stage(B& backend, const std::filesystem::path& dir, const RunOptions& opts, Make&& make) {
  if (!opts.force && is_done(dir)) return backend.load(dir / "model");
  clear_done(dir);
  auto m = make();
  std::filesystem::create_directories(dir);
  backend.save(m, dir / "model");
  mark_done(dir);
  return m;
}

// The shared fine-tuned model: a supplied model directory, or the cached
// fine-tuning stage under `out/stages/finetune`.
template <ExperimentBackend B>
typename B::Model shared_finetune(B& backend, const ExperimentConfig& cfg, const FewSampleSplit* split,
                                  const RunOptions& opts) {
  if (cfg.finetuned_model) {
    detail::say(opts, "loading fine-tuned model " + cfg.finetuned_model->string());
    return backend.load(*cfg.finetuned_model);
  }
  if (!split) throw ConfigError("fine-tuning needs the fine-tuning split");
  return cached_stage(backend, cfg.output_dir / "stages" / "finetune", opts, [&] {
    detail::say(opts, "fine-tuning on " + std::to_string(split->train.size()) + " sentences");
    return backend.fine_tune(split->train, split->valid, cfg.seed);
  });
}

// ---------------------------------------------------------------------------
// Setting matrix
// ---------------------------------------------------------------------------

struct MatrixResult {
  std::vector<RunRecord> records;  // fixed order FT, FT+SS, FT+TL, FT+TL+SS (selected ones)
  std::string table_csv;
  std::string table_text;
};

inline void write_tables(const std::filesystem::path& dir, const std::vector<RunRecord>& records, MetricLevel level,
                         std::string& csv, std::string& text) {
  const auto rows = mean_rows(records);
  csv = render_comparison_csv(rows, level);
  text = render_comparison_text(rows, level);
  write_file_atomic(dir / "comparison.csv", csv);
  write_file_atomic(dir / "comparison.txt", text);
}

// Runs every selected setting against the held-out test split of each
// transfer category and macro-averages across categories.
//
// The fine-tuned model is built once and shared by all settings and restarts.
// Restart i reruns the transfer stage with seed `seed + i`; the FT and FT+SS
// rows do not depend on the restart, so their restarts repeat one report.
template <ExperimentBackend B>
MatrixResult run_setting_matrix(const ExperimentConfig& cfg, const Corpus& corpus, B& backend,
                                const RunOptions& opts = {}) {
  cfg.validate();
  const bool any_ss = cfg.has(Setting::FT_SS) || cfg.has(Setting::FT_TL_SS);
  const bool need_ft_data = !cfg.finetuned_model || (any_ss && cfg.transitions == TransitionSource::finetune_subset);
  check_corpus(corpus, cfg, need_ft_data, true);

  const auto out = cfg.output_dir;
  const auto cats = transfer_categories(cfg.finetune_category);
  detail::Stopwatch total_clock;
  nlohmann::json timing = nlohmann::json::object();

  // All sampling happens up front so sampling errors surface before training.
  std::optional<FewSampleSplit> ft_split;
  if (need_ft_data) ft_split = finetune_split(corpus, cfg);
  std::map<Category, FewSampleSplit> support;
  for (Category c : cats) support.emplace(c, category_split(corpus, c, cfg.transfer_count, cfg.sampling_seed));

  const auto config_json = to_json(cfg);
  detail::claim_output_dir(out, config_json, opts.force);
  {
    nlohmann::json m;
    m["kind"] = "setting-matrix";
    m["seed"] = cfg.seed;
    m["restart_seeds"] = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.restarts; ++i) m["restart_seeds"].push_back(cfg.seed + i);
    m["sampling_seed"] = cfg.sampling_seed;
    m["generator"] = std::string(kGeneratorId);
    if (ft_split) m["finetune_split"] = split_provenance(*ft_split);
    if (cfg.finetuned_model) m["finetuned_model"] = cfg.finetuned_model->string();
    for (Category c : cats) {
      m["categories"][std::string(to_string(c))] = split_provenance(support.at(c));
      m["test_hashes"][std::string(to_string(c))] = content_hash(corpus.at(c, Split::test));
    }
    m["transitions"] = std::string(to_string(cfg.transitions));
    m["environment"] = environment_fingerprint();
    write_json(out / "manifest.json", m);
  }

  std::optional<typename B::Model> ft_model;
  auto get_ft = [&]() -> const typename B::Model& {
    if (!ft_model) {
      detail::Stopwatch sw;
      ft_model = shared_finetune(backend, cfg, ft_split ? &*ft_split : nullptr, opts);
      timing["finetune"] = sw.seconds();
    }
    return *ft_model;
  };

  auto transitions_for = [&](Category c) -> TagSequences {
    return cfg.transitions == TransitionSource::finetune_subset ? tag_sequences(ft_split->train)
                                                                : tag_sequences(support.at(c).train);
  };

  // Aggregate transfer set, in category order.
  std::vector<TaggedSentence> agg_train, agg_valid;
  for (Category c : cats) {
    agg_train.insert(agg_train.end(), support.at(c).train.begin(), support.at(c).train.end());
    agg_valid.insert(agg_valid.end(), support.at(c).valid.begin(), support.at(c).valid.end());
  }

  // transfer models per restart, built on first use
  std::map<std::pair<std::size_t, int>, typename B::Model> tl_models;
  auto get_tl = [&](std::size_t restart, std::optional<Category> cat) -> const typename B::Model& {
    const int key = cat ? static_cast<int>(*cat) : -1;
    auto it = tl_models.find({restart, key});
    if (it != tl_models.end()) return it->second;
    auto dir = out / "stages" / "transfer" / ("restart-" + std::to_string(restart));
    if (cat) dir /= std::string(to_string(*cat));
    const auto& base = get_ft();
    detail::Stopwatch sw;
    auto m = cached_stage(backend, dir, opts, [&] {
      detail::say(opts, "transfer, restart " + std::to_string(restart) +
                            (cat ? ", category " + std::string(to_string(*cat)) : std::string(", aggregate")));
      return cat ? backend.transfer(base, support.at(*cat).train, support.at(*cat).valid, cfg.seed + restart)
                 : backend.transfer(base, agg_train, agg_valid, cfg.seed + restart);
    });
    timing["transfer"][dir.lexically_relative(out).generic_string()] = sw.seconds();
    return tl_models.emplace(std::make_pair(restart, key), std::move(m)).first->second;
  };

  auto model_for = [&](Setting s, std::size_t restart, Category c) -> const typename B::Model& {
    if (!uses_transfer(s)) return get_ft();
    return cfg.transfer_mode == TransferMode::aggregate ? get_tl(restart, std::nullopt) : get_tl(restart, c);
  };

  auto evaluate_cell = [&](Setting s, std::size_t restart) {
    std::map<std::string, EvalReport> per_cat;
    std::vector<EvalReport> list;
    for (Category c : cats) {
      const auto& test = corpus.at(c, Split::test);
      const auto& model = model_for(s, restart, c);
      const TagSequences pred = uses_structshot(s) ? backend.structshot(model, support.at(c).train, test, transitions_for(c))
                                                   : backend.predict(model, test);
      auto r = evaluate(tag_sequences(test), pred, cfg.level);
      per_cat.emplace(std::string(to_string(c)), r);
      list.push_back(r);
    }
    return std::make_pair(per_cat, average_reports(list));
  };

  MatrixResult result;
  for (Setting s : kAllSettings) {
    if (!cfg.has(s)) continue;
    RunRecord rec;
    rec.name = std::string(to_string(s));
    rec.config = config_json;
    rec.config["setting"] = rec.name;
    rec.config["restart_dependent"] = uses_transfer(s);
    rec.environment = environment_fingerprint();
    const auto sdir = out / "cells" / slug(s);
    for (std::size_t i = 0; i < cfg.restarts; ++i) {
      // restart-independent settings are evaluated once and repeated
      const std::size_t cell = uses_transfer(s) ? i : 0;
      const auto cdir = sdir / ("restart-" + std::to_string(cell));
      nlohmann::json j;
      if (!opts.force && is_done(cdir)) {
        j = read_json(cdir / "report.json");
      } else if (cell != i) {
        j = read_json(cdir / "report.json");  // written in this run for restart 0
      } else {
        detail::say(opts, rec.name + ": restart " + std::to_string(i));
        clear_done(cdir);
        detail::Stopwatch sw;
        auto [per_cat, avg] = evaluate_cell(s, i);
        j = detail::report_with_categories(per_cat, avg);
        std::filesystem::create_directories(cdir);
        write_json(cdir / "report.json", j);
        mark_done(cdir);
        timing["cells"][slug(s) + "/restart-" + std::to_string(i)] = sw.seconds();
      }
      rec.restarts.push_back(eval_report_from_json(j.at("average")));
      for (const auto& [cat, rj] : j.at("categories").items()) rec.per_category[cat].push_back(eval_report_from_json(rj));
    }
    rec.summarize();
    std::filesystem::create_directories(out / "records");
    save_run_record(out / "records" / (slug(s) + ".json"), rec);
    result.records.push_back(std::move(rec));
  }
  write_tables(out, result.records, cfg.level, result.table_csv, result.table_text);
  timing["total"] = total_clock.seconds();
  write_json(out / "timing.json", timing);
  return result;
}

// Reads the records of a finished matrix run and renders its tables again.
inline MatrixResult load_matrix(const std::filesystem::path& dir) {
  MatrixResult r;
  MetricLevel level = MetricLevel::token;
  for (Setting s : kAllSettings) {
    const auto p = dir / "records" / (slug(s) + ".json");
    if (std::filesystem::exists(p)) r.records.push_back(load_run_record(p));
  }
  if (r.records.empty()) throw IoError(dir.string() + " has no run records");
  if (r.records.front().ok()) level = r.records.front().mean.level;
  const auto rows = mean_rows(r.records);
  r.table_csv = render_comparison_csv(rows, level);
  r.table_text = render_comparison_text(rows, level);
  return r;
}

// ---------------------------------------------------------------------------
// Size sweeps
// ---------------------------------------------------------------------------

struct SweepResult {
  std::vector<RunRecord> records;  // input order
  std::string csv;
  std::string per_category_csv;  // transfer sweeps only
};

// Mean per (record, category): "count,category,<metrics>".
inline std::string render_per_category_csv(const std::vector<RunRecord>& records, std::string_view key,
                                           MetricLevel level = MetricLevel::token) {
  std::ostringstream os;
  os << "# level=" << to_string(level) << '\n' << key << ",category";
  for (auto c : kComparisonColumns) os << ',' << c;
  os << '\n' << std::fixed << std::setprecision(6);
  for (const auto& r : records)
    for (const auto& [cat, list] : r.per_category) {
      if (list.empty()) continue;
      os << r.name << ',' << cat;
      for (double v : comparison_values(average_reports(list))) os << ',' << v;
      os << '\n';
    }
  return os.str();
}

namespace detail {

// One sweep cell: reuse a completed report or compute and store one.
// Failures are returned as text and leave no marker, so a rerun retries.
template <typename Compute>
std::optional<std::string> sweep_cell(const std::filesystem::path& cdir, const RunOptions& opts, RunRecord& rec,
                                      std::size_t restart, Compute&& compute) {
  nlohmann::json j;
  if (!opts.force && is_done(cdir)) {
    j = read_json(cdir / "report.json");
  } else {
    clear_done(cdir);
    try {
      j = compute();
    } catch (const std::exception& e) {
      std::filesystem::create_directories(cdir);
      write_text_file(cdir / "error.txt", std::string(e.what()) + "\n");
      rec.failures[restart] = e.what();
      return std::string(e.what());
    }
    std::filesystem::create_directories(cdir);
    write_json(cdir / "report.json", j);
    std::error_code ec;
    std::filesystem::remove(cdir / "error.txt", ec);
    mark_done(cdir);
  }
  rec.restarts.push_back(eval_report_from_json(j.at("average")));
  if (j.contains("categories"))
    for (const auto& [cat, rj] : j.at("categories").items()) rec.per_category[cat].push_back(eval_report_from_json(rj));
  return std::nullopt;
}

}  // namespace detail

// Fine-tuning on growing proportions of the fine-tuning category; every
// restart i retrains with seed `seed + i` and is scored on that category's test
// split. Writes `<out>/sweep-ft.csv`.
template <ExperimentBackend B>
SweepResult run_finetune_sweep(const ExperimentConfig& cfg, const Corpus& corpus, B& backend,
                               const RunOptions& opts = {}) {
  cfg.validate();
  if (cfg.proportions.empty()) throw ConfigError("no proportions to sweep");
  check_corpus(corpus, cfg, true, false);
  if (!corpus.contains(cfg.finetune_category, Split::test))
    throw ConfigError("corpus lacks " + std::string(to_string(cfg.finetune_category)) + "/test");
  const auto out = cfg.output_dir;
  const auto config_json = to_json(cfg);
  detail::claim_output_dir(out, config_json, opts.force);
  const auto& full = corpus.at(cfg.finetune_category, Split::train);
  const auto& test = corpus.at(cfg.finetune_category, Split::test);
  detail::Stopwatch clock;

  SweepResult result;
  for (double p : cfg.proportions) {
    RunRecord rec;
    rec.name = detail::format_number(p);
    rec.config = config_json;
    rec.config["proportion"] = p;
    rec.environment = environment_fingerprint();
    for (std::size_t i = 0; i < cfg.restarts; ++i) {
      const auto cdir = out / "sweep-ft" / ("p-" + rec.name) / ("restart-" + std::to_string(i));
      auto err = detail::sweep_cell(cdir, opts, rec, i, [&] {
        detail::say(opts, "sweep-ft: proportion " + rec.name + ", restart " + std::to_string(i));
        auto split = make_fewsample_split(full, SamplingSpec::of_proportion(p, cfg.sampling_seed),
                                          {{cfg.finetune_category, Split::train}},
                                          std::string(to_string(cfg.finetune_category)) + "/train");
        auto model = backend.fine_tune(split.train, split.valid, cfg.seed + i);
        auto r = evaluate(tag_sequences(test), backend.predict(model, test), cfg.level);
        return nlohmann::json{{"average", to_json(r)}, {"train_size", split.train.size()},
                              {"train_hash", content_hash(split.train)}};
      });
      if (err) detail::say(opts, "sweep-ft: proportion " + rec.name + ", restart " + std::to_string(i) + " failed: " + *err);
    }
    rec.summarize();
    save_run_record(out / "sweep-ft" / ("p-" + rec.name) / "record.json", rec);
    result.records.push_back(std::move(rec));
  }
  result.csv = render_records_csv(result.records, "proportion", cfg.level);
  write_file_atomic(out / "sweep-ft.csv", result.csv);
  write_json(out / "timing.json", {{"total", clock.seconds()}});
  return result;
}

// Transfer from the shared fine-tuned model with `count` sentences per
// category, either pooled into one transfer (aggregate) or one transfer per
// category (individual). Each restart is scored on every category's test split
// and macro-averaged. Writes `<out>/sweep-tl.csv` and `sweep-tl-categories.csv`.
template <ExperimentBackend B>
SweepResult run_transfer_sweep(const ExperimentConfig& cfg, const Corpus& corpus, B& backend,
                               const RunOptions& opts = {}) {
  cfg.validate();
  if (cfg.counts.empty()) throw ConfigError("no counts to sweep");
  check_corpus(corpus, cfg, !cfg.finetuned_model, true);
  const auto out = cfg.output_dir;
  const auto config_json = to_json(cfg);
  detail::claim_output_dir(out, config_json, opts.force);
  const auto cats = transfer_categories(cfg.finetune_category);
  detail::Stopwatch clock;

  std::optional<FewSampleSplit> ft_split;
  if (!cfg.finetuned_model) ft_split = finetune_split(corpus, cfg);
  std::optional<typename B::Model> ft;
  auto get_ft = [&]() -> const typename B::Model& {
    if (!ft) ft = shared_finetune(backend, cfg, ft_split ? &*ft_split : nullptr, opts);
    return *ft;
  };

  SweepResult result;
  const std::string mode(to_string(cfg.transfer_mode));
  for (std::size_t count : cfg.counts) {
    RunRecord rec;
    rec.name = std::to_string(count);
    rec.config = config_json;
    rec.config["count"] = count;
    rec.environment = environment_fingerprint();
    for (std::size_t i = 0; i < cfg.restarts; ++i) {
      const auto cdir = out / ("sweep-tl-" + mode) / ("n-" + rec.name) / ("restart-" + std::to_string(i));
      auto err = detail::sweep_cell(cdir, opts, rec, i, [&] {
        detail::say(opts, "sweep-tl (" + mode + "): count " + rec.name + ", restart " + std::to_string(i));
        std::map<Category, FewSampleSplit> splits;
        for (Category c : cats) splits.emplace(c, category_split(corpus, c, count, cfg.sampling_seed));
        const auto& base = get_ft();
        const std::uint64_t seed = cfg.seed + i;
        std::map<std::string, EvalReport> per_cat;
        std::vector<EvalReport> list;
        auto score = [&](Category c, const typename B::Model& m) {
          const auto& test = corpus.at(c, Split::test);
          auto r = evaluate(tag_sequences(test), backend.predict(m, test), cfg.level);
          per_cat.emplace(std::string(to_string(c)), r);
          list.push_back(r);
        };
        if (cfg.transfer_mode == TransferMode::aggregate) {
          std::vector<TaggedSentence> train, valid;
          for (Category c : cats) {
            train.insert(train.end(), splits.at(c).train.begin(), splits.at(c).train.end());
            valid.insert(valid.end(), splits.at(c).valid.begin(), splits.at(c).valid.end());
          }
          auto m = backend.transfer(base, train, valid, seed);
          for (Category c : cats) score(c, m);
        } else {
          for (Category c : cats) score(c, backend.transfer(base, splits.at(c).train, splits.at(c).valid, seed));
        }
        return detail::report_with_categories(per_cat, average_reports(list));
      });
      if (err) detail::say(opts, "sweep-tl: count " + rec.name + ", restart " + std::to_string(i) + " failed: " + *err);
    }
    rec.summarize();
    save_run_record(out / ("sweep-tl-" + mode) / ("n-" + rec.name) / "record.json", rec);
    result.records.push_back(std::move(rec));
  }
  result.csv = render_records_csv(result.records, "count", cfg.level);
  result.per_category_csv = render_per_category_csv(result.records, "count", cfg.level);
  write_file_atomic(out / ("sweep-tl-" + mode + ".csv"), result.csv);
  write_file_atomic(out / ("sweep-tl-" + mode + "-categories.csv"), result.per_category_csv);
  write_json(out / "timing.json", {{"total", clock.seconds()}});
  return result;
}

// ---------------------------------------------------------------------------
// Adversarial support probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
  std::vector<TaggedSentence> base_support;   // always in the support set, ahead of the pool
  std::optional<TagSequences> transitions;    // default: tags of base support + whole pool
  double threshold = 0.20;                    // flag SN F1 drops larger than this
  StructShotOptions structshot;
  MetricLevel level = MetricLevel::token;
};

struct ProbeStep {
  std::size_t k = 0;               // pool sentences in the support set
  std::size_t support_sentences = 0;
  std::string added;               // id of the pool sentence added at this step
  std::optional<EvalReport> report;
  std::string skipped;             // why there is no report
  std::optional<double> delta_sn_f1;  // against the previous evaluated step
  std::optional<double> delta_sv_f1;
  bool flagged = false;
};

// Adds pool sentences one at a time and rescores `test` with StructShot
// after each addition. The model is frozen, so embeddings are computed once;
// transitions stay fixed across steps so only the support changes.
template <TokenEmbedder Model>
std::vector<ProbeStep> run_adversarial_probe(const std::vector<TaggedSentence>& pool,
                                             const std::vector<TaggedSentence>& test, const Model& model,
                                             const ProbeOptions& opts = {}) {
  if (pool.empty()) throw DomainError("probe pool is empty");
  if (test.empty()) throw DomainError("probe test set is empty");
  TagSequences transitions;
  if (opts.transitions) {
    transitions = *opts.transitions;
  } else {
    transitions = tag_sequences(opts.base_support);
    for (const auto& s : pool) transitions.push_back(s.tags);
  }
  const auto tm = estimate_transitions(transitions);
  const auto test_emb = extract_token_embeddings(model, test);
  const auto base_emb = extract_token_embeddings(model, opts.base_support);
  const auto pool_emb = extract_token_embeddings(model, pool);
  const auto gold = tag_sequences(test);

  SupportSet support;
  std::array<bool, kNumTags> seen{};
  for (std::size_t i = 0; i < opts.base_support.size(); ++i) {
    add_to_support(support, opts.base_support[i], base_emb[i], sentence_label(opts.base_support[i], i));
    for (Tag t : opts.base_support[i].tags) seen[tag_index(t)] = true;
  }

  std::vector<ProbeStep> steps;
  std::optional<EvalReport> prev;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto label = sentence_label(pool[k], opts.base_support.size() + k);
    add_to_support(support, pool[k], pool_emb[k], label);
    for (Tag t : pool[k].tags) seen[tag_index(t)] = true;
    ProbeStep step;
    step.k = k + 1;
    step.support_sentences = opts.base_support.size() + k + 1;
    step.added = label;
    if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
      step.skipped = "support does not yet cover every tag";
    } else {
      step.report = evaluate(gold, structshot_decode(test_emb, support, tm, opts.structshot), opts.level);
      if (prev) {
        step.delta_sn_f1 = step.report->sn.f1 - prev->sn.f1;
        step.delta_sv_f1 = step.report->sv.f1 - prev->sv.f1;
        step.flagged = -*step.delta_sn_f1 > opts.threshold;
      }
      prev = step.report;
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

inline std::string render_probe_csv(const std::vector<ProbeStep>& steps) {
  std::ostringstream os;
  os << "k,support_sentences,added,status";
  for (auto c : kComparisonColumns) os << ',' << c;
  os << ",delta SN f1,delta SV f1,flagged\n" << std::fixed << std::setprecision(6);
  for (const auto& s : steps) {
    os << s.k << ',' << s.support_sentences << ',' << s.added << ',' << (s.report ? "ok" : "skipped");
    if (s.report)
      for (double v : comparison_values(*s.report)) os << ',' << v;
    else
      os << ",,,,,,";
    os << ',';
    if (s.delta_sn_f1) os << *s.delta_sn_f1;
    os << ',';
    if (s.delta_sv_f1) os << *s.delta_sv_f1;
    os << ',' << (s.flagged ? "yes" : "no") << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

template <TokenEmbedder Model>
std::size_t export_embeddings(const Model& model, const std::vector<TaggedSentence>& sentences,
                              const std::filesystem::path& path, EmbeddingFormat format = EmbeddingFormat::text) {
  const auto rows = embedding_rows(sentences, extract_token_embeddings(model, sentences));
  write_embeddings_file(path, rows, format);
  return rows.size();
}

// ---------------------------------------------------------------------------
// Fine-tuning run directory
//
//   config.json            experiment config
//   manifest.json          seeds, generator, sample hashes, hyperparameters, environment
//   data/train.txt, data/valid.txt
//   metrics.csv            restart x grid cell x checkpoint, per-tag P/R/F1 and weighted F1
//   checkpoints/restart-<i>/step-<N>/   checkpoints of the selected grid cell (policy-dependent)
//   restarts/restart-<i>/  result.json, metrics.csv, best/ (model), DONE
//   best/                  model of the restart with the highest validation weighted F1
//   record.json            RunRecord of test-split reports
//   report.csv, report.txt
//   timing.json
// ---------------------------------------------------------------------------

enum class CheckpointPolicy { none, selected, all };

inline std::optional<CheckpointPolicy> parse_checkpoint_policy(std::string_view s) noexcept {
  if (s == "none") return CheckpointPolicy::none;
  if (s == "selected") return CheckpointPolicy::selected;
  if (s == "all") return CheckpointPolicy::all;
  return std::nullopt;
}

struct TrainRunResult {
  RunRecord record;
  std::filesystem::path best_dir;
  std::size_t best_restart = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "restart,learning_rate,epochs,step,train_loss,SN precision,SN recall,SN f1,SV precision,SV recall,SV f1,"
    "weighted_f1,selected,error\n";

namespace detail {

inline std::string cell_label(const TrainingConfig& c) {
  return "lr-" + format_number(c.learning_rate) + "_ep-" + std::to_string(c.epochs);
}

inline void copy_dir(const std::filesystem::path& from, const std::filesystem::path& to) {
  std::filesystem::remove_all(to);
  std::filesystem::create_directories(to.parent_path());
  std::filesystem::copy(from, to, std::filesystem::copy_options::recursive);
}

}  // namespace detail

inline TrainRunResult run_training(const ExperimentConfig& cfg, const Corpus& corpus,
                                   CheckpointPolicy policy = CheckpointPolicy::selected, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  check_corpus(corpus, cfg, true, false);
  const auto test_key = std::string(to_string(cfg.finetune_category)) + "/test";
  if (!corpus.contains(cfg.finetune_category, Split::test)) throw ConfigError("corpus lacks " + test_key);
  const auto out = cfg.output_dir;
  const auto split = finetune_split(corpus, cfg);
  const auto& test = corpus.at(cfg.finetune_category, Split::test);
  const auto config_json = to_json(cfg);
  detail::claim_output_dir(out, config_json, opts.force);
  detail::Stopwatch clock;

  write_conll_file(out / "data" / "train.txt", split.train);
  write_conll_file(out / "data" / "valid.txt", split.valid);
  {
    nlohmann::json m;
    m["kind"] = "fine-tune";
    m["seed"] = cfg.seed;
    m["restart_seeds"] = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.restarts; ++i) m["restart_seeds"].push_back(cfg.seed + i);
    m["generator"] = std::string(kGeneratorId);
    m["split"] = split_provenance(split);
    m["test_hash"] = content_hash(test);
    m["grid"] = to_json(cfg.grid);
    m["training"] = to_json(cfg.training);
    m["encoder"] = cfg.encoder;
    m["checkpoint_policy"] = policy == CheckpointPolicy::none ? "none" : policy == CheckpointPolicy::all ? "all" : "selected";
    m["environment"] = environment_fingerprint();
    write_json(out / "manifest.json", m);
  }

  RunRecord rec;
  rec.name = std::string(to_string(cfg.finetune_category));
  rec.config = config_json;
  rec.environment = environment_fingerprint();
  std::string metrics(kMetricsHeader);
  std::optional<std::pair<double, std::size_t>> best;  // (validation weighted F1, restart)
  nlohmann::json timing = nlohmann::json::object();

  for (std::size_t i = 0; i < cfg.restarts; ++i) {
    const auto rdir = out / "restarts" / ("restart-" + std::to_string(i));
    const auto ckdir = out / "checkpoints" / ("restart-" + std::to_string(i));
    if (opts.force || !is_done(rdir)) {
      clear_done(rdir);
      detail::say(opts, "restart " + std::to_string(i) + " (seed " + std::to_string(cfg.seed + i) + ")");
      detail::Stopwatch sw;
      auto base = cfg.training;
      base.seed = cfg.seed + i;
      base.keep_all_snapshots = false;
      const auto staging = ckdir / ".cells";
      fs::remove_all(ckdir);

      std::ostringstream rows;
      rows << std::fixed << std::setprecision(6);
      auto grid = grid_search(cfg.grid, base, [&](const TrainingConfig& c) {
        return fine_tune(EncoderHandle{cfg.encoder}, split.train, split.valid, c, [&](const Checkpoint& cp) {
          if (policy != CheckpointPolicy::none && cp.model)
            save_model(*cp.model, staging / detail::cell_label(c) / ("step-" + std::to_string(cp.step)));
        });
      });
      std::size_t best_cell = 0;
      for (std::size_t k = 0; k < grid.cells.size(); ++k)
        if (grid.cells[k].result && grid.cells[k].config.learning_rate == grid.best_config.learning_rate &&
            grid.cells[k].config.epochs == grid.best_config.epochs)
          best_cell = k;
      for (std::size_t k = 0; k < grid.cells.size(); ++k) {
        const auto& cell = grid.cells[k];
        const auto lr = detail::format_number(cell.config.learning_rate);
        if (!cell.result) {
          auto e = cell.error;
          std::replace(e.begin(), e.end(), ',', ';');
          rows << i << ',' << lr << ',' << cell.config.epochs << ",,,,,,,,,,," << e << '\n';
          continue;
        }
        for (const auto& cp : cell.result->all) {
          const bool selected = k == best_cell && cp.step == cell.result->best.step;
          rows << i << ',' << lr << ',' << cell.config.epochs << ',' << cp.step << ',' << cp.train_loss;
          for (double v : comparison_values(cp.validation)) rows << ',' << v;
          rows << ',' << cp.weighted_f1 << ',' << (selected ? "yes" : "no") << ",\n";
        }
      }
      if (policy == CheckpointPolicy::selected) {
        const auto chosen = staging / detail::cell_label(grid.best_config);
        if (fs::exists(chosen))
          for (const auto& e : fs::directory_iterator(chosen)) fs::rename(e.path(), ckdir / e.path().filename());
        fs::remove_all(staging);
      } else if (policy == CheckpointPolicy::all && fs::exists(staging)) {
        for (const auto& e : fs::directory_iterator(staging)) fs::rename(e.path(), ckdir / e.path().filename());
        fs::remove_all(staging);
      }

      const auto report = evaluate_model(*grid.best.model, test, cfg.level);
      save_model(*grid.best.model, rdir / "best");
      write_file_atomic(rdir / "metrics.csv", rows.str());
      nlohmann::json res{{"seed", cfg.seed + i},
                         {"best_config", to_json(grid.best_config)},
                         {"best_step", grid.best.step},
                         {"validation", to_json(grid.best.validation)},
                         {"validation_weighted_f1", grid.best.weighted_f1},
                         {"test", to_json(report)}};
      write_json(rdir / "result.json", res);
      mark_done(rdir);
      timing["restarts"][std::to_string(i)] = sw.seconds();
    }
    const auto res = read_json(rdir / "result.json");
    metrics += read_text_file(rdir / "metrics.csv");
    rec.restarts.push_back(eval_report_from_json(res.at("test")));
    const double vf = res.at("validation_weighted_f1").get<double>();
    if (!best || vf > best->first) best = std::make_pair(vf, i);
  }

  rec.summarize();
  write_file_atomic(out / "metrics.csv", metrics);
  save_run_record(out / "record.json", rec);
  std::string csv, text;
  write_tables(out, {rec}, cfg.level, csv, text);
  fs::rename(out / "comparison.csv", out / "report.csv");
  fs::rename(out / "comparison.txt", out / "report.txt");
  TrainRunResult result;
  result.best_restart = best->second;
  result.best_dir = out / "best";
  detail::copy_dir(out / "restarts" / ("restart-" + std::to_string(best->second)) / "best", result.best_dir);
  write_json(out / "best.json", {{"restart", best->second}, {"validation_weighted_f1", best->first}});
  timing["total"] = clock.seconds();
  write_json(out / "timing.json", timing);
  result.record = std::move(rec);
  return result;
}

}  // namespace fewvuln
