// fewvuln: command-line front end for the library.
//
//   fewvuln <verb> [options]      (fewvuln <verb> --help for details)
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage or configuration error,
// 3 malformed input data, 4 I/O error, 5 training failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fewvuln/fewvuln.hpp"

namespace fs = std::filesystem;
using namespace fewvuln;

namespace {

bool quiet = false;

void note(const std::string& msg) {
  if (!quiet) std::cerr << "[fewvuln] " << msg << '\n';
}

LogFn logger() {
  return [](const std::string& m) { note(m); };
}

template <typename E>
E parse_or_throw(std::optional<E> v, const std::string& what, const std::string& text) {
  if (!v) throw ConfigError("unknown " + what + " '" + text + "'");
  return *v;
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_text_file(p))); }

std::vector<TaggedSentence> read_sentences(const fs::path& p, bool whitespace) {
  ParseOptions o;
  if (whitespace) o.delimiter = ColumnDelimiter::whitespace;
  return read_conll_file(p, o);
}

// Model argument: a model directory, or a run directory holding best/.
fs::path model_path(const fs::path& p) {
  if (is_model_dir(p)) return p;
  if (is_model_dir(p / "best")) return p / "best";
  if (auto found = locate_encoder(p.string())) return *found;
  throw ConfigError("'" + p.string() + "' is not a model directory or a run directory with best/");
}

// ---------------------------------------------------------------------------
// Experiment options shared by train, transfer, matrix and the sweeps. Every
// ExperimentConfig field can be set from a JSON file and overridden here.
// ---------------------------------------------------------------------------

struct ExperimentFlags {
  std::string config_file;
  std::optional<std::string> root, encoder, category, finetuned, mode, transitions, level, out, precision;
  std::optional<std::vector<std::string>> settings;
  std::optional<double> proportion, temperature, threshold, weight_decay;
  std::optional<std::size_t> ft_count, count, restarts, batch_size, checkpoints, max_steps, warmup;
  std::optional<std::uint64_t> seed, sampling_seed;
  std::optional<std::vector<double>> lrs, proportions;
  std::optional<std::vector<std::size_t>> epochs, counts;
  std::string grid;
  bool no_crf = false, aggregate = false, individual = false, force = false, whitespace = false;
};

void add_experiment_flags(CLI::App* app, ExperimentFlags& f) {
  app->add_option("--config", f.config_file, "JSON experiment config; flags below override its fields");
  app->add_option("--root,--data", f.root, "dataset root holding <category>/<split>.txt");
  app->add_flag("--whitespace", f.whitespace, "dataset columns are whitespace-separated rather than tab-separated");
  app->add_option("--encoder", f.encoder, "random[:k=v,...], a model directory, or a name under $FEWVULN_MODEL_HOME");
  app->add_option("--settings", f.settings, "subset of FT,FT+SS,FT+TL,FT+TL+SS")->delimiter(',');
  app->add_option("--category", f.category, "fine-tuning category (default memc)");
  app->add_option("--proportion", f.proportion, "fine-tuning sample proportion (default 0.10)");
  app->add_option("--ft-count", f.ft_count, "fine-tuning sample size in sentences instead of a proportion");
  app->add_option("--from", f.finetuned, "use this fine-tuned model (or run directory) instead of fine-tuning");
  app->add_option("--count", f.count, "sentences per transfer category (default 64)");
  app->add_option("--mode", f.mode, "transfer mode: aggregate or individual");
  app->add_flag("--aggregate", f.aggregate, "same as --mode aggregate");
  app->add_flag("--individual", f.individual, "same as --mode individual");
  app->add_option("--sampling-seed", f.sampling_seed, "seed for data sampling (default 42)");
  app->add_flag("--no-crf", f.no_crf, "StructShot without Viterbi: plain nearest-neighbour tags");
  app->add_option("--transitions", f.transitions, "transition corpus: finetune-subset or support");
  app->add_option("--temperature", f.temperature, "emission softmax temperature (default 1)");
  app->add_option("--grid", f.grid, "'default' (lr 1e-6,5e-6,1e-5 x epochs 3,5) or 'lr=a,b;epochs=c,d'");
  app->add_option("--lr", f.lrs, "learning rates of the grid")->delimiter(',');
  app->add_option("--epochs", f.epochs, "epoch counts of the grid")->delimiter(',');
  app->add_option("--batch-size", f.batch_size, "batch size (default 2)");
  app->add_option("--precision", f.precision, "full or half");
  app->add_option("--checkpoints-per-run", f.checkpoints, "evenly spaced checkpoints per run (default 5)");
  app->add_option("--max-steps", f.max_steps, "cap on optimisation steps per run");
  app->add_option("--weight-decay", f.weight_decay, "AdamW weight decay (default 0)");
  app->add_option("--warmup-steps", f.warmup, "linear warmup steps (default 0)");
  app->add_option("--restarts", f.restarts, "random restarts (default 10); restart i uses seed + i");
  app->add_option("--seed", f.seed, "base seed (default 42)");
  app->add_option("--level", f.level, "metric level: token or span");
  app->add_option("--proportions", f.proportions, "fine-tuning sweep proportions")->delimiter(',');
  app->add_option("--counts", f.counts, "transfer sweep counts")->delimiter(',');
  app->add_option("--threshold", f.threshold, "probe drop threshold (default 0.20)");
  app->add_option("--out", f.out, "output directory");
  app->add_flag("--force", f.force, "redo cells that already finished");
}

void apply_grid(const std::string& text, GridSpace& g) {
  if (text.empty() || text == "default") return;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("bad --grid part '" + part + "'");
    const auto key = part.substr(0, eq);
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    if (key == "lr") {
      g.learning_rates.clear();
      while (std::getline(vs, v, ',')) g.learning_rates.push_back(std::stod(v));
    } else if (key == "epochs") {
      g.epochs.clear();
      while (std::getline(vs, v, ',')) g.epochs.push_back(std::stoul(v));
    } else if (key == "batch") {
      g.batch_size = std::stoul(part.substr(eq + 1));
    } else {
      throw ConfigError("unknown --grid key '" + key + "'");
    }
  }
}

ExperimentConfig build_config(const ExperimentFlags& f) {
  ExperimentConfig c = f.config_file.empty() ? ExperimentConfig{} : load_experiment_config(f.config_file);
  if (f.root) c.data_root = *f.root;
  if (f.encoder) c.encoder = *f.encoder;
  if (f.settings) {
    c.settings.clear();
    for (const auto& s : *f.settings) c.settings.push_back(parse_or_throw(parse_setting(s), "setting", s));
  }
  if (f.category) c.finetune_category = parse_or_throw(parse_category(*f.category), "category", *f.category);
  if (f.proportion && f.ft_count) throw ConfigError("--proportion and --ft-count are exclusive");
  if (f.proportion) c.finetune_sampling = SamplingSpec::of_proportion(*f.proportion, c.finetune_sampling.seed);
  if (f.ft_count) c.finetune_sampling = SamplingSpec::of_count(*f.ft_count, c.finetune_sampling.seed);
  if (f.finetuned) c.finetuned_model = model_path(*f.finetuned);
  if (f.count) c.transfer_count = *f.count;
  if (f.aggregate && f.individual) throw ConfigError("--aggregate and --individual are exclusive");
  if (f.mode) c.transfer_mode = parse_or_throw(parse_transfer_mode(*f.mode), "transfer mode", *f.mode);
  if (f.aggregate) c.transfer_mode = TransferMode::aggregate;
  if (f.individual) c.transfer_mode = TransferMode::individual;
  if (f.sampling_seed) {
    c.sampling_seed = *f.sampling_seed;
    c.finetune_sampling.seed = *f.sampling_seed;
  }
  if (f.no_crf) c.use_crf = false;
  if (f.transitions)
    c.transitions = parse_or_throw(parse_transition_source(*f.transitions), "transition source", *f.transitions);
  if (f.temperature) c.temperature = *f.temperature;
  apply_grid(f.grid, c.grid);
  if (f.lrs) c.grid.learning_rates = *f.lrs;
  if (f.epochs) c.grid.epochs = *f.epochs;
  if (f.batch_size) c.grid.batch_size = *f.batch_size;
  if (f.precision) {
    if (*f.precision != "full" && *f.precision != "half") throw ConfigError("--precision must be full or half");
    c.training.precision = *f.precision == "half" ? Precision::half : Precision::full;
  }
  if (f.checkpoints) c.training.checkpoints_per_run = *f.checkpoints;
  if (f.max_steps) c.training.max_steps = *f.max_steps;
  if (f.weight_decay) c.training.weight_decay = *f.weight_decay;
  if (f.warmup) c.training.warmup_steps = *f.warmup;
  if (f.restarts) c.restarts = *f.restarts;
  if (f.seed) c.seed = *f.seed;
  if (f.level) c.level = parse_or_throw(parse_metric_level(*f.level), "metric level", *f.level);
  if (f.proportions) c.proportions = *f.proportions;
  if (f.counts) c.counts = *f.counts;
  if (f.threshold) c.probe_threshold = *f.threshold;
  if (f.out) c.output_dir = *f.out;
  if (c.data_root.empty()) throw ConfigError("no dataset root; pass --root or set data_root in the config");
  c.validate();
  return c;
}

Corpus load_corpus(const ExperimentConfig& c, bool whitespace) {
  ParseOptions o;
  if (whitespace) o.delimiter = ColumnDelimiter::whitespace;
  note("loading " + c.data_root.string());
  return load_viem_dataset(c.data_root, o);
}

RunOptions run_options(const ExperimentFlags& f) {
  RunOptions o;
  o.force = f.force;
  o.log = logger();
  return o;
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

nlohmann::json file_entry(const fs::path& p, const std::vector<TaggedSentence>& s) {
  std::size_t tokens = 0;
  for (const auto& x : s) tokens += x.size();
  return {{"file", p.generic_string()}, {"sentences", s.size()}, {"tokens", tokens}, {"hash", content_hash(s)}};
}

int cmd_ingest(const std::string& root, bool whitespace, const std::optional<std::string>& out) {
  ParseOptions o;
  if (whitespace) o.delimiter = ColumnDelimiter::whitespace;
  const auto corpus = load_viem_dataset(root, o);
  if (corpus.entries.empty()) throw IoError("no <category>/<split> files under " + root);
  nlohmann::json manifest{{"source", root}, {"files", nlohmann::json::array()}};
  for (const auto& [key, sentences] : corpus.entries) {
    const auto rel = fs::path(std::string(to_string(key.first))) / (std::string(to_string(key.second)) + ".txt");
    manifest["files"].push_back(file_entry(rel, sentences));
    std::cout << to_string(key.first) << '/' << to_string(key.second) << ": " << sentences.size() << " sentences\n";
    if (out) write_conll_file(fs::path(*out) / rel, sentences);
  }
  std::vector<std::string> missing;
  for (Category c : kAllCategories)
    for (Split s : kAllSplits)
      if (!corpus.contains(c, s)) missing.push_back(std::string(to_string(c)) + "/" + std::string(to_string(s)));
  manifest["missing"] = missing;
  if (!missing.empty()) note(std::to_string(missing.size()) + " category/split files are absent");
  if (out) {
    write_json(fs::path(*out) / "manifest.json", manifest);
    note("normalised corpus written to " + *out);
  }
  return 0;
}

int cmd_stats(const std::string& root, bool whitespace, const std::string& format, const std::optional<std::string>& csv) {
  ParseOptions o;
  if (whitespace) o.delimiter = ColumnDelimiter::whitespace;
  const auto corpus = load_viem_dataset(root, o);
  const auto rows = corpus_statistics_table(corpus);
  if (rows.empty()) throw IoError("no <category>/<split> files under " + root);
  if (format == "csv") {
    std::cout << render_stats_csv(rows);
  } else {
    std::cout << render_stats_text(rows);
    // memc train+valid plus the other train splits
    const auto ne = non_entity_summary(corpus);
    std::cout << std::fixed << std::setprecision(4);
    if (ne.all) std::cout << "\nnon-entity-only sentences, all categories: " << *ne.all << '\n';
    if (ne.without_memc) std::cout << "non-entity-only sentences, without memc: " << *ne.without_memc << '\n';
  }
  if (csv) write_text_file(*csv, render_stats_csv(rows));
  return 0;
}

struct SampleFlags {
  std::string root, out;
  std::string category = "memc";
  std::optional<double> proportion;
  std::vector<std::size_t> counts;
  std::vector<std::string> categories;
  bool aggregate = false, whitespace = false;
  std::uint64_t seed = kDefaultSeed;
};

int cmd_sample(const SampleFlags& f) {
  ParseOptions o;
  if (f.whitespace) o.delimiter = ColumnDelimiter::whitespace;
  const auto corpus = load_viem_dataset(f.root, o);
  const fs::path out = f.out;
  nlohmann::json manifest{{"generator", std::string(kGeneratorId)}, {"seed", f.seed}, {"outputs", nlohmann::json::array()}};
  auto emit = [&](const fs::path& dir, const FewSampleSplit& s, const nlohmann::json& sources) {
    write_conll_file(dir / "train.txt", s.train);
    write_conll_file(dir / "valid.txt", s.valid);
    auto e = split_provenance(s);
    e["dir"] = dir.lexically_relative(out).generic_string();
    e["sources"] = sources;
    manifest["outputs"].push_back(e);
    std::cout << e["dir"].get<std::string>() << ": " << s.train.size() << " train, " << s.valid.size() << " valid\n";
  };
  auto source = [&](Category c) {
    const auto& full = corpus.at(c, Split::train);
    return nlohmann::json{{"category", std::string(to_string(c))}, {"split", "train"}, {"size", full.size()},
                          {"hash", content_hash(full)}};
  };

  if (f.proportion && !f.counts.empty()) throw ConfigError("--proportion and --counts are exclusive");
  if (f.proportion) {
    const auto cat = parse_or_throw(parse_category(f.category), "category", f.category);
    auto s = make_fewsample_split(corpus.at(cat, Split::train), SamplingSpec::of_proportion(*f.proportion, f.seed),
                                  {{cat, Split::train}}, f.category + "/train");
    emit(out / std::string(to_string(cat)), s, nlohmann::json::array({source(cat)}));
  } else if (!f.counts.empty()) {
    std::vector<Category> cats;
    if (f.categories.empty())
      cats = transfer_categories(Category::memc);
    else
      for (const auto& c : f.categories) cats.push_back(parse_or_throw(parse_category(c), "category", c));
    for (std::size_t n : f.counts) {
      const auto ndir = out / ("n-" + std::to_string(n));
      std::vector<TaggedSentence> agg_train, agg_valid;
      nlohmann::json sources = nlohmann::json::array();
      for (Category c : cats) {
        auto s = category_split(corpus, c, n, f.seed);
        emit(ndir / std::string(to_string(c)), s, nlohmann::json::array({source(c)}));
        agg_train.insert(agg_train.end(), s.train.begin(), s.train.end());
        agg_valid.insert(agg_valid.end(), s.valid.begin(), s.valid.end());
        sources.push_back(source(c));
      }
      if (f.aggregate) {
        FewSampleSplit agg;
        agg.train = std::move(agg_train);
        agg.valid = std::move(agg_valid);
        agg.spec = SamplingSpec::of_count(n, f.seed);
        emit(ndir / "aggregate", agg, sources);
      }
    }
  } else {
    throw ConfigError("pass --proportion or --counts");
  }
  write_json(out / "manifest.json", manifest);
  return 0;
}

int cmd_train(const ExperimentFlags& f, const std::string& policy_text) {
  auto cfg = build_config(f);
  const auto policy = parse_or_throw(parse_checkpoint_policy(policy_text), "checkpoint policy", policy_text);
  const auto corpus = load_corpus(cfg, f.whitespace);
  auto r = run_training(cfg, corpus, policy, run_options(f));
  std::cout << render_comparison_text(mean_rows({r.record}), cfg.level);
  note("best model (restart " + std::to_string(r.best_restart) + ") in " + r.best_dir.string());
  return 0;
}

int cmd_transfer_sweep(const ExperimentFlags& f, bool from_transfer_verb) {
  if (from_transfer_verb && !f.finetuned) throw ConfigError("transfer needs --from MODEL");
  auto cfg = build_config(f);
  if (from_transfer_verb && !f.counts) cfg.counts = {cfg.transfer_count};
  const auto corpus = load_corpus(cfg, f.whitespace);
  auto backend = make_tagger_backend(cfg, logger());
  auto r = run_transfer_sweep(cfg, corpus, backend, run_options(f));
  std::cout << render_comparison_text(mean_rows(r.records), cfg.level);
  for (const auto& rec : r.records)
    if (!rec.failures.empty()) note("count " + rec.name + ": " + std::to_string(rec.failures.size()) + " restart(s) failed");
  return 0;
}

int cmd_matrix(const ExperimentFlags& f) {
  auto cfg = build_config(f);
  const auto corpus = load_corpus(cfg, f.whitespace);
  auto backend = make_tagger_backend(cfg, logger());
  auto r = run_setting_matrix(cfg, corpus, backend, run_options(f));
  std::cout << r.table_text;
  return 0;
}

int cmd_sweep_ft(const ExperimentFlags& f) {
  auto cfg = build_config(f);
  const auto corpus = load_corpus(cfg, f.whitespace);
  auto backend = make_tagger_backend(cfg, logger());
  auto r = run_finetune_sweep(cfg, corpus, backend, run_options(f));
  std::cout << render_comparison_text(mean_rows(r.records), cfg.level);
  for (const auto& rec : r.records)
    if (!rec.failures.empty())
      note("proportion " + rec.name + ": " + std::to_string(rec.failures.size()) + " restart(s) failed");
  return 0;
}

struct StructShotFlags {
  std::string model, test;
  std::optional<std::string> support, support_emb, transitions, pred_out, report_out;
  bool no_crf = false, whitespace = false;
  double temperature = 1.0;
  std::string level = "token";
};

// Default transition corpus: the fine-tuning sample stored next to a run's best model.
fs::path default_transitions(const fs::path& model_dir) {
  const auto p = model_dir.parent_path() / "data" / "train.txt";
  if (fs::exists(p)) return p;
  throw ConfigError("no --transitions-from given and " + p.string() + " does not exist");
}

int cmd_structshot(const StructShotFlags& f) {
  if (!f.support == !f.support_emb) throw ConfigError("pass exactly one of --support and --support-emb");
  const auto dir = model_path(f.model);
  const auto model = load_model(dir);
  const auto test = read_sentences(f.test, f.whitespace);
  const fs::path tpath = f.transitions ? fs::path(*f.transitions) : default_transitions(dir);
  const auto transitions = estimate_transitions(tag_sequences(read_sentences(tpath, f.whitespace)));
  SupportSet support;
  fs::path spath;
  if (f.support) {
    spath = *f.support;
    const auto s = read_sentences(spath, f.whitespace);
    support = build_support_set(s, extract_token_embeddings(model, s));
  } else {
    spath = *f.support_emb;
    support = support_from_rows(read_embeddings_file(spath));
    check_tag_coverage(support);
  }
  StructShotOptions o;
  o.use_crf = !f.no_crf;
  o.emission.temperature = f.temperature;
  const auto pred = structshot_decode(extract_token_embeddings(model, test), support, transitions, o);
  const auto level = parse_or_throw(parse_metric_level(f.level), "metric level", f.level);
  const auto report = evaluate(tag_sequences(test), pred, level);
  std::cout << render_comparison_text({{o.use_crf ? "structshot" : "nearest-neighbour", report}}, level);
  if (f.pred_out) {
    auto out = test;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].tags = pred[i];
    write_conll_file(*f.pred_out, out);
  }
  if (f.report_out)
    write_json(*f.report_out, {{"report", to_json(report)},
                               {"model", dir.string()},
                               {"use_crf", o.use_crf},
                               {"temperature", o.emission.temperature},
                               {"support", {{"file", spath.string()}, {"hash", file_hash(spath)}}},
                               {"test", {{"file", f.test}, {"hash", file_hash(f.test)}}},
                               {"transitions", {{"file", tpath.string()}, {"hash", file_hash(tpath)}}}});
  return 0;
}

int cmd_eval(const std::string& gold_file, const std::string& pred_file, const std::string& level_text,
             const std::optional<std::string>& csv, const std::optional<std::string>& json, bool whitespace) {
  const auto gold = read_sentences(gold_file, whitespace);
  const auto pred = read_sentences(pred_file, whitespace);
  if (gold.size() != pred.size())
    throw DomainError("gold has " + std::to_string(gold.size()) + " sentences, predictions " +
                      std::to_string(pred.size()));
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i].tokens != pred[i].tokens)
      throw DomainError("sentence " + std::to_string(i + 1) + ": tokens of gold and prediction differ");
  const auto level = parse_or_throw(parse_metric_level(level_text), "metric level", level_text);
  const auto report = evaluate(tag_sequences(gold), tag_sequences(pred), level);
  const std::vector<NamedReport> rows{{fs::path(pred_file).filename().string(), report}};
  std::cout << render_comparison_text(rows, level);
  if (report.sn.support + report.sv.support > 0)
    std::cout << "weighted f1: " << std::fixed << std::setprecision(4) << weighted_f1(report) << '\n';
  if (csv) write_text_file(*csv, render_comparison_csv(rows, level));
  if (json) write_json(*json, to_json(report));
  return 0;
}

struct ProbeFlags {
  std::string model, pool, test, out;
  std::optional<std::string> base, transitions;
  double threshold = 0.20, temperature = 1.0;
  bool no_crf = false, whitespace = false;
  std::string level = "token";
};

int cmd_probe(const ProbeFlags& f) {
  const auto dir = model_path(f.model);
  const auto model = load_model(dir);
  const auto pool = read_sentences(f.pool, f.whitespace);
  const auto test = read_sentences(f.test, f.whitespace);
  ProbeOptions o;
  o.threshold = f.threshold;
  o.structshot.use_crf = !f.no_crf;
  o.structshot.emission.temperature = f.temperature;
  o.level = parse_or_throw(parse_metric_level(f.level), "metric level", f.level);
  nlohmann::json manifest{{"model", dir.string()},
                          {"pool", {{"file", f.pool}, {"hash", file_hash(f.pool)}}},
                          {"test", {{"file", f.test}, {"hash", file_hash(f.test)}}},
                          {"threshold", f.threshold},
                          {"use_crf", !f.no_crf},
                          {"temperature", f.temperature},
                          {"environment", environment_fingerprint()}};
  if (f.base) {
    o.base_support = read_sentences(*f.base, f.whitespace);
    manifest["base_support"] = {{"file", *f.base}, {"hash", file_hash(*f.base)}};
  }
  if (f.transitions) {
    o.transitions = tag_sequences(read_sentences(*f.transitions, f.whitespace));
    manifest["transitions"] = {{"file", *f.transitions}, {"hash", file_hash(*f.transitions)}};
  } else {
    manifest["transitions"] = "base support + pool";
  }
  const auto steps = run_adversarial_probe(pool, test, model, o);
  const auto csv = render_probe_csv(steps);
  std::cout << csv;
  const fs::path out = f.out;
  write_file_atomic(out / "probe.csv", csv);
  write_json(out / "manifest.json", manifest);
  for (const auto& s : steps)
    if (s.flagged)
      note("step " + std::to_string(s.k) + " (" + s.added + ") drops SN F1 by " + std::to_string(-*s.delta_sn_f1));
  return 0;
}

int cmd_export(const std::string& model_arg, const std::string& input, const std::string& out, bool binary,
               bool whitespace) {
  const auto model = load_model(model_path(model_arg));
  const auto n = export_embeddings(model, read_sentences(input, whitespace), out,
                                   binary ? EmbeddingFormat::binary : EmbeddingFormat::text);
  note("wrote " + std::to_string(n) + " token rows to " + out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-sample named-entity recognition for vulnerability reports"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", quiet, "no progress messages on stderr");

  std::string root, format = "text";
  std::optional<std::string> out_dir, csv_out, json_out;
  bool whitespace = false;

  auto* ingest = app.add_subcommand("ingest", "validate a dataset and optionally write a normalised copy");
  ingest->add_option("--root", root, "dataset root")->required();
  ingest->add_flag("--whitespace", whitespace, "columns are whitespace-separated");
  ingest->add_option("--out", out_dir, "write normalised tab-separated files and manifest.json here");

  auto* stats = app.add_subcommand("stats", "per category and split sentence/entity statistics");
  stats->add_option("--root", root, "dataset root")->required();
  stats->add_flag("--whitespace", whitespace, "columns are whitespace-separated");
  stats->add_option("--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  stats->add_option("--csv", csv_out, "also write CSV here");

  SampleFlags sf;
  auto* sample = app.add_subcommand("sample", "draw few-sample training subsets with validation sets");
  sample->add_option("--root", sf.root, "dataset root")->required();
  sample->add_option("--out", sf.out, "output directory")->required();
  sample->add_option("--category", sf.category, "category for --proportion (default memc)");
  sample->add_option("--proportion", sf.proportion, "fraction of the category's train split");
  sample->add_option("--counts", sf.counts, "sentences per category")->delimiter(',');
  sample->add_option("--categories", sf.categories, "categories for --counts (default: all but memc)")->delimiter(',');
  sample->add_flag("--aggregate", sf.aggregate, "also write the pooled set per count");
  sample->add_option("--seed", sf.seed, "sampling seed (default 42)");
  sample->add_flag("--whitespace", sf.whitespace, "columns are whitespace-separated");

  ExperimentFlags train_f, transfer_f, matrix_f, sweep_ft_f, sweep_tl_f;
  std::string policy = "selected";
  auto* train = app.add_subcommand("train", "fine-tune with grid search and restarts into a run directory");
  add_experiment_flags(train, train_f);
  train->add_option("--save-checkpoints", policy, "selected, all or none");

  auto* transfer = app.add_subcommand("transfer", "transfer a fine-tuned model to the other categories");
  add_experiment_flags(transfer, transfer_f);

  StructShotFlags ssf;
  auto* ss = app.add_subcommand("structshot", "tag a test file by nearest neighbours plus Viterbi");
  ss->add_option("--model", ssf.model, "model directory or run directory")->required();
  ss->add_option("--support", ssf.support, "support sentences (CoNLL)");
  ss->add_option("--support-emb", ssf.support_emb, "support as an embedding exchange file");
  ss->add_option("--test", ssf.test, "sentences to tag (CoNLL, gold tags used for scoring)")->required();
  ss->add_option("--transitions-from", ssf.transitions, "CoNLL file for transition estimates");
  ss->add_flag("--no-crf", ssf.no_crf, "nearest-neighbour tags only");
  ss->add_option("--temperature", ssf.temperature, "emission softmax temperature (default 1)");
  ss->add_option("--level", ssf.level, "token or span");
  ss->add_option("--pred-out", ssf.pred_out, "write predicted tags as CoNLL");
  ss->add_option("--report", ssf.report_out, "write the report and input hashes as JSON");
  ss->add_flag("--whitespace", ssf.whitespace, "columns are whitespace-separated");

  std::string gold, pred, level = "token";
  auto* ev = app.add_subcommand("eval", "score predicted tags against gold tags");
  ev->add_option("--gold", gold, "gold CoNLL")->required();
  ev->add_option("--pred", pred, "predicted CoNLL with the same tokens")->required();
  ev->add_option("--level", level, "token or span");
  ev->add_option("--csv", csv_out, "write the comparison row as CSV");
  ev->add_option("--json", json_out, "write the full report as JSON");
  ev->add_flag("--whitespace", whitespace, "columns are whitespace-separated");

  auto* matrix = app.add_subcommand("matrix", "run FT, FT+SS, FT+TL and FT+TL+SS and tabulate them");
  add_experiment_flags(matrix, matrix_f);
  auto* sweep_ft = app.add_subcommand("sweep-ft", "fine-tuning performance against sample proportion");
  add_experiment_flags(sweep_ft, sweep_ft_f);
  auto* sweep_tl = app.add_subcommand("sweep-tl", "transfer performance against sentences per category");
  add_experiment_flags(sweep_tl, sweep_tl_f);

  ProbeFlags pf;
  auto* probe = app.add_subcommand("probe", "grow a support set one sentence at a time and track the scores");
  probe->add_option("--model", pf.model, "model directory or run directory")->required();
  probe->add_option("--pool", pf.pool, "sentences added in order (CoNLL)")->required();
  probe->add_option("--test", pf.test, "scored sentences (CoNLL)")->required();
  probe->add_option("--base", pf.base, "support sentences present from the start");
  probe->add_option("--transitions-from", pf.transitions, "CoNLL file for transition estimates");
  probe->add_option("--threshold", pf.threshold, "flag SN F1 drops above this (default 0.20)");
  probe->add_option("--temperature", pf.temperature, "emission softmax temperature (default 1)");
  probe->add_flag("--no-crf", pf.no_crf, "nearest-neighbour tags only");
  probe->add_option("--level", pf.level, "token or span");
  probe->add_option("--out", pf.out, "output directory")->required();
  probe->add_flag("--whitespace", pf.whitespace, "columns are whitespace-separated");

  std::string model, input, emb_out;
  bool binary = false;
  auto* exp = app.add_subcommand("export-emb", "write token embeddings with gold tags");
  exp->add_option("--model", model, "model directory or run directory")->required();
  exp->add_option("--input", input, "sentences (CoNLL)")->required();
  exp->add_option("--out", emb_out, "output file")->required();
  exp->add_flag("--binary", binary, "binary layout instead of text");
  exp->add_flag("--whitespace", whitespace, "columns are whitespace-separated");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (ingest->parsed()) return cmd_ingest(root, whitespace, out_dir);
    if (stats->parsed()) return cmd_stats(root, whitespace, format, csv_out);
    if (sample->parsed()) return cmd_sample(sf);
    if (train->parsed()) return cmd_train(train_f, policy);
    if (transfer->parsed()) return cmd_transfer_sweep(transfer_f, true);
    if (ss->parsed()) return cmd_structshot(ssf);
    if (ev->parsed()) return cmd_eval(gold, pred, level, csv_out, json_out, whitespace);
    if (matrix->parsed()) return cmd_matrix(matrix_f);
    if (sweep_ft->parsed()) return cmd_sweep_ft(sweep_ft_f);
    if (sweep_tl->parsed()) return cmd_transfer_sweep(sweep_tl_f, false);
    if (probe->parsed()) return cmd_probe(pf);
    if (exp->parsed()) return cmd_export(model, input, emb_out, binary, whitespace);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return 5;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
