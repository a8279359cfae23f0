#pragma once

// Experiment configuration, run records and the small filesystem protocol
// (completion markers, atomic writes) shared by the harness and the CLI.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <sys/utsname.h>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"
#include "fewvuln/evaluation.hpp"
#include "fewvuln/random.hpp"
#include "fewvuln/sampling.hpp"
#include "fewvuln/structshot.hpp"
#include "fewvuln/tagger.hpp"

namespace fewvuln {

inline constexpr std::string_view kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

enum class Setting : std::uint8_t { FT, FT_SS, FT_TL, FT_TL_SS };

inline constexpr std::array<Setting, 4> kAllSettings{Setting::FT, Setting::FT_SS, Setting::FT_TL, Setting::FT_TL_SS};

inline std::string_view to_string(Setting s) noexcept {
  switch (s) {
    case Setting::FT: return "FT";
    case Setting::FT_SS: return "FT+SS";
    case Setting::FT_TL: return "FT+TL";
    case Setting::FT_TL_SS: return "FT+TL+SS";
  }
  return "?";
}

// Filesystem-safe form ("FT+TL" -> "ft-tl").
inline std::string slug(Setting s) {
  std::string out;
  for (char c : to_string(s)) out += c == '+' ? '-' : static_cast<char>(c - 'A' + 'a');
  return out;
}

inline std::optional<Setting> parse_setting(std::string_view name) noexcept {
  for (Setting s : kAllSettings)
    if (name == to_string(s) || name == slug(s)) return s;
  return std::nullopt;
}

inline bool uses_transfer(Setting s) noexcept { return s == Setting::FT_TL || s == Setting::FT_TL_SS; }
inline bool uses_structshot(Setting s) noexcept { return s == Setting::FT_SS || s == Setting::FT_TL_SS; }

enum class TransferMode { aggregate, individual };

inline std::string_view to_string(TransferMode m) noexcept {
  return m == TransferMode::aggregate ? "aggregate" : "individual";
}

inline std::optional<TransferMode> parse_transfer_mode(std::string_view s) noexcept {
  if (s == "aggregate") return TransferMode::aggregate;
  if (s == "individual") return TransferMode::individual;
  return std::nullopt;
}

// Where StructShot's transition statistics come from.
enum class TransitionSource { finetune_subset, support };

inline std::string_view to_string(TransitionSource t) noexcept {
  return t == TransitionSource::finetune_subset ? "finetune-subset" : "support";
}

inline std::optional<TransitionSource> parse_transition_source(std::string_view s) noexcept {
  if (s == "finetune-subset") return TransitionSource::finetune_subset;
  if (s == "support") return TransitionSource::support;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSON for reports and training pieces
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TagMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
          {"support", m.support},     {"tp", m.tp},         {"fp", m.fp},
          {"fn", m.fn},               {"precision_undefined", m.precision_undefined}};
}

inline TagMetrics tag_metrics_from_json(const nlohmann::json& j) {
  TagMetrics m;
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.support = j.at("support").get<std::size_t>();
  m.tp = j.at("tp").get<std::size_t>();
  m.fp = j.at("fp").get<std::size_t>();
  m.fn = j.at("fn").get<std::size_t>();
  m.precision_undefined = j.at("precision_undefined").get<bool>();
  return m;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"level", std::string(to_string(r.level))},
          {"SN", to_json(r.sn)},
          {"SV", to_json(r.sv)},
          {"total_tokens", r.total_tokens},
          {"averaged_over", r.averaged_over}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.level = j.at("level").get<std::string>() == "span" ? MetricLevel::span : MetricLevel::token;
  r.sn = tag_metrics_from_json(j.at("SN"));
  r.sv = tag_metrics_from_json(j.at("SV"));
  r.total_tokens = j.at("total_tokens").get<std::size_t>();
  r.averaged_over = j.at("averaged_over").get<std::size_t>();
  return r;
}

inline std::optional<MetricLevel> parse_metric_level(std::string_view s) noexcept {
  if (s == "token") return MetricLevel::token;
  if (s == "span") return MetricLevel::span;
  return std::nullopt;
}

inline SamplingSpec sampling_spec_from_json(const nlohmann::json& j) {
  const auto mode = j.at("mode").get<std::string>();
  const auto seed = j.value("seed", kDefaultSeed);
  if (mode == "proportion") return SamplingSpec::of_proportion(j.at("value").get<double>(), seed);
  if (mode == "count") return SamplingSpec::of_count(j.at("value").get<std::size_t>(), seed);
  throw ConfigError("sampling mode must be 'proportion' or 'count', got '" + mode + "'");
}

inline nlohmann::json to_json(const GridSpace& g) {
  return {{"learning_rates", g.learning_rates}, {"epochs", g.epochs}, {"batch_size", g.batch_size}};
}

inline GridSpace grid_space_from_json(const nlohmann::json& j) {
  GridSpace g;
  g.learning_rates = j.value("learning_rates", g.learning_rates);
  g.epochs = j.value("epochs", g.epochs);
  g.batch_size = j.value("batch_size", g.batch_size);
  return g;
}

// Fields absent from `j` keep the defaults of `base`.
inline TrainingConfig training_config_from_json(const nlohmann::json& j, TrainingConfig base = {}) {
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.epochs = j.value("epochs", base.epochs);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.seed = j.value("seed", base.seed);
  if (j.contains("precision")) {
    const auto p = j["precision"].get<std::string>();
    if (p != "full" && p != "half") throw ConfigError("precision must be 'full' or 'half'");
    base.precision = p == "half" ? Precision::half : Precision::full;
  }
  base.checkpoints_per_run = j.value("checkpoints_per_run", base.checkpoints_per_run);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  base.adam_beta1 = j.value("adam_beta1", base.adam_beta1);
  base.adam_beta2 = j.value("adam_beta2", base.adam_beta2);
  base.adam_epsilon = j.value("adam_epsilon", base.adam_epsilon);
  base.max_grad_norm = j.value("max_grad_norm", base.max_grad_norm);
  base.warmup_steps = j.value("warmup_steps", base.warmup_steps);
  if (j.contains("order_seed")) base.order_seed = j["order_seed"].get<std::uint64_t>();
  if (j.contains("max_steps")) base.max_steps = j["max_steps"].get<std::size_t>();
  return base;
}

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string encoder = "random";
  std::filesystem::path data_root;                  // <root>/<category>/<split>.txt
  std::vector<Setting> settings{kAllSettings.begin(), kAllSettings.end()};

  // fine-tuning stage
  Category finetune_category = Category::memc;
  SamplingSpec finetune_sampling = SamplingSpec::of_proportion(0.10);
  std::optional<std::filesystem::path> finetuned_model;  // skip FT and load this model instead

  // transfer stage
  std::size_t transfer_count = 64;  // sentences per category
  TransferMode transfer_mode = TransferMode::aggregate;
  std::uint64_t sampling_seed = kDefaultSeed;

  // structshot stage
  bool use_crf = true;
  TransitionSource transitions = TransitionSource::finetune_subset;
  double temperature = 1.0;

  GridSpace grid;
  TrainingConfig training;  // lr/epochs/batch are overridden by the grid
  std::size_t restarts = 10;
  std::uint64_t seed = kDefaultSeed;  // restart i uses seed + i
  MetricLevel level = MetricLevel::token;

  // sweeps and probe
  std::vector<double> proportions{0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10};
  std::vector<std::size_t> counts{32, 64, 128, 256};
  double probe_threshold = 0.20;

  std::filesystem::path output_dir = "runs";

  bool has(Setting s) const { return std::find(settings.begin(), settings.end(), s) != settings.end(); }
  bool needs_transfer() const { return has(Setting::FT_TL) || has(Setting::FT_TL_SS); }

  // Checks everything that can be checked without training. Throws ConfigError.
  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (encoder.empty()) fail("encoder name is empty");
    if (settings.empty()) fail("no settings selected");
    for (std::size_t i = 0; i < settings.size(); ++i)
      for (std::size_t j = i + 1; j < settings.size(); ++j)
        if (settings[i] == settings[j]) fail("setting " + std::string(to_string(settings[i])) + " listed twice");
    if (restarts == 0) fail("restarts must be at least 1");
    if (grid.size() == 0) fail("hyperparameter grid is empty");
    if (grid.batch_size == 0) fail("batch size must be positive");
    for (double lr : grid.learning_rates)
      if (!(lr >= 0.0) || !std::isfinite(lr)) fail("learning rates must be finite and non-negative");
    if (finetune_sampling.mode == SamplingMode::proportion &&
        !(finetune_sampling.proportion > 0.0 && finetune_sampling.proportion <= 1.0))
      fail("fine-tuning proportion must be in (0, 1]");
    if (finetune_sampling.mode == SamplingMode::count && finetune_sampling.count == 0)
      fail("fine-tuning count must be positive");
    if (needs_transfer() || has(Setting::FT_SS))
      if (transfer_count == 0) fail("transfer/support count must be positive");
    for (double p : proportions)
      if (!(p > 0.0 && p <= 1.0)) fail("sweep proportions must be in (0, 1]");
    for (auto c : counts)
      if (c == 0) fail("sweep counts must be positive");
    if (!(temperature > 0.0)) fail("temperature must be positive");
    if (!(probe_threshold >= 0.0)) fail("probe threshold must be non-negative");
    if (finetuned_model && !is_model_dir(*finetuned_model))
      fail("fine-tuned model dependency '" + finetuned_model->string() + "' is not a model directory");
    if (!finetuned_model && !parse_random_spec(encoder) && !locate_encoder(encoder))
      fail("cannot resolve encoder '" + encoder + "'");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json settings = nlohmann::json::array();
  for (Setting s : c.settings) settings.push_back(std::string(to_string(s)));
  nlohmann::json j{{"encoder", c.encoder},
                   {"data_root", c.data_root.string()},
                   {"settings", settings},
                   {"finetune_category", std::string(to_string(c.finetune_category))},
                   {"finetune_sampling", to_json(c.finetune_sampling)},
                   {"transfer_count", c.transfer_count},
                   {"transfer_mode", std::string(to_string(c.transfer_mode))},
                   {"sampling_seed", c.sampling_seed},
                   {"use_crf", c.use_crf},
                   {"transitions", std::string(to_string(c.transitions))},
                   {"temperature", c.temperature},
                   {"grid", to_json(c.grid)},
                   {"training", to_json(c.training)},
                   {"restarts", c.restarts},
                   {"seed", c.seed},
                   {"level", std::string(to_string(c.level))},
                   {"proportions", c.proportions},
                   {"counts", c.counts},
                   {"probe_threshold", c.probe_threshold},
                   {"output_dir", c.output_dir.string()}};
  if (c.finetuned_model) j["finetuned_model"] = c.finetuned_model->string();
  return j;
}

// Missing fields keep their defaults; unknown fields are an error so typos
// do not silently run the default experiment.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  static const std::array<std::string_view, 21> known{
      "encoder",     "data_root",      "settings",    "finetune_category", "finetune_sampling", "finetuned_model",
      "transfer_count", "transfer_mode", "sampling_seed", "use_crf",       "transitions",       "temperature",
      "grid",        "training",       "restarts",    "seed",              "level",             "proportions",
      "counts",      "probe_threshold", "output_dir"};
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config field '" + key + "'");

  ExperimentConfig c;
  try {
    c.encoder = j.value("encoder", c.encoder);
    if (j.contains("data_root")) c.data_root = j["data_root"].get<std::string>();
    if (j.contains("settings")) {
      c.settings.clear();
      for (const auto& s : j["settings"]) {
        auto st = parse_setting(s.get<std::string>());
        if (!st) throw ConfigError("unknown setting '" + s.get<std::string>() + "'");
        c.settings.push_back(*st);
      }
    }
    if (j.contains("finetune_category")) {
      auto cat = parse_category(j["finetune_category"].get<std::string>());
      if (!cat) throw ConfigError("unknown category '" + j["finetune_category"].get<std::string>() + "'");
      c.finetune_category = *cat;
    }
    if (j.contains("finetune_sampling")) c.finetune_sampling = sampling_spec_from_json(j["finetune_sampling"]);
    if (j.contains("finetuned_model")) c.finetuned_model = j["finetuned_model"].get<std::string>();
    c.transfer_count = j.value("transfer_count", c.transfer_count);
    if (j.contains("transfer_mode")) {
      auto m = parse_transfer_mode(j["transfer_mode"].get<std::string>());
      if (!m) throw ConfigError("transfer_mode must be 'aggregate' or 'individual'");
      c.transfer_mode = *m;
    }
    c.sampling_seed = j.value("sampling_seed", c.sampling_seed);
    c.use_crf = j.value("use_crf", c.use_crf);
    if (j.contains("transitions")) {
      auto t = parse_transition_source(j["transitions"].get<std::string>());
      if (!t) throw ConfigError("transitions must be 'finetune-subset' or 'support'");
      c.transitions = *t;
    }
    c.temperature = j.value("temperature", c.temperature);
    if (j.contains("grid")) c.grid = grid_space_from_json(j["grid"]);
    if (j.contains("training")) c.training = training_config_from_json(j["training"]);
    c.restarts = j.value("restarts", c.restarts);
    c.seed = j.value("seed", c.seed);
    if (j.contains("level")) {
      auto l = parse_metric_level(j["level"].get<std::string>());
      if (!l) throw ConfigError("level must be 'token' or 'span'");
      c.level = *l;
    }
    c.proportions = j.value("proportions", c.proportions);
    c.counts = j.value("counts", c.counts);
    c.probe_threshold = j.value("probe_threshold", c.probe_threshold);
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Environment fingerprint. Deliberately excludes the hostname and anything
// time-dependent so records stay byte-stable on one machine.
// ---------------------------------------------------------------------------

inline nlohmann::json environment_fingerprint() {
  nlohmann::json j;
  j["tool_version"] = std::string(kToolVersion);
  j["generator"] = std::string(kGeneratorId);
#if defined(__clang__)
  j["compiler"] = "clang " __clang_version__;
#elif defined(__GNUC__)
  j["compiler"] = "gcc " __VERSION__;
#else
  j["compiler"] = "unknown";
#endif
  j["cplusplus"] = static_cast<long>(__cplusplus);
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  j["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  utsname u{};
  if (uname(&u) == 0) {
    j["os"] = std::string(u.sysname) + " " + u.release;
    j["machine"] = u.machine;
  }
  j["hardware_threads"] = std::thread::hardware_concurrency();
  j["float_bits"] = 32;
  return j;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDoneMarker = "DONE";

inline bool is_done(const std::filesystem::path& cell) { return std::filesystem::exists(cell / kDoneMarker); }

inline void mark_done(const std::filesystem::path& cell) { write_text_file(cell / kDoneMarker, "done\n"); }

inline void clear_done(const std::filesystem::path& cell) {
  std::error_code ec;
  std::filesystem::remove(cell / kDoneMarker, ec);
}

// Writes through a temporary file so an interrupted run never leaves a
// half-written result next to a completion marker.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  auto tmp = path;
  tmp += ".tmp";
  write_text_file(tmp, text);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// RunRecord
// ---------------------------------------------------------------------------

// Sample standard deviation (n - 1); zero for a single restart.
inline double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

struct RunRecord {
  std::string name;  // setting, proportion or count label
  nlohmann::json config;
  std::vector<EvalReport> restarts;
  // per-category reports, one per restart, when the record spans categories
  std::map<std::string, std::vector<EvalReport>> per_category;
  EvalReport mean;
  std::array<double, 6> std{};  // same order as kComparisonColumns
  std::map<std::size_t, std::string> failures;  // restart index -> error; those restarts have no report
  nlohmann::json environment;

  bool ok() const { return !restarts.empty(); }
  std::size_t attempted() const { return restarts.size() + failures.size(); }

  // Recomputes mean/std from the per-restart reports.
  void summarize() {
    if (restarts.empty()) {
      mean = EvalReport{};
      std.fill(0.0);
      return;
    }
    mean = average_reports(restarts);
    for (std::size_t k = 0; k < 6; ++k) {
      std::vector<double> xs;
      for (const auto& r : restarts) xs.push_back(comparison_values(r)[k]);
      std[k] = sample_std(xs);
    }
  }
};

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json restarts = nlohmann::json::array();
  for (const auto& e : r.restarts) restarts.push_back(to_json(e));
  nlohmann::json per_cat = nlohmann::json::object();
  for (const auto& [cat, list] : r.per_category) {
    auto& arr = per_cat[cat] = nlohmann::json::array();
    for (const auto& e : list) arr.push_back(to_json(e));
  }
  nlohmann::json stdj = nlohmann::json::object();
  for (std::size_t k = 0; k < 6; ++k) stdj[std::string(kComparisonColumns[k])] = r.std[k];
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& [i, e] : r.failures) failures.push_back({{"restart", i}, {"error", e}});
  return {{"name", r.name},          {"config", r.config}, {"restarts", restarts},  {"per_category", per_cat},
          {"mean", to_json(r.mean)}, {"std", stdj},        {"failures", failures}, {"environment", r.environment}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.name = j.at("name").get<std::string>();
  r.config = j.at("config");
  for (const auto& e : j.at("restarts")) r.restarts.push_back(eval_report_from_json(e));
  for (const auto& [cat, arr] : j.at("per_category").items())
    for (const auto& e : arr) r.per_category[cat].push_back(eval_report_from_json(e));
  r.mean = eval_report_from_json(j.at("mean"));
  for (std::size_t k = 0; k < 6; ++k) r.std[k] = j.at("std").at(std::string(kComparisonColumns[k])).get<double>();
  for (const auto& f : j.at("failures")) r.failures[f.at("restart").get<std::size_t>()] = f.at("error").get<std::string>();
  r.environment = j.at("environment");
  return r;
}

inline void save_run_record(const std::filesystem::path& path, const RunRecord& r) { write_json(path, to_json(r)); }

inline RunRecord load_run_record(const std::filesystem::path& path) {
  try {
    return run_record_from_json(read_json(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed run record: " + e.what());
  }
}

// Mean rows for a comparison table; failed records are skipped.
inline std::vector<NamedReport> mean_rows(const std::vector<RunRecord>& records) {
  std::vector<NamedReport> rows;
  for (const auto& r : records)
    if (r.ok()) rows.emplace_back(r.name, r.mean);
  return rows;
}

// One line per attempted restart in restart order (failed ones carry their
// error), then a "mean" and a "std" line per record.
inline std::string render_records_csv(const std::vector<RunRecord>& records, std::string_view key,
                                      MetricLevel level = MetricLevel::token) {
  std::ostringstream os;
  os << "# level=" << to_string(level) << '\n';
  os << key << ",restart";
  for (auto c : kComparisonColumns) os << ',' << c;
  os << ",weighted f1,error\n" << std::fixed << std::setprecision(6);
  auto wf1 = [](const EvalReport& r) {
    const auto n = r.sn.support + r.sv.support;
    return n ? (static_cast<double>(r.sn.support) * r.sn.f1 + static_cast<double>(r.sv.support) * r.sv.f1) /
                   static_cast<double>(n)
             : 0.0;
  };
  auto csv_safe = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  for (const auto& r : records) {
    std::size_t next = 0;
    for (std::size_t i = 0; i < r.attempted(); ++i) {
      if (auto f = r.failures.find(i); f != r.failures.end()) {
        os << r.name << ',' << i << ",,,,,,,," << csv_safe(f->second) << '\n';
        continue;
      }
      const auto& rep = r.restarts[next++];
      os << r.name << ',' << i;
      for (double v : comparison_values(rep)) os << ',' << v;
      os << ',' << wf1(rep) << ",\n";
    }
    os << r.name << ",mean";
    if (r.ok()) {
      for (double v : comparison_values(r.mean)) os << ',' << v;
      os << ',' << wf1(r.mean) << ",\n";
    } else {
      os << ",,,,,,,no restart finished\n";
    }
    os << r.name << ",std";
    if (r.ok()) {
      for (double v : r.std) os << ',' << v;
      os << ",,\n";
    } else {
      os << ",,,,,,,no restart finished\n";
    }
  }
  return os.str();
}

}  // namespace fewvuln
