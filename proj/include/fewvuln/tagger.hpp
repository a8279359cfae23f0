#pragma once

// Token-classification tagger: a contextual encoder plus a per-token head over
// {SN, SV, O}. Fine-tuning with evenly spaced checkpoints and weighted-F1
// selection, grid search, transfer from a checkpoint, prediction and
// first-piece token embeddings.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "fewvuln/corpus.hpp"
#include "fewvuln/encoder.hpp"
#include "fewvuln/errors.hpp"
#include "fewvuln/evaluation.hpp"
#include "fewvuln/random.hpp"
#include "fewvuln/structshot.hpp"
#include "fewvuln/tokenizer.hpp"

namespace fewvuln {

struct TaggerModel {
  EncoderConfig config;
  WordPieceTokenizer tokenizer;
  TaggerWeights weights;
  std::string encoder_name;
};

// ---------------------------------------------------------------------------
// Persistence: <dir>/config.json, <dir>/vocab.txt, <dir>/weights.bin
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"hidden_size", c.hidden},
          {"num_hidden_layers", c.layers},
          {"num_attention_heads", c.heads},
          {"intermediate_size", c.intermediate},
          {"max_position_embeddings", c.max_positions},
          {"type_vocab_size", c.type_vocab_size},
          {"num_labels", c.num_labels},
          {"layer_norm_eps", c.layer_norm_eps},
          {"hidden_dropout_prob", c.hidden_dropout},
          {"attention_probs_dropout_prob", c.attention_dropout},
          {"initializer_range", c.initializer_range}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden_size").get<std::size_t>();
  c.layers = j.at("num_hidden_layers").get<std::size_t>();
  c.heads = j.at("num_attention_heads").get<std::size_t>();
  c.intermediate = j.at("intermediate_size").get<std::size_t>();
  c.max_positions = j.at("max_position_embeddings").get<std::size_t>();
  c.type_vocab_size = j.value("type_vocab_size", std::size_t{2});
  c.num_labels = j.value("num_labels", std::size_t{3});
  c.layer_norm_eps = j.value("layer_norm_eps", 1e-12);
  c.hidden_dropout = j.value("hidden_dropout_prob", 0.1);
  c.attention_dropout = j.value("attention_probs_dropout_prob", 0.1);
  c.initializer_range = j.value("initializer_range", 0.02);
  return c;
}

inline void save_model(const TaggerModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = to_json(m.config);
  j["encoder_name"] = m.encoder_name;
  j["has_classifier"] = true;
  j["split_punctuation"] = m.tokenizer.options().split_punctuation;
  j["labels"] = {"SN", "SV", "O"};
  write_text_file(dir / "config.json", j.dump(2) + "\n");
  m.tokenizer.save(dir / "vocab.txt");
  save_weights(dir / "weights.bin", m.weights);
}

inline bool is_model_dir(const std::filesystem::path& dir) {
  return std::filesystem::is_regular_file(dir / "config.json") && std::filesystem::is_regular_file(dir / "vocab.txt") &&
         std::filesystem::is_regular_file(dir / "weights.bin");
}

// Loads a saved tagger or a converted pretrained encoder. An encoder without
// a classifier gets a freshly initialised head drawn from `head_seed`.
inline TaggerModel load_model(const std::filesystem::path& dir, std::uint64_t head_seed = kDefaultSeed) {
  if (!is_model_dir(dir)) throw IoError(dir.string() + " is not a model directory (config.json, vocab.txt, weights.bin)");
  auto j = nlohmann::json::parse(read_text_file(dir / "config.json"));
  TaggerModel m;
  m.config = encoder_config_from_json(j);
  m.config.num_labels = kNumTags;
  m.config.check();
  TokenizerOptions topts;
  topts.split_punctuation = j.value("split_punctuation", true);
  m.tokenizer = WordPieceTokenizer::load(dir / "vocab.txt", topts);
  if (m.tokenizer.vocab_size() != m.config.vocab_size)
    throw IoError("vocab.txt has " + std::to_string(m.tokenizer.vocab_size()) + " pieces, config says " +
                  std::to_string(m.config.vocab_size));
  m.encoder_name = j.value("encoder_name", dir.filename().string());
  m.weights = zero_weights(m.config);
  auto missing = assign_weights(m.weights, read_weight_tensors(dir / "weights.bin"));
  const bool head_missing = std::any_of(missing.begin(), missing.end(),
                                        [](const std::string& n) { return n.starts_with("classifier."); });
  std::erase_if(missing, [](const std::string& n) { return n.starts_with("classifier."); });
  if (!missing.empty()) throw IoError("weight file lacks tensor " + missing.front());
  if (head_missing) {
    Rng rng(head_seed);
    init_head(m.weights, m.config, rng);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Encoder handles
//
//   "random"                         small randomly initialised encoder
//   "random:hidden=64,layers=2,..."  same, with overrides (hidden, layers, heads,
//                                    intermediate, max_len, vocab, dropout)
//   <directory>                      saved tagger or converted encoder
//   <name>                           looked up as $FEWVULN_MODEL_HOME/<name>
// ---------------------------------------------------------------------------

struct EncoderHandle {
  std::string model_name = "random";
};

struct RandomEncoderSpec {
  EncoderConfig config;
  std::size_t max_vocab = 8000;
  std::size_t min_word_freq = 1;
};

inline std::optional<RandomEncoderSpec> parse_random_spec(std::string_view name) {
  if (name != "random" && !name.starts_with("random:")) return std::nullopt;
  RandomEncoderSpec spec;
  spec.config.hidden = 32;
  spec.config.layers = 2;
  spec.config.heads = 2;
  spec.config.intermediate = 64;
  spec.config.max_positions = 128;
  spec.config.hidden_dropout = 0.0;
  spec.config.attention_dropout = 0.0;
  if (name == "random") return spec;
  std::string rest(name.substr(7));
  std::stringstream ss(rest);
  std::string kv;
  while (std::getline(ss, kv, ',')) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed encoder option '" + kv + "'");
    auto key = kv.substr(0, eq);
    auto val = kv.substr(eq + 1);
    try {
      if (key == "hidden") spec.config.hidden = std::stoul(val);
      else if (key == "layers") spec.config.layers = std::stoul(val);
      else if (key == "heads") spec.config.heads = std::stoul(val);
      else if (key == "intermediate") spec.config.intermediate = std::stoul(val);
      else if (key == "max_len") spec.config.max_positions = std::stoul(val);
      else if (key == "vocab") spec.max_vocab = std::stoul(val);
      else if (key == "min_freq") spec.min_word_freq = std::stoul(val);
      else if (key == "dropout") spec.config.hidden_dropout = spec.config.attention_dropout = std::stod(val);
      else throw ConfigError("unknown encoder option '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("bad value for encoder option '" + key + "'");
    }
  }
  return spec;
}

inline std::optional<std::filesystem::path> locate_encoder(const std::string& name) {
  if (is_model_dir(name)) return std::filesystem::path(name);
  if (const char* home = std::getenv("FEWVULN_MODEL_HOME")) {
    auto p = std::filesystem::path(home) / name;
    if (is_model_dir(p)) return p;
  }
  return std::nullopt;
}

// Produces an untrained-head tagger for the handle. Random encoders build
// their vocabulary from `vocab_corpus` and draw weights from `seed`.
inline TaggerModel resolve_encoder(const EncoderHandle& handle, const std::vector<TaggedSentence>& vocab_corpus,
                                   std::uint64_t seed) {
  if (auto spec = parse_random_spec(handle.model_name)) {
    if (vocab_corpus.empty()) throw ConfigError("a random encoder needs a corpus to build its vocabulary");
    TaggerModel m;
    m.tokenizer = WordPieceTokenizer::build(vocab_corpus, spec->max_vocab, spec->min_word_freq);
    m.config = spec->config;
    m.config.vocab_size = m.tokenizer.vocab_size();
    m.config.num_labels = kNumTags;
    Rng rng(seed);
    m.weights = random_weights(m.config, rng);
    m.encoder_name = handle.model_name;
    return m;
  }
  if (auto dir = locate_encoder(handle.model_name)) {
    auto m = load_model(*dir, seed);
    m.encoder_name = handle.model_name;
    return m;
  }
  throw ConfigError("cannot resolve encoder '" + handle.model_name +
                    "': not 'random[:...]', not a model directory, and not found under $FEWVULN_MODEL_HOME");
}

// ---------------------------------------------------------------------------
// Windowing: sentences whose pieces exceed the encoder budget are split at
// token boundaries into overlapping windows (stride half the budget); each
// token is read from the window where it sits closest to the centre.
// ---------------------------------------------------------------------------

struct Window {
  std::size_t first_token = 0;
  std::size_t end_token = 0;  // exclusive
  std::vector<PieceId> ids;   // with open/close specials
  std::vector<std::size_t> first_piece;  // per token in window, index into ids
};

struct WindowPlan {
  std::vector<Window> windows;
  std::vector<std::size_t> owner;  // per token: index of the window it is read from
};

inline WindowPlan plan_windows(const TaggerModel& m, const std::vector<std::string>& tokens) {
  const std::size_t budget = m.config.max_positions - 2;
  std::vector<std::vector<PieceId>> pieces;
  pieces.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto p = m.tokenizer.tokenize_token(t);
    if (p.size() > budget) p.resize(budget);  // only the first piece is ever read
    pieces.push_back(std::move(p));
  }
  std::vector<std::size_t> offset(tokens.size() + 1, 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) offset[i + 1] = offset[i] + pieces[i].size();

  WindowPlan plan;
  const std::size_t stride = std::max<std::size_t>(1, budget / 2);
  std::size_t start = 0;
  while (start < tokens.size()) {
    Window w;
    w.first_token = start;
    std::size_t end = start;
    while (end < tokens.size() && offset[end + 1] - offset[start] <= budget) ++end;
    w.end_token = end;
    w.ids.push_back(m.tokenizer.cls_id());
    for (std::size_t i = start; i < end; ++i) {
      w.first_piece.push_back(w.ids.size());
      w.ids.insert(w.ids.end(), pieces[i].begin(), pieces[i].end());
    }
    w.ids.push_back(m.tokenizer.sep_id());
    plan.windows.push_back(std::move(w));
    if (end >= tokens.size()) break;
    std::size_t next = start + 1;
    while (next < end && offset[next] - offset[start] < stride) ++next;
    start = next;
  }

  plan.owner.assign(tokens.size(), 0);
  std::vector<double> best(tokens.size(), std::numeric_limits<double>::infinity());
  for (std::size_t wi = 0; wi < plan.windows.size(); ++wi) {
    const auto& w = plan.windows[wi];
    const double centre = 0.5 * static_cast<double>(w.ids.size() - 1);
    for (std::size_t i = w.first_token; i < w.end_token; ++i) {
      const double dist = std::abs(static_cast<double>(w.first_piece[i - w.first_token]) - centre);
      if (dist < best[i]) {
        best[i] = dist;
        plan.owner[i] = wi;
      }
    }
  }
  return plan;
}

struct TokenOutputs {
  Matrix hidden;  // tokens x hidden
  Matrix logits;  // tokens x 3
};

inline TokenOutputs run_tokens(const TaggerModel& m, const std::vector<std::string>& tokens) {
  TokenOutputs out;
  out.hidden.resize(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(m.config.hidden));
  out.logits.resize(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(m.config.num_labels));
  if (tokens.empty()) return out;
  auto plan = plan_windows(m, tokens);
  for (std::size_t wi = 0; wi < plan.windows.size(); ++wi) {
    const auto& w = plan.windows[wi];
    auto fc = forward(m.weights, m.config, w.ids);
    for (std::size_t i = w.first_token; i < w.end_token; ++i) {
      if (plan.owner[i] != wi) continue;
      const auto row = static_cast<Eigen::Index>(w.first_piece[i - w.first_token]);
      out.hidden.row(static_cast<Eigen::Index>(i)) = fc.hidden.row(row);
      out.logits.row(static_cast<Eigen::Index>(i)) = fc.logits.row(row);
    }
  }
  return out;
}

inline std::vector<Tag> predict_sentence(const TaggerModel& m, const std::vector<std::string>& tokens) {
  auto out = run_tokens(m, tokens);
  std::vector<Tag> tags;
  tags.reserve(tokens.size());
  for (Eigen::Index i = 0; i < out.logits.rows(); ++i) {
    Eigen::Index best = 0;
    out.logits.row(i).maxCoeff(&best);
    tags.push_back(tag_from_index(static_cast<std::size_t>(best)));
  }
  return tags;
}

inline std::vector<std::vector<Tag>> predict(const TaggerModel& m, const std::vector<TaggedSentence>& sentences) {
  std::vector<std::vector<Tag>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(predict_sentence(m, s.tokens));
  return out;
}

// Final-layer representation at each token's first piece.
inline std::vector<SentenceEmbeddings> extract_token_embeddings(const TaggerModel& m,
                                                                const std::vector<TaggedSentence>& sentences) {
  std::vector<SentenceEmbeddings> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) {
    auto r = run_tokens(m, s.tokens);
    SentenceEmbeddings e;
    e.reserve(s.tokens.size());
    for (Eigen::Index i = 0; i < r.hidden.rows(); ++i) e.push_back(r.hidden.row(i).transpose());
    out.push_back(std::move(e));
  }
  return out;
}

inline EvalReport evaluate_model(const TaggerModel& m, const std::vector<TaggedSentence>& sentences,
                                 MetricLevel level = MetricLevel::token) {
  return evaluate(tag_sequences(sentences), predict(m, sentences), level);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Precision { full, half };

struct TrainingConfig {
  double learning_rate = 1e-5;
  std::size_t epochs = 3;
  std::size_t batch_size = 2;
  std::uint64_t seed = kDefaultSeed;
  std::optional<std::uint64_t> order_seed;  // data order; defaults to `seed`
  Precision precision = Precision::full;
  std::size_t checkpoints_per_run = 5;
  std::optional<std::size_t> max_steps;     // caps total optimisation steps
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double max_grad_norm = 1.0;
  std::size_t warmup_steps = 0;
  bool keep_all_snapshots = true;
};

inline nlohmann::json to_json(const TrainingConfig& c) {
  nlohmann::json j{{"learning_rate", c.learning_rate},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"seed", c.seed},
                   {"precision", c.precision == Precision::full ? "full" : "half"},
                   {"checkpoints_per_run", c.checkpoints_per_run},
                   {"weight_decay", c.weight_decay},
                   {"adam_beta1", c.adam_beta1},
                   {"adam_beta2", c.adam_beta2},
                   {"adam_epsilon", c.adam_epsilon},
                   {"max_grad_norm", c.max_grad_norm},
                   {"warmup_steps", c.warmup_steps},
                   {"optimizer", "adamw"},
                   {"schedule", "linear"}};
  if (c.order_seed) j["order_seed"] = *c.order_seed;
  if (c.max_steps) j["max_steps"] = *c.max_steps;
  return j;
}

struct Checkpoint {
  std::shared_ptr<const TaggerModel> model;  // null when the snapshot was not retained
  std::size_t step = 0;
  EvalReport validation;
  double weighted_f1 = 0.0;
  double train_loss = 0.0;  // mean loss over the steps since the previous checkpoint
};

struct FineTuneResult {
  Checkpoint best;
  std::vector<Checkpoint> all;
  std::size_t total_steps = 0;
  TrainingConfig config;
};

using CheckpointCallback = std::function<void(const Checkpoint&)>;

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Evenly spaced checkpoint steps, the last one at `total`.
inline std::vector<std::size_t> checkpoint_steps(std::size_t total, std::size_t count) {
  if (count == 0) throw DomainError("checkpoints_per_run must be positive");
  if (total < count)
    throw DomainError("run has " + std::to_string(total) + " optimisation steps, fewer than the " +
                      std::to_string(count) + " checkpoints requested");
  std::vector<std::size_t> steps;
  for (std::size_t i = 1; i <= count; ++i) steps.push_back((i * total + count - 1) / count);
  return steps;
}

inline std::size_t best_checkpoint_index(const std::vector<Checkpoint>& all) {
  if (all.empty()) throw DomainError("no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].weighted_f1 > all[best].weighted_f1 ||
        (all[i].weighted_f1 == all[best].weighted_f1 && all[i].step < all[best].step))
      best = i;
  return best;
}

namespace detail {

struct Example {
  std::vector<PieceId> ids;
  std::vector<std::optional<Tag>> labels;
};

// Training examples are windows too, so long sentences are never truncated.
inline std::vector<Example> make_examples(const TaggerModel& m, const std::vector<TaggedSentence>& sentences) {
  std::vector<Example> out;
  for (const auto& s : sentences) {
    validate(s);
    auto plan = plan_windows(m, s.tokens);
    for (const auto& w : plan.windows) {
      Example ex;
      ex.ids = w.ids;
      ex.labels.assign(w.ids.size(), std::nullopt);
      for (std::size_t i = w.first_token; i < w.end_token; ++i) ex.labels[w.first_piece[i - w.first_token]] = s.tags[i];
      out.push_back(std::move(ex));
    }
  }
  return out;
}

inline TaggerWeights to_half(const TaggerWeights& w) {
  TaggerWeights h = w;
  zip_tensors(
      [](const std::string&, auto& t) {
        t = t.unaryExpr([](float v) { return static_cast<float>(Eigen::half(v)); });
      },
      h);
  return h;
}

}  // namespace detail

// Cross-entropy over labelled pieces of one example; adds gradients to `grad`
// scaled by 1/`denominator`. Returns the summed (unscaled) loss.
inline double example_loss_and_grad(const TaggerWeights& w, const EncoderConfig& cfg, const detail::Example& ex,
                                    double denominator, Rng* dropout_rng, TaggerWeights* grad) {
  auto fc = forward(w, cfg, ex.ids, dropout_rng, grad != nullptr);
  Matrix dlogits = Matrix::Zero(fc.logits.rows(), fc.logits.cols());
  double loss = 0.0;
  for (Eigen::Index t = 0; t < fc.logits.rows(); ++t) {
    const auto& label = ex.labels[static_cast<std::size_t>(t)];
    if (!label) continue;
    RowVec row = fc.logits.row(t);
    const float mx = row.maxCoeff();
    RowVec p = (row.array() - mx).exp();
    const float z = p.sum();
    p /= z;
    const auto y = static_cast<Eigen::Index>(tag_index(*label));
    loss += -(static_cast<double>(row[y] - mx) - std::log(static_cast<double>(z)));
    p[y] -= 1.0f;
    dlogits.row(t) = p / static_cast<float>(denominator);
  }
  if (grad) backward(w, cfg, fc, dlogits, *grad);
  return loss;
}

// Trains `model` in place from its current weights. This is the shared core
// of fine_tune and transfer.
inline FineTuneResult train_tagger(TaggerModel model, const std::vector<TaggedSentence>& train,
                                   const std::vector<TaggedSentence>& valid, const TrainingConfig& cfg,
                                   const CheckpointCallback& on_checkpoint = {}) {
  if (train.empty()) throw DomainError("empty training set");
  if (valid.empty()) throw DomainError("empty validation set");
  if (cfg.batch_size == 0) throw DomainError("batch size must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw DomainError("learning rate must be non-negative");
  {
    std::size_t ents = 0;
    for (const auto& s : valid)
      for (Tag t : s.tags) ents += is_entity(t);
    if (ents == 0) throw DomainError("validation set has no SN or SV tokens; weighted F1 is undefined");
  }

  auto examples = detail::make_examples(model, train);
  const std::size_t per_epoch = steps_per_epoch(examples.size(), cfg.batch_size);
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, *cfg.max_steps);

  FineTuneResult result;
  result.config = cfg;
  result.total_steps = total;

  auto snapshot = [&](std::size_t step, double loss) {
    Checkpoint cp;
    cp.step = step;
    cp.train_loss = loss;
    cp.validation = evaluate_model(model, valid);
    cp.weighted_f1 = weighted_f1(cp.validation);
    cp.model = std::make_shared<const TaggerModel>(model);
    return cp;
  };

  if (total == 0) {
    result.all.push_back(snapshot(0, 0.0));
    if (on_checkpoint) on_checkpoint(result.all.back());
    result.best = result.all.back();
    return result;
  }

  const auto cp_steps = checkpoint_steps(total, cfg.checkpoints_per_run);
  Rng order_rng(cfg.order_seed.value_or(cfg.seed));
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

  TaggerWeights grad = zero_weights(model.config);
  TaggerWeights m1 = grad, m2 = grad;
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0, next_cp = 0;
  double interval_loss = 0.0;
  std::size_t interval_steps = 0;
  std::size_t best_idx = 0;
  const bool use_dropout = model.config.hidden_dropout > 0.0 || model.config.attention_dropout > 0.0;

  for (std::size_t epoch = 0; step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order);
    for (std::size_t b = 0; b < order.size() && step < total; b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::size_t labelled = 0;
      for (std::size_t i = b; i < e; ++i)
        for (const auto& l : examples[order[i]].labels) labelled += l.has_value();

      zip_tensors([](const std::string&, auto& g) { g.setZero(); }, grad);
      double loss = 0.0;
      if (labelled > 0) {
        const TaggerWeights* fw = &model.weights;
        TaggerWeights half;
        if (cfg.precision == Precision::half) {
          half = detail::to_half(model.weights);
          fw = &half;
        }
        for (std::size_t i = b; i < e; ++i)
          loss += example_loss_and_grad(*fw, model.config, examples[order[i]], static_cast<double>(labelled),
                                        use_dropout ? &dropout_rng : nullptr, &grad);
        loss /= static_cast<double>(labelled);
      }
      ++step;
      if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", step);

      double sq = 0.0;
      zip_tensors([&](const std::string&, const auto& g) { sq += static_cast<double>(g.squaredNorm()); }, grad);
      if (!std::isfinite(sq)) throw TrainingError("non-finite gradient", step);
      const double norm = std::sqrt(sq);
      const float clip = cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm
                             ? static_cast<float>(cfg.max_grad_norm / (norm + 1e-6))
                             : 1.0f;

      double lr_scale;
      if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        lr_scale = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
      else
        lr_scale = std::max(0.0, static_cast<double>(total - step + 1) /
                                     static_cast<double>(std::max<std::size_t>(1, total - cfg.warmup_steps)));
      const float lr = static_cast<float>(cfg.learning_rate * lr_scale);
      const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
      const float bc1 = static_cast<float>(1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step)));
      const float bc2 = static_cast<float>(1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step)));
      const float eps = static_cast<float>(cfg.adam_epsilon);
      const float wd = static_cast<float>(cfg.weight_decay);
      zip_tensors(
          [&](const std::string& name, auto& p, auto& g, auto& mo, auto& ve) {
            g *= clip;
            mo = b1 * mo + (1.0f - b1) * g;
            ve = b2 * ve + (1.0f - b2) * g.cwiseAbs2();
            p.array() -= lr * (mo.array() / bc1) / ((ve.array() / bc2).sqrt() + eps);
            const bool decays = wd > 0.0f && name.find("LayerNorm") == std::string::npos && !name.ends_with(".bias");
            if (decays) p *= (1.0f - lr * wd);
          },
          model.weights, grad, m1, m2);

      interval_loss += loss;
      ++interval_steps;
      if (next_cp < cp_steps.size() && step == cp_steps[next_cp]) {
        auto cp = snapshot(step, interval_loss / static_cast<double>(interval_steps));
        interval_loss = 0.0;
        interval_steps = 0;
        if (on_checkpoint) on_checkpoint(cp);
        result.all.push_back(std::move(cp));
        const std::size_t idx = result.all.size() - 1;
        if (result.all[idx].weighted_f1 > result.all[best_idx].weighted_f1) best_idx = idx;
        if (!cfg.keep_all_snapshots)
          for (std::size_t i = 0; i < idx; ++i)
            if (i != best_idx) result.all[i].model.reset();
        if (!cfg.keep_all_snapshots && idx != best_idx) result.all[idx].model.reset();
        ++next_cp;
      }
    }
  }
  result.best = result.all[best_checkpoint_index(result.all)];
  return result;
}

inline FineTuneResult fine_tune(const EncoderHandle& encoder, const std::vector<TaggedSentence>& train,
                                const std::vector<TaggedSentence>& valid, const TrainingConfig& cfg,
                                const CheckpointCallback& on_checkpoint = {}) {
  if (train.empty()) throw DomainError("empty training set");
  if (valid.empty()) throw DomainError("empty validation set");
  return train_tagger(resolve_encoder(encoder, train, cfg.seed), train, valid, cfg, on_checkpoint);
}

// Continues training from a checkpoint (encoder and head weights carried over).
inline FineTuneResult transfer(const Checkpoint& from, const std::vector<TaggedSentence>& train,
                               const std::vector<TaggedSentence>& valid, const TrainingConfig& cfg,
                               const CheckpointCallback& on_checkpoint = {}) {
  if (!from.model) throw ConfigError("source checkpoint has no retained model snapshot");
  return train_tagger(*from.model, train, valid, cfg, on_checkpoint);
}

inline FineTuneResult transfer(const TaggerModel& from, const std::vector<TaggedSentence>& train,
                               const std::vector<TaggedSentence>& valid, const TrainingConfig& cfg,
                               const CheckpointCallback& on_checkpoint = {}) {
  return train_tagger(from, train, valid, cfg, on_checkpoint);
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridSpace {
  std::vector<double> learning_rates{1e-6, 5e-6, 1e-5};
  std::vector<std::size_t> epochs{3, 5};
  std::size_t batch_size = 2;

  std::size_t size() const { return learning_rates.size() * epochs.size(); }
};

struct GridCell {
  TrainingConfig config;
  std::optional<FineTuneResult> result;
  std::string error;  // non-empty when the cell failed
};

struct GridSearchResult {
  TrainingConfig best_config;
  Checkpoint best;
  std::vector<GridCell> cells;  // in evaluation order (learning rate asc, then epochs asc)
};

// Exhaustive search. `trainer` maps a TrainingConfig to a FineTuneResult; a
// throwing cell is recorded and skipped. Ties keep the lower learning rate,
// then the fewer epochs.
template <typename Trainer>
GridSearchResult grid_search(const GridSpace& space, const TrainingConfig& base, Trainer&& trainer) {
  if (space.size() == 0) throw DomainError("empty hyperparameter grid");
  auto lrs = space.learning_rates;
  auto eps = space.epochs;
  std::sort(lrs.begin(), lrs.end());
  std::sort(eps.begin(), eps.end());
  GridSearchResult out;
  std::optional<std::size_t> best;
  for (double lr : lrs)
    for (std::size_t ep : eps) {
      GridCell cell;
      cell.config = base;
      cell.config.learning_rate = lr;
      cell.config.epochs = ep;
      cell.config.batch_size = space.batch_size;
      try {
        cell.result = trainer(cell.config);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      out.cells.push_back(std::move(cell));
      const auto& c = out.cells.back();
      if (c.result && (!best || c.result->best.weighted_f1 > out.cells[*best].result->best.weighted_f1))
        best = out.cells.size() - 1;
    }
  if (!best) throw TrainingError("every grid cell failed; first error: " + out.cells.front().error, 0);
  out.best_config = out.cells[*best].config;
  out.best = out.cells[*best].result->best;
  return out;
}

inline GridSearchResult grid_search(const EncoderHandle& encoder, const std::vector<TaggedSentence>& train,
                                    const std::vector<TaggedSentence>& valid, const GridSpace& space,
                                    const TrainingConfig& base = {}) {
  return grid_search(space, base, [&](const TrainingConfig& c) { return fine_tune(encoder, train, valid, c); });
}

}  // namespace fewvuln
