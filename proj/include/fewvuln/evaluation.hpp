#pragma once

// Per-tag precision / recall / F1 over SN and SV, macro averaging across
// categories, and the six-column comparison tables.

#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fewvuln/corpus.hpp"
#include "fewvuln/errors.hpp"

namespace fewvuln {

enum class MetricLevel { token, span };

inline std::string_view to_string(MetricLevel l) { return l == MetricLevel::token ? "token" : "span"; }

struct TagMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold count N_t (tokens or spans, per level)
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  bool precision_undefined = false;  // nothing predicted as this tag; precision reported as 0
};

struct EvalReport {
  TagMetrics sn;
  TagMetrics sv;
  std::size_t total_tokens = 0;
  std::size_t averaged_over = 1;  // > 1 for macro averages
  MetricLevel level = MetricLevel::token;

  const TagMetrics& operator[](Tag t) const { return t == Tag::SV ? sv : sn; }
  TagMetrics& operator[](Tag t) { return t == Tag::SV ? sv : sn; }
};

inline double f1_of(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline TagMetrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  TagMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.support = tp + fn;
  m.precision_undefined = tp + fp == 0;
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = f1_of(m.precision, m.recall);
  return m;
}

namespace detail {

inline void check_shapes(const std::vector<std::vector<Tag>>& gold, const std::vector<std::vector<Tag>>& pred) {
  if (gold.size() != pred.size())
    throw DomainError("gold has " + std::to_string(gold.size()) + " sentences but prediction has " +
                      std::to_string(pred.size()) + "; first offending index " +
                      std::to_string(std::min(gold.size(), pred.size())));
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i].size() != pred[i].size())
      throw DomainError("length mismatch at sentence " + std::to_string(i) + ": gold " +
                        std::to_string(gold[i].size()) + ", prediction " + std::to_string(pred[i].size()));
}

}  // namespace detail

inline std::vector<std::vector<Tag>> tag_sequences(const std::vector<TaggedSentence>& sentences) {
  std::vector<std::vector<Tag>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(s.tags);
  return out;
}

inline EvalReport token_prf(const std::vector<std::vector<Tag>>& gold, const std::vector<std::vector<Tag>>& pred) {
  detail::check_shapes(gold, pred);
  std::array<std::size_t, kNumTags> tp{}, fp{}, fn{};
  std::size_t total = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    total += gold[i].size();
    for (std::size_t j = 0; j < gold[i].size(); ++j) {
      const auto g = tag_index(gold[i][j]), p = tag_index(pred[i][j]);
      if (g == p) {
        ++tp[g];
      } else {
        ++fp[p];
        ++fn[g];
      }
    }
  }
  EvalReport r;
  r.level = MetricLevel::token;
  r.total_tokens = total;
  for (Tag t : kEntityTags) r[t] = metrics_from_counts(tp[tag_index(t)], fp[tag_index(t)], fn[tag_index(t)]);
  return r;
}

// Exact (start, end, tag) span matching.
inline EvalReport span_prf(const std::vector<std::vector<Tag>>& gold, const std::vector<std::vector<Tag>>& pred) {
  detail::check_shapes(gold, pred);
  std::array<std::size_t, kNumTags> tp{}, fp{}, fn{};
  std::size_t total = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    total += gold[i].size();
    auto gs = extract_spans(gold[i]);
    auto ps = extract_spans(pred[i]);
    std::set<Span> gset(gs.begin(), gs.end());
    std::set<Span> pset(ps.begin(), ps.end());
    for (const auto& s : ps) (gset.count(s) ? tp : fp)[tag_index(s.tag)]++;
    for (const auto& s : gs)
      if (!pset.count(s)) ++fn[tag_index(s.tag)];
  }
  EvalReport r;
  r.level = MetricLevel::span;
  r.total_tokens = total;
  for (Tag t : kEntityTags) r[t] = metrics_from_counts(tp[tag_index(t)], fp[tag_index(t)], fn[tag_index(t)]);
  return r;
}

inline EvalReport evaluate(const std::vector<std::vector<Tag>>& gold, const std::vector<std::vector<Tag>>& pred,
                           MetricLevel level = MetricLevel::token) {
  return level == MetricLevel::token ? token_prf(gold, pred) : span_prf(gold, pred);
}

// Macro average of each metric; counts are summed.
inline EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw DomainError("cannot average an empty list of reports");
  EvalReport out;
  out.level = reports.front().level;
  out.averaged_over = reports.size();
  const double n = static_cast<double>(reports.size());
  for (Tag t : kEntityTags) {
    TagMetrics m;
    for (const auto& r : reports) {
      m.precision += r[t].precision;
      m.recall += r[t].recall;
      m.f1 += r[t].f1;
      m.support += r[t].support;
      m.tp += r[t].tp;
      m.fp += r[t].fp;
      m.fn += r[t].fn;
      m.precision_undefined = m.precision_undefined || r[t].precision_undefined;
    }
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    out[t] = m;
  }
  for (const auto& r : reports) out.total_tokens += r.total_tokens;
  return out;
}

// Support-weighted F1 over SN and SV: (N_SN F_SN + N_SV F_SV) / (N_SN + N_SV).
inline double weighted_f1(const EvalReport& report) {
  const auto nsn = static_cast<double>(report.sn.support);
  const auto nsv = static_cast<double>(report.sv.support);
  if (nsn + nsv == 0.0) throw DomainError("weighted F1 is undefined when there are no SN or SV gold tokens");
  return (nsn * report.sn.f1 + nsv * report.sv.f1) / (nsn + nsv);
}

// ---------------------------------------------------------------------------
// Comparison tables
// ---------------------------------------------------------------------------

using NamedReport = std::pair<std::string, EvalReport>;

inline constexpr std::array<std::string_view, 6> kComparisonColumns{
    "SN precision", "SN recall", "SN f1-score", "SV precision", "SV recall", "SV f1-score"};

inline std::array<double, 6> comparison_values(const EvalReport& r) {
  return {r.sn.precision, r.sn.recall, r.sn.f1, r.sv.precision, r.sv.recall, r.sv.f1};
}

inline std::string render_comparison_csv(const std::vector<NamedReport>& rows, MetricLevel level = MetricLevel::token) {
  std::ostringstream os;
  os << "# level=" << to_string(level) << '\n';
  os << "setting";
  for (auto c : kComparisonColumns) os << ',' << c;
  os << '\n' << std::fixed << std::setprecision(4);
  for (const auto& [name, report] : rows) {
    os << name;
    for (double v : comparison_values(report)) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

inline std::string render_comparison_text(const std::vector<NamedReport>& rows, MetricLevel level = MetricLevel::token) {
  std::size_t name_w = 8;
  for (const auto& r : rows) name_w = std::max(name_w, r.first.size() + 2);
  std::ostringstream os;
  os << "(" << to_string(level) << "-level metrics)\n";
  os << std::left << std::setw(static_cast<int>(name_w)) << "";
  for (auto c : kComparisonColumns) os << std::right << std::setw(static_cast<int>(c.size() + 2)) << c;
  os << '\n' << std::fixed << std::setprecision(4);
  for (const auto& [name, report] : rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << name;
    auto vals = comparison_values(report);
    for (std::size_t i = 0; i < vals.size(); ++i)
      os << std::right << std::setw(static_cast<int>(kComparisonColumns[i].size() + 2)) << vals[i];
    os << '\n';
  }
  return os.str();
}

struct ComparisonRow {
  std::string setting;
  std::array<double, 6> values{};
};

// Reads back a table written by render_comparison_csv.
inline std::vector<ComparisonRow> parse_comparison_csv(std::string_view csv) {
  std::vector<ComparisonRow> rows;
  std::istringstream in{std::string(csv)};
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw ParseError("expected 7 comparison columns", line_no);
    ComparisonRow row;
    row.setting = cells[0];
    for (std::size_t i = 0; i < 6; ++i) row.values[i] = std::stod(cells[i + 1]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace fewvuln
