#pragma once

// Multi-label evaluation: macro/micro ROC AUC, macro/micro F1 and precision@n.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/tensor.hpp"

namespace dlac {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Scores and binary truths for n documents x m labels, row-major.
struct PredictionBatch {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> truths;

  PredictionBatch() = default;
  PredictionBatch(std::size_t docs, std::size_t labels) : n(docs), m(labels), scores(docs * labels), truths(docs * labels) {}

  double score(std::size_t i, std::size_t j) const { return scores[i * m + j]; }
  bool truth(std::size_t i, std::size_t j) const { return truths[i * m + j] != 0; }

  void append(std::span<const double> s, std::span<const std::uint8_t> y) {
    if (n == 0 && m == 0) m = s.size();
    if (s.size() != m || y.size() != m) throw MetricError("prediction row width does not match batch");
    scores.insert(scores.end(), s.begin(), s.end());
    truths.insert(truths.end(), y.begin(), y.end());
    ++n;
  }

  void validate() const {
    if (scores.size() != n * m || truths.size() != n * m) throw MetricError("prediction batch shape mismatch");
    for (auto t : truths)
      if (t > 1) throw MetricError("truths must be binary");
  }

  std::vector<double> label_scores(std::size_t j) const {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = score(i, j);
    return out;
  }
  std::vector<std::uint8_t> label_truths(std::size_t j) const {
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = truths[i * m + j];
    return out;
  }
};

/// Mann-Whitney AUC via average ranks: the fraction of (positive, negative)
/// pairs ranked correctly, ties counting one half. Empty when only one class is present.
inline std::optional<double> auc_binary(std::span<const double> scores, std::span<const std::uint8_t> truths) {
  if (scores.size() != truths.size()) throw MetricError("auc: scores and truths differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (truths[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct MacroAuc {
  double value = 0.0;
  std::size_t labels_used = 0;
  std::size_t labels_excluded = 0;
  std::vector<std::optional<double>> per_label;
};

/// Unweighted mean over labels that have both classes present.
inline MacroAuc auc_macro_detail(const PredictionBatch& b) {
  b.validate();
  if (b.n == 0) throw MetricError("auc_macro: empty batch");
  MacroAuc out;
  double total = 0.0;
  for (std::size_t j = 0; j < b.m; ++j) {
    auto s = b.label_scores(j);
    auto y = b.label_truths(j);
    auto a = auc_binary(s, y);
    out.per_label.push_back(a);
    if (a) {
      total += *a;
      ++out.labels_used;
    } else {
      ++out.labels_excluded;
    }
  }
  if (out.labels_used == 0) throw MetricError("auc_macro: no label has both classes present");
  out.value = total / static_cast<double>(out.labels_used);
  return out;
}

inline double auc_macro(const PredictionBatch& b) { return auc_macro_detail(b).value; }

inline double auc_micro(const PredictionBatch& b) {
  b.validate();
  if (b.n == 0) throw MetricError("auc_micro: empty batch");
  auto a = auc_binary(b.scores, b.truths);
  if (!a) throw MetricError("auc_micro: pooled truths contain a single class");
  return *a;
}

struct F1Scores {
  double macro = 0.0;
  double micro = 0.0;
  std::vector<double> per_label;
};

/// Thresholded (>=) predictions; a label with no predicted and no true positives scores 0.
inline F1Scores f1_scores(const PredictionBatch& b, double threshold = 0.5) {
  b.validate();
  if (b.n == 0) throw MetricError("f1: empty batch");
  F1Scores out;
  std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
  auto f1 = [](std::size_t tp, std::size_t fp, std::size_t fn) {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  };
  double macro = 0.0;
  for (std::size_t j = 0; j < b.m; ++j) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < b.n; ++i) {
      const bool pred = b.score(i, j) >= threshold;
      const bool truth = b.truth(i, j);
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    out.per_label.push_back(f1(tp, fp, fn));
    macro += out.per_label.back();
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  out.macro = macro / static_cast<double>(b.m);
  out.micro = f1(tp_all, fp_all, fn_all);
  return out;
}

/// Mean over documents of (true labels among the n top-scored) / n; ties go to the lower label index.
inline double precision_at_n(const PredictionBatch& b, std::size_t n = 5) {
  b.validate();
  if (n == 0) throw MetricError("precision_at_n: n must be >= 1");
  if (b.m < n) throw MetricError("precision_at_n: m = " + std::to_string(b.m) + " < n = " + std::to_string(n));
  if (b.n == 0) throw MetricError("precision_at_n: empty batch");
  std::vector<std::size_t> idx(b.m);
  double total = 0.0;
  for (std::size_t i = 0; i < b.n; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                      [&](std::size_t x, std::size_t y) {
                        const double sx = b.score(i, x), sy = b.score(i, y);
                        return sx > sy || (sx == sy && x < y);
                      });
    std::size_t hits = 0;
    for (std::size_t k = 0; k < n; ++k) hits += b.truth(i, idx[k]);
    total += static_cast<double>(hits) / static_cast<double>(n);
  }
  return total / static_cast<double>(b.n);
}

// ---------------------------------------------------------------------------

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsReport {
  std::optional<double> auc_macro;
  std::optional<double> auc_micro;
  double f1_macro = 0.0;
  double f1_micro = 0.0;
  std::optional<double> p_at_n;
  std::size_t n = 5;
  double threshold = 0.5;
  std::size_t documents = 0;
  std::size_t labels_excluded_from_auc = 0;
  std::vector<std::optional<double>> per_label_auc;
  std::vector<double> per_label_f1;
  std::vector<std::string> codes;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport make_report(const PredictionBatch& b, std::vector<std::string> codes, double threshold = 0.5,
                                 std::size_t n = 5) {
  MetricsReport r;
  r.threshold = threshold;
  r.n = n;
  r.documents = b.n;
  r.codes = std::move(codes);
  try {
    auto macro = auc_macro_detail(b);
    r.auc_macro = macro.value;
    r.labels_excluded_from_auc = macro.labels_excluded;
    r.per_label_auc = macro.per_label;
  } catch (const MetricError&) {
    r.labels_excluded_from_auc = b.m;
    r.per_label_auc.assign(b.m, std::nullopt);
  }
  try {
    r.auc_micro = auc_micro(b);
  } catch (const MetricError&) {
  }
  auto f1 = f1_scores(b, threshold);
  r.f1_macro = f1.macro;
  r.f1_micro = f1.micro;
  r.per_label_f1 = f1.per_label;
  if (b.m >= n) r.p_at_n = precision_at_n(b, n);
  return r;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_label = nlohmann::json::array();
  for (std::size_t j = 0; j < r.per_label_f1.size(); ++j) {
    per_label.push_back({{"code", j < r.codes.size() ? r.codes[j] : std::to_string(j)},
                         {"auc", optional_json(j < r.per_label_auc.size() ? r.per_label_auc[j] : std::nullopt)},
                         {"f1", r.per_label_f1[j]}});
  }
  return {{"schema_version", kMetricsSchemaVersion},
          {"documents", r.documents},
          {"threshold", r.threshold},
          {"auc_macro", optional_json(r.auc_macro)},
          {"auc_micro", optional_json(r.auc_micro)},
          {"f1_macro", r.f1_macro},
          {"f1_micro", r.f1_micro},
          {"p_at_n", optional_json(r.p_at_n)},
          {"n", r.n},
          {"labels_excluded_from_auc", r.labels_excluded_from_auc},
          {"per_label", per_label}};
}

/// Mean and sample standard deviation of each headline metric across folds.
struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.count = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline nlohmann::json fold_summary_json(const std::vector<MetricsReport>& folds) {
  auto collect = [&](auto getter) {
    std::vector<double> xs;
    for (const auto& f : folds)
      if (auto v = getter(f)) xs.push_back(*v);
    auto s = summarize(xs);
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"folds", s.count}};
  };
  return {{"auc_macro", collect([](const MetricsReport& r) { return r.auc_macro; })},
          {"auc_micro", collect([](const MetricsReport& r) { return r.auc_micro; })},
          {"f1_macro", collect([](const MetricsReport& r) { return std::optional<double>(r.f1_macro); })},
          {"f1_micro", collect([](const MetricsReport& r) { return std::optional<double>(r.f1_micro); })},
          {"p_at_n", collect([](const MetricsReport& r) { return r.p_at_n; })}};
}

/// "0.87 ± 0.008" style rendering of a fold summary entry.
inline std::string format_mean_std(const nlohmann::json& entry, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, entry.at("mean").get<double>(), digits,
                entry.at("std").get<double>());
  return buf;
}

}  // namespace dlac
