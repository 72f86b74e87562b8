#pragma once

// Training loop, evaluation, k-fold cross-validation and early stopping.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/metrics.hpp"
#include "dlac/model.hpp"
#include "dlac/optim.hpp"
#include "dlac/text.hpp"

namespace dlac {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 25;
  std::size_t folds = 5;
  double dropout = 0.1;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 13;
  double grad_clip = 1.0;
  double threshold = 0.5;
  std::size_t min_count = 1;
  ModelConfig model;

  /// Values used with 110M-parameter pretrained encoders: Adam at 1.41e-5,
  /// batch 64, d_e = 768, d_a = 600.
  static TrainConfig pretrained_scale() {
    TrainConfig c;
    c.lr = 1.41e-5;
    c.batch_size = 64;
    c.model.encoder.d_e = 768;
    c.model.d_a = 600;
    return c;
  }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (model.d_a < 1) throw ConfigError("d_a must be >= 1");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json enc;
  to_json(enc, c.model.encoder);
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"folds", c.folds},
          {"dropout", c.dropout},
          {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},
          {"grad_clip", c.grad_clip},
          {"threshold", c.threshold},
          {"min_count", c.min_count},
          {"head", to_string(c.model.head)},
          {"d_a", c.model.d_a},
          {"encoder", enc}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"lr",        "batch_size", "epochs", "folds", "dropout",
                                              "early_stop_patience", "seed", "grad_clip", "threshold",
                                              "min_count", "head",       "d_a",    "encoder"};
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config field '" + k + "'");
  }
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.folds = j.value("folds", c.folds);
    c.dropout = j.value("dropout", c.dropout);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.threshold = j.value("threshold", c.threshold);
    c.min_count = j.value("min_count", c.min_count);
    if (j.contains("head")) c.model.head = head_kind_from_string(j.at("head").get<std::string>());
    c.model.d_a = j.value("d_a", c.model.d_a);
    if (j.contains("encoder")) from_json(j.at("encoder"), c.model.encoder);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
  return c;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_micro_f1 = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::vector<double> validation_f1() const {
    std::vector<double> out;
    for (const auto& e : epochs) out.push_back(e.validation_micro_f1);
    return out;
  }
};

/// Wall time is left out: the serialized history is a pure function of config, data and seed.
inline nlohmann::json to_json(const TrainHistory& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    arr.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"validation_loss", e.validation_loss},
                   {"validation_micro_f1", e.validation_micro_f1}});
  }
  return arr;
}

inline TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  for (const auto& e : j) {
    h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("validation_loss").get<double>(), e.at("validation_micro_f1").get<double>(), 0.0});
  }
  for (std::size_t i = 0; i < h.epochs.size(); ++i)
    if (h.epochs[i].epoch != i + 1) throw DataError("training history epochs are not contiguous from 1");
  return h;
}

// ---------------------------------------------------------------------------

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
inline double bce_value(std::span<const double> probs, std::span<const std::uint8_t> y) {
  if (probs.size() != y.size()) throw DimensionError("bce: length mismatch");
  double loss = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double p = std::clamp(probs[j], kProbabilityFloor, 1.0 - kProbabilityFloor);
    loss -= y[j] ? std::log(p) : std::log(1.0 - p);
  }
  return loss / static_cast<double>(probs.size());
}

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_epoch = 0;  // 1-based
};

/// Stops once validation micro-F1 has not strictly improved for `patience`
/// consecutive epochs. The best epoch is the earliest argmax.
inline EarlyStopDecision early_stop(const std::vector<double>& validation_f1, std::size_t patience) {
  if (validation_f1.empty()) throw TrainingError("early_stop: no epochs recorded");
  EarlyStopDecision d;
  double best = validation_f1[0];
  d.best_epoch = 1;
  for (std::size_t e = 1; e < validation_f1.size(); ++e) {
    if (validation_f1[e] > best) {
      best = validation_f1[e];
      d.best_epoch = e + 1;
    }
  }
  d.stop = validation_f1.size() - d.best_epoch >= patience;
  return d;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// k disjoint validation folds covering 0..n-1 once each; the first n % k folds hold one extra item.
inline std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (n < k) throw ConfigError("kfold_split: " + std::to_string(n) + " documents cannot fill " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].validation.assign(order.begin() + pos, order.begin() + pos + size);
    pos += size;
  }
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), folds[g].validation.begin(), folds[g].validation.end());
  return folds;
}

// ---------------------------------------------------------------------------

struct Evaluation {
  PredictionBatch batch;
  double loss = 0.0;
};

inline Evaluation evaluate(const Model& model, const std::vector<Document>& docs, std::span<const std::size_t> indices) {
  Evaluation ev;
  ev.batch.m = model.m();
  for (auto i : indices) {
    auto p = model.predict(docs.at(i));
    ev.loss += bce_value(p.probs, docs[i].labels);
    ev.batch.append(p.probs, docs[i].labels);
  }
  if (!indices.empty()) ev.loss /= static_cast<double>(indices.size());
  return ev;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// One pass over `indices` in a seeded shuffled order; returns the mean batch loss.
inline double train_epoch(Model& model, const std::vector<Document>& docs, std::vector<std::size_t> indices,
                          Adam& optimizer, const TrainConfig& cfg, std::mt19937_64& rng) {
  if (indices.empty()) throw TrainingError("train_epoch: no training documents");
  std::shuffle(indices.begin(), indices.end(), rng);
  auto params = model.parameters();
  DropoutSpec drop{cfg.dropout, true, &rng};
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < indices.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(indices.size(), start + cfg.batch_size);
    Graph g;
    std::optional<Var> loss;
    for (std::size_t b = start; b < end; ++b) {
      const auto& doc = docs.at(indices[b]);
      auto out = model.forward(g, doc.tokens, drop);
      Var l = bce_loss(out.head.probs, doc.targets());
      loss = loss ? add(*loss, l) : l;
    }
    Var mean_loss = scale(*loss, 1.0 / static_cast<double>(end - start));
    const double value = mean_loss.value().item();
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite loss in batch " + std::to_string(batches) + " (documents " +
                          docs.at(indices[start]).id + " ...)");
    }
    optimizer.zero_grad();
    g.backward(mean_loss);
    clip_grad_norm(params, cfg.grad_clip);
    optimizer.step();
    total += value;
    ++batches;
  }
  return total / static_cast<double>(batches);
}

struct FitResult {
  TrainHistory history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains up to cfg.epochs with early stopping on validation micro-F1, then
/// restores the parameters of the best epoch.
inline FitResult fit(Model& model, const std::vector<Document>& docs, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& validation, const TrainConfig& cfg, std::uint64_t seed,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (validation.empty()) throw TrainingError("fit: validation set is empty");
  std::mt19937_64 rng(seed);
  Adam optimizer(model.parameters(), AdamOptions{cfg.lr});
  FitResult result;
  std::vector<Tensor> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (auto* p : model.parameters()) best_values.push_back(p->value);
  };
  snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_epoch(model, docs, train, optimizer, cfg, rng);
    auto ev = evaluate(model, docs, validation);
    rec.validation_loss = ev.loss;
    rec.validation_micro_f1 = f1_scores(ev.batch, cfg.threshold).micro;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    auto decision = early_stop(result.history.validation_f1(), cfg.early_stop_patience);
    if (decision.best_epoch == epoch) snapshot();
    result.best_epoch = decision.best_epoch;
    if (decision.stop) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  return result;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x9E3779B9u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct FoldOutcome {
  Model model;
  FitResult fit;
  MetricsReport validation;
  MetricsReport test;
};

struct CrossValidationResult {
  std::vector<FoldOutcome> folds;
  std::size_t best_fold = 0;  // highest validation micro-F1

  std::vector<MetricsReport> test_reports() const {
    std::vector<MetricsReport> out;
    for (const auto& f : folds) out.push_back(f.test);
    return out;
  }
};

inline std::vector<std::string> label_codes(const LabelSet& labels) {
  std::vector<std::string> codes;
  for (const auto& l : labels.labels()) codes.push_back(l.code);
  return codes;
}

/// k-fold protocol: `pool` is split into cfg.folds folds; each fold trains on
/// the others, early-stops on its held-out fold and is scored on `test`.
inline CrossValidationResult cross_validate(const std::vector<Document>& docs, const std::vector<std::size_t>& pool,
                                            const std::vector<std::size_t>& test, const Vocabulary& vocab,
                                            const LabelSet& labels, const TrainConfig& cfg,
                                            const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  auto folds = kfold_split(pool.size(), cfg.folds, cfg.seed);
  CrossValidationResult result;
  const auto codes = label_codes(labels);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<std::size_t> train, val;
    for (auto i : folds[f].train) train.push_back(pool[i]);
    for (auto i : folds[f].validation) val.push_back(pool[i]);
    const std::uint64_t fold_seed = derive_seed(cfg.seed, f + 1);
    FoldOutcome out{Model(cfg.model, vocab, labels, fold_seed), {}, {}, {}};
    out.fit = fit(out.model, docs, train, val, cfg, derive_seed(fold_seed, 1),
                  on_epoch ? EpochCallback([&, f](const EpochRecord& r) { on_epoch(f, r); }) : EpochCallback{});
    out.validation = make_report(evaluate(out.model, docs, val).batch, codes, cfg.threshold);
    if (!test.empty()) out.test = make_report(evaluate(out.model, docs, test).batch, codes, cfg.threshold);
    result.folds.push_back(std::move(out));
  }
  for (std::size_t f = 1; f < result.folds.size(); ++f)
    if (result.folds[f].validation.f1_micro > result.folds[result.best_fold].validation.f1_micro) result.best_fold = f;
  return result;
}

}  // namespace dlac
