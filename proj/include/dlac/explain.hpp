#pragma once

// Attention-based evidence: the tokens each label attends to most.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/heads.hpp"
#include "dlac/model.hpp"
#include "dlac/text.hpp"

namespace dlac {

class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

struct ScoredToken {
  std::size_t index = 0;
  double score = 0.0;
  friend bool operator==(const ScoredToken&, const ScoredToken&) = default;
};

/// The min(top_k, t) largest entries of column `label`, descending, ties to the lower token index.
inline std::vector<ScoredToken> top_attention(const Tensor& attention, std::size_t label, std::size_t top_k) {
  if (attention.rank() != 2) throw DimensionError("attention must be a matrix");
  if (label >= attention.cols()) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(attention.cols()) + " labels");
  }
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  const std::size_t t = attention.rows();
  const std::size_t k = std::min(top_k, t);
  std::vector<std::size_t> idx(t);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    const double sa = attention(a, label), sb = attention(b, label);
    return sa > sb || (sa == sb && a < b);
  });
  std::vector<ScoredToken> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], attention(idx[i], label)});
  return out;
}

struct EvidenceToken {
  std::size_t token_index = 0;
  TextSpan span;
  double score = 0.0;
  double intensity = 0.0;  // score / top score, so the first entry is 1
};

struct Explanation {
  std::string document_id;
  std::string code;
  std::size_t label = 0;
  double probability = 0.0;
  std::vector<EvidenceToken> evidence;
};

inline Explanation build_explanation(const Document& doc, const Prediction& prediction, const LabelSet& labels,
                                     std::size_t label, std::size_t top_k) {
  if (!prediction.attention) throw AlignmentError("prediction carries no attention matrix (LRC head?)");
  const Tensor& a = *prediction.attention;
  if (a.rows() > doc.length() || (a.rows() < doc.length() && !prediction.truncated)) {
    throw AlignmentError("document '" + doc.id + "' has " + std::to_string(doc.length()) +
                         " tokens but attention covers " + std::to_string(a.rows()));
  }
  if (label >= labels.size() || a.cols() != labels.size()) throw AlignmentError("label index out of range");
  Explanation ex;
  ex.document_id = doc.id;
  ex.code = labels[label].code;
  ex.label = label;
  ex.probability = prediction.probs.at(label);
  const auto top = top_attention(a, label, top_k);
  const double max_score = top.front().score;
  for (const auto& st : top) {
    ex.evidence.push_back({st.index, doc.token_spans.at(st.index), st.score, max_score > 0.0 ? st.score / max_score : 0.0});
  }
  return ex;
}

/// Explanations for labels predicted at `threshold` (or for all labels), ordered by probability.
inline std::vector<Explanation> explain_document(const Model& model, const Document& doc, const LabelSet& labels,
                                                 double threshold, std::size_t top_k, bool all_labels = false) {
  const auto prediction = model.predict(doc);
  const auto predicted = predict_labels(prediction.probs, threshold);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return prediction.probs[a] > prediction.probs[b]; });
  std::vector<Explanation> out;
  for (auto j : order)
    if (all_labels || predicted[j]) out.push_back(build_explanation(doc, prediction, labels, j, top_k));
  return out;
}

inline nlohmann::json to_json(const Explanation& ex, const std::string* text = nullptr) {
  nlohmann::json tokens = nlohmann::json::array();
  for (std::size_t r = 0; r < ex.evidence.size(); ++r) {
    const auto& e = ex.evidence[r];
    nlohmann::json item{{"rank", r + 1},
                        {"token_index", e.token_index},
                        {"start", e.span.begin},
                        {"end", e.span.end},
                        {"score", e.score},
                        {"intensity", e.intensity}};
    if (text) item["text"] = text->substr(e.span.begin, e.span.end - e.span.begin);
    tokens.push_back(std::move(item));
  }
  return {{"document_id", ex.document_id}, {"code", ex.code}, {"probability", ex.probability}, {"tokens", tokens}};
}

}  // namespace dlac
