#pragma once

// Classification heads on top of the word embedding matrix E [t x d_e].
//
// DlacHead: description-based label attention.
//   A = column_softmax(E U D^T)        [t x m]  each label's distribution over tokens
//   C = E^T A                           [d_e x m] per-label contextual embedding
//   p_j = sigmoid(W_j . C[:, j] + b_j)  one linear scorer per label
//
// LrcHead: logistic regression on the mean-pooled rows of E; ignores D.

#include <optional>
#include <random>
#include <vector>

#include "dlac/autodiff.hpp"
#include "dlac/text.hpp"

namespace dlac {

/// Raised when label descriptions cannot seed the description embeddings.
class InitializationError : public DataError {
 public:
  using DataError::DataError;
};

/// Row j = mean of the table rows of the in-vocabulary tokens of label j's description.
inline Tensor init_description_embeddings(const LabelSet& labels, const Vocabulary& vocab, const Tensor& token_table) {
  if (token_table.rank() != 2 || token_table.rows() != vocab.size()) {
    throw DimensionError("description token table must have one row per vocabulary entry, got " +
                         shape_string(token_table.shape()));
  }
  const std::size_t d_a = token_table.cols();
  Tensor d = Tensor::matrix(labels.size(), d_a);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    std::vector<std::size_t> ids;
    try {
      for (const auto& tok : preprocess_tokens(labels[j].description))
        if (vocab.contains(tok)) ids.push_back(vocab.id(tok));
    } catch (const EmptyDocumentError&) {
    }
    if (ids.empty()) {
      throw InitializationError("description of code '" + labels[j].code + "' has no in-vocabulary tokens");
    }
    auto row = d.row(j);
    for (auto id : ids)
      for (std::size_t c = 0; c < d_a; ++c) row[c] += token_table(id, c);
    for (auto& v : row) v /= static_cast<double>(ids.size());
  }
  return d;
}

struct HeadOutput {
  Var probs;                      // [m]
  std::optional<Var> attention;   // A [t x m], DLAC only
  std::optional<Var> contextual;  // C [d_e x m], DLAC only
};

/// Dropout applied to E before the head and to C before classification.
struct DropoutSpec {
  double p = 0.0;
  bool training = false;
  std::mt19937_64* rng = nullptr;

  Var apply(const Var& x) const {
    if (!training || p == 0.0) return x;
    if (!rng) throw ConfigError("dropout in training mode needs a random generator");
    return dropout(x, p, true, *rng);
  }
};

class DlacHead {
 public:
  DlacHead() = default;

  /// U and W ~ N(0, 1/d), b = 0, D seeded from the descriptions via a dedicated
  /// d_a-dimensional token table drawn from N(0, 0.1^2).
  template <class Rng>
  DlacHead(std::size_t d_e, std::size_t d_a, const LabelSet& labels, const Vocabulary& vocab, Rng& rng) {
    if (d_e < 1 || d_a < 1) throw ConfigError("head dimensions must be >= 1");
    if (labels.size() < 1) throw ConfigError("label set is empty");
    const std::size_t m = labels.size();
    const Tensor table = Tensor::normal({vocab.size(), d_a}, 0.1, rng);
    transform_ = Parameter("dlac.U", Tensor::normal({d_e, d_a}, 1.0 / std::sqrt(static_cast<double>(d_e)), rng));
    descriptions_ = Parameter("dlac.D", init_description_embeddings(labels, vocab, table));
    weights_ = Parameter("dlac.W", Tensor::normal({m, d_e}, 1.0 / std::sqrt(static_cast<double>(d_e)), rng));
    bias_ = Parameter("dlac.b", Tensor::vector(m));
  }

  /// Direct construction from parameter values.
  DlacHead(Tensor u, Tensor d, Tensor w, Tensor b)
      : transform_("dlac.U", std::move(u)),
        descriptions_("dlac.D", std::move(d)),
        weights_("dlac.W", std::move(w)),
        bias_("dlac.b", std::move(b)) {
    validate();
  }

  void validate() const {
    const auto& u = transform_.value;
    const auto& d = descriptions_.value;
    const auto& w = weights_.value;
    const auto& b = bias_.value;
    if (u.rank() != 2 || d.rank() != 2 || w.rank() != 2 || b.rank() != 1 || u.cols() != d.cols() ||
        w.rows() != d.rows() || w.cols() != u.rows() || b.size() != d.rows()) {
      throw DimensionError("inconsistent DLAC parameter shapes: U " + shape_string(u.shape()) + ", D " +
                           shape_string(d.shape()) + ", W " + shape_string(w.shape()) + ", b " +
                           shape_string(b.shape()));
    }
  }

  std::size_t d_e() const { return transform_.value.rows(); }
  std::size_t d_a() const { return transform_.value.cols(); }
  std::size_t m() const { return descriptions_.value.rows(); }

  HeadOutput forward(const Var& e, const DropoutSpec& drop = {}) { return forward_impl(*this, e, drop); }
  HeadOutput forward(const Var& e, const DropoutSpec& drop = {}) const { return forward_impl(*this, e, drop); }

  /// A = column_softmax(E U D^T), evaluated as E (U D^T).
  Var attention(const Var& e) { return attention_impl(*this, e); }
  Var attention(const Var& e) const { return attention_impl(*this, e); }

  std::vector<Parameter*> parameters() { return {&transform_, &descriptions_, &weights_, &bias_}; }

  Parameter& transform() { return transform_; }
  Parameter& descriptions() { return descriptions_; }
  Parameter& weights() { return weights_; }
  Parameter& bias() { return bias_; }
  const Parameter& transform() const { return transform_; }
  const Parameter& descriptions() const { return descriptions_; }
  const Parameter& weights() const { return weights_; }
  const Parameter& bias() const { return bias_; }

 private:
  template <class Self>
  static Var attention_impl(Self& self, const Var& e) {
    Graph& g = *e.graph;
    const Tensor& ev = e.value();
    if (ev.rank() != 2 || ev.cols() != self.d_e()) {
      throw DimensionError("DLAC attention: E " + shape_string(ev.shape()) + " does not match U " +
                           shape_string(self.transform_.value.shape()));
    }
    Var queries = matmul(g.parameter(self.transform_), transpose(g.parameter(self.descriptions_)));
    return column_softmax(matmul(e, queries));
  }

  template <class Self>
  static HeadOutput forward_impl(Self& self, const Var& e_in, const DropoutSpec& drop) {
    Graph& g = *e_in.graph;
    Var e = drop.apply(e_in);
    Var a = attention_impl(self, e);
    Var c = matmul(transpose(e), a);
    Var c_used = drop.apply(c);
    Var logits = add(row_sum(mul(g.parameter(self.weights_), transpose(c_used))), g.parameter(self.bias_));
    return {sigmoid(logits), a, c};
  }

  Parameter transform_;
  Parameter descriptions_;
  Parameter weights_;
  Parameter bias_;
};

class LrcHead {
 public:
  LrcHead() = default;

  template <class Rng>
  LrcHead(std::size_t d_e, std::size_t m, Rng& rng)
      : weights_("lrc.W", Tensor::normal({m, d_e}, 1.0 / std::sqrt(static_cast<double>(d_e)), rng)),
        bias_("lrc.b", Tensor::vector(m)) {}

  LrcHead(Tensor w, Tensor b) : weights_("lrc.W", std::move(w)), bias_("lrc.b", std::move(b)) {
    if (weights_.value.rank() != 2 || bias_.value.size() != weights_.value.rows()) {
      throw DimensionError("inconsistent LRC parameter shapes");
    }
  }

  std::size_t d_e() const { return weights_.value.cols(); }
  std::size_t m() const { return weights_.value.rows(); }

  HeadOutput forward(const Var& e, const DropoutSpec& drop = {}) { return forward_impl(*this, e, drop); }
  HeadOutput forward(const Var& e, const DropoutSpec& drop = {}) const { return forward_impl(*this, e, drop); }

  std::vector<Parameter*> parameters() { return {&weights_, &bias_}; }
  Parameter& weights() { return weights_; }
  Parameter& bias() { return bias_; }
  const Parameter& weights() const { return weights_; }
  const Parameter& bias() const { return bias_; }

 private:
  template <class Self>
  static HeadOutput forward_impl(Self& self, const Var& e_in, const DropoutSpec& drop) {
    Graph& g = *e_in.graph;
    if (e_in.value().cols() != self.d_e()) throw DimensionError("LRC: embedding width does not match weights");
    Var pooled = reshape(mean_rows(drop.apply(e_in)), {1, self.d_e()});
    Var logits = reshape(matmul(pooled, transpose(g.parameter(self.weights_))), {self.m()});
    return {sigmoid(add(logits, g.parameter(self.bias_))), std::nullopt, std::nullopt};
  }

  Parameter weights_;
  Parameter bias_;
};

/// y_j = 1 iff probs_j >= threshold.
inline std::vector<std::uint8_t> predict_labels(std::span<const double> probs, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) out[j] = probs[j] >= threshold ? 1 : 0;
  return out;
}

}  // namespace dlac
