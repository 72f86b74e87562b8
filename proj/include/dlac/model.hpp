#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/encoders.hpp"
#include "dlac/heads.hpp"
#include "dlac/text.hpp"

namespace dlac {

enum class HeadKind { dlac, lrc };

inline std::string to_string(HeadKind k) { return k == HeadKind::dlac ? "dlac" : "lrc"; }

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "dlac") return HeadKind::dlac;
  if (s == "lrc") return HeadKind::lrc;
  throw ConfigError("unknown head kind '" + s + "'");
}

struct ModelConfig {
  EncoderConfig encoder;
  HeadKind head = HeadKind::dlac;
  std::size_t d_a = 48;
};

/// Inference result for one document.
struct Prediction {
  std::vector<double> probs;
  std::optional<Tensor> attention;  // [t x m] for DLAC
  std::size_t encoded_length = 0;   // rows of E (after truncation)
  bool truncated = false;
};

struct ForwardResult {
  HeadOutput head;
  EncoderOutput encoded;
};

class Model {
 public:
  Model() = default;

  Model(ModelConfig cfg, const Vocabulary& vocab, const LabelSet& labels, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.encoder.vocab_size = vocab.size();
    std::mt19937_64 rng(seed);
    encoder_ = Encoder(cfg_.encoder, rng);
    if (cfg_.head == HeadKind::dlac) {
      dlac_ = DlacHead(cfg_.encoder.d_e, cfg_.d_a, labels, vocab, rng);
    } else {
      lrc_ = LrcHead(cfg_.encoder.d_e, labels.size(), rng);
    }
    m_ = labels.size();
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t m() const { return m_; }

  ForwardResult forward(Graph& g, std::span<const std::size_t> tokens, const DropoutSpec& drop = {}) {
    return forward_impl(*this, g, tokens, drop);
  }
  ForwardResult forward(Graph& g, std::span<const std::size_t> tokens, const DropoutSpec& drop = {}) const {
    return forward_impl(*this, g, tokens, drop);
  }

  Prediction predict(std::span<const std::size_t> tokens) const {
    Graph g;
    auto r = forward(g, tokens);
    Prediction p;
    const auto& probs = r.head.probs.value();
    p.probs.assign(probs.data().begin(), probs.data().end());
    if (r.head.attention) p.attention = r.head.attention->value();
    p.encoded_length = r.encoded.length();
    p.truncated = r.encoded.truncated;
    return p;
  }
  Prediction predict(const Document& doc) const { return predict(doc.tokens); }

  std::vector<Parameter*> parameters() {
    auto ps = encoder_.parameters();
    auto hs = dlac_ ? dlac_->parameters() : lrc_->parameters();
    ps.insert(ps.end(), hs.begin(), hs.end());
    return ps;
  }
  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  Parameter* find_parameter(const std::string& name) {
    for (auto* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  DlacHead* dlac() { return dlac_ ? &*dlac_ : nullptr; }
  const DlacHead* dlac() const { return dlac_ ? &*dlac_ : nullptr; }
  LrcHead* lrc() { return lrc_ ? &*lrc_ : nullptr; }
  const LrcHead* lrc() const { return lrc_ ? &*lrc_ : nullptr; }

 private:
  template <class Self>
  static ForwardResult forward_impl(Self& self, Graph& g, std::span<const std::size_t> tokens, const DropoutSpec& drop) {
    ForwardResult r;
    r.encoded = self.encoder_.encode(g, tokens);
    r.head = self.dlac_ ? self.dlac_->forward(r.encoded.embeddings, drop) : self.lrc_->forward(r.encoded.embeddings, drop);
    return r;
  }

  ModelConfig cfg_;
  std::size_t m_ = 0;
  Encoder encoder_;
  std::optional<DlacHead> dlac_;
  std::optional<LrcHead> lrc_;
};

}  // namespace dlac
