#pragma once

// Token encoders producing the word embedding matrix E [t x d_e].
//
//   bag                 row i = embedding[token_i]
//   windowed_attention  embeddings + one banded self-attention layer (|i-j| <= window)
//   chunked             ceil(t / chunk_len) evenly spaced chunks, each encoded by the
//                       inner encoder, then averaged per position over covering chunks

#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/autodiff.hpp"

namespace dlac {

enum class EncoderKind { bag, windowed_attention, chunked };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::bag: return "bag";
    case EncoderKind::windowed_attention: return "windowed_attention";
    case EncoderKind::chunked: return "chunked";
  }
  return "?";
}

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "bag") return EncoderKind::bag;
  if (s == "windowed_attention" || s == "windowed") return EncoderKind::windowed_attention;
  if (s == "chunked") return EncoderKind::chunked;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::bag;
  EncoderKind inner_kind = EncoderKind::bag;  // used when kind == chunked
  std::size_t d_e = 64;
  std::size_t vocab_size = 0;
  std::size_t max_len = 512;  // truncation limit of a bag/windowed encoder
  std::size_t window = 8;
  std::size_t chunk_len = 512;

  /// Long-context defaults: windowed attention over up to 4096 tokens.
  static EncoderConfig windowed(std::size_t vocab_size, std::size_t d_e = 64, std::size_t window = 8) {
    EncoderConfig c;
    c.kind = EncoderKind::windowed_attention;
    c.vocab_size = vocab_size;
    c.d_e = d_e;
    c.window = window;
    c.max_len = 4096;
    return c;
  }

  void validate() const {
    if (d_e < 1) throw ConfigError("encoder d_e must be >= 1");
    if (vocab_size < 2) throw ConfigError("encoder vocab_size must cover the special tokens");
    if (max_len < 1) throw ConfigError("encoder max_len must be >= 1");
    if (kind == EncoderKind::chunked) {
      if (inner_kind == EncoderKind::chunked) throw ConfigError("chunked encoder cannot nest another chunked encoder");
      if (chunk_len < 2) throw ConfigError("chunk_len must be >= 2");
      if (max_len < chunk_len) throw ConfigError("inner max_len must be >= chunk_len");
    }
    if ((kind == EncoderKind::windowed_attention ||
         (kind == EncoderKind::chunked && inner_kind == EncoderKind::windowed_attention)) &&
        window < 1) {
      throw ConfigError("window must be >= 1");
    }
  }

  bool uses_attention() const {
    return kind == EncoderKind::windowed_attention ||
           (kind == EncoderKind::chunked && inner_kind == EncoderKind::windowed_attention);
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)}, {"inner_kind", to_string(c.inner_kind)},
                     {"d_e", c.d_e},            {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},    {"window", c.window},
                     {"chunk_len", c.chunk_len}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  if (j.contains("kind")) c.kind = encoder_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("inner_kind")) c.inner_kind = encoder_kind_from_string(j.at("inner_kind").get<std::string>());
  c.d_e = j.value("d_e", c.d_e);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.kind == EncoderKind::windowed_attention ? std::size_t{4096} : c.max_len);
  c.window = j.value("window", c.window);
  c.chunk_len = j.value("chunk_len", c.chunk_len);
}

struct EncoderOutput {
  Var embeddings;                      // E [t x d_e]
  std::vector<std::size_t> coverage;   // chunks contributing to each position
  std::size_t input_length = 0;        // before truncation
  bool truncated = false;

  std::size_t length() const { return coverage.size(); }
};

/// k = ceil(t / chunk_len) spans of length min(chunk_len, t); first at 0, last
/// ending at t, starts evenly spaced and rounded half up.
inline std::vector<Span> chunk_spans(std::size_t t, std::size_t chunk_len = 512) {
  if (t < 1) throw DimensionError("chunk_spans: length must be >= 1");
  if (chunk_len < 1) throw ConfigError("chunk_spans: chunk_len must be >= 1");
  const std::size_t k = (t + chunk_len - 1) / chunk_len;
  if (k == 1) return {Span{0, t}};
  std::vector<Span> spans;
  spans.reserve(k);
  const std::size_t slack = t - chunk_len;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t start = (2 * i * slack + (k - 1)) / (2 * (k - 1));
    spans.push_back({start, start + chunk_len});
  }
  return spans;
}

class Encoder {
 public:
  Encoder() = default;

  template <class Rng>
  Encoder(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    embedding_ = Parameter("encoder.embedding", Tensor::normal({cfg_.vocab_size, cfg_.d_e}, 0.1, rng));
    if (cfg_.uses_attention()) {
      const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.d_e));
      query_ = Parameter("encoder.query", Tensor::normal({cfg_.d_e, cfg_.d_e}, s, rng));
      key_ = Parameter("encoder.key", Tensor::normal({cfg_.d_e, cfg_.d_e}, s, rng));
      value_ = Parameter("encoder.value", Tensor::normal({cfg_.d_e, cfg_.d_e}, s, rng));
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  EncoderOutput encode(Graph& g, std::span<const std::size_t> tokens) { return encode_impl(*this, g, tokens); }
  EncoderOutput encode(Graph& g, std::span<const std::size_t> tokens) const { return encode_impl(*this, g, tokens); }

  /// Longest prefix the encoder consumes.
  std::size_t effective_length(std::size_t t) const {
    return cfg_.kind == EncoderKind::chunked ? t : std::min(t, cfg_.max_len);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embedding_};
    if (cfg_.uses_attention()) {
      out.push_back(&query_);
      out.push_back(&key_);
      out.push_back(&value_);
    }
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<Encoder*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  Parameter& embedding() { return embedding_; }
  const Parameter& embedding() const { return embedding_; }
  Parameter& query() { return query_; }
  Parameter& key() { return key_; }
  Parameter& value() { return value_; }
  const Parameter& query() const { return query_; }
  const Parameter& key() const { return key_; }
  const Parameter& value() const { return value_; }

  /// Attention weights of the windowed layer for a single (unchunked) pass.
  BandWeights attention_weights(std::span<const std::size_t> tokens) const {
    if (!cfg_.uses_attention()) throw ConfigError("encoder has no attention layer");
    Graph g;
    BandWeights w;
    encode_one(*this, g, EncoderKind::windowed_attention, tokens.first(std::min(tokens.size(), cfg_.max_len)), &w);
    return w;
  }

 private:
  template <class Self>
  static Var encode_one(Self& self, Graph& g, EncoderKind kind, std::span<const std::size_t> tokens,
                        BandWeights* weights = nullptr) {
    for (auto id : tokens) {
      if (id >= self.cfg_.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(id) + " >= vocab_size " +
                                std::to_string(self.cfg_.vocab_size));
      }
    }
    Var x = gather_rows(g.parameter(self.embedding_), tokens);
    if (kind == EncoderKind::bag) return x;
    Var q = matmul(x, g.parameter(self.query_));
    Var k = matmul(x, g.parameter(self.key_));
    Var v = matmul(x, g.parameter(self.value_));
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(self.cfg_.d_e));
    return add(x, windowed_attention(q, k, v, self.cfg_.window, scale_factor, weights));
  }

  template <class Self>
  static EncoderOutput encode_impl(Self& self, Graph& g, std::span<const std::size_t> tokens) {
    if (tokens.empty()) throw DimensionError("encode: empty token sequence");
    const auto& cfg = self.cfg_;
    EncoderOutput out;
    out.input_length = tokens.size();
    if (cfg.kind != EncoderKind::chunked) {
      const std::size_t t = std::min(tokens.size(), cfg.max_len);
      out.truncated = t < tokens.size();
      out.embeddings = encode_one(self, g, cfg.kind, tokens.first(t));
      out.coverage.assign(t, 1);
      return out;
    }
    const std::size_t t = tokens.size();
    const auto spans = chunk_spans(t, cfg.chunk_len);
    out.coverage.assign(t, 0);
    for (const auto& s : spans)
      for (std::size_t i = s.begin; i < s.end; ++i) ++out.coverage[i];
    if (spans.size() == 1) {
      out.embeddings = encode_one(self, g, cfg.inner_kind, tokens);
      return out;
    }
    std::vector<Var> parts;
    parts.reserve(spans.size());
    for (const auto& s : spans) parts.push_back(encode_one(self, g, cfg.inner_kind, tokens.subspan(s.begin, s.length())));
    out.embeddings = overlap_mean(parts, spans, t);
    return out;
  }

  EncoderConfig cfg_;
  Parameter embedding_;
  Parameter query_;
  Parameter key_;
  Parameter value_;
};

}  // namespace dlac
