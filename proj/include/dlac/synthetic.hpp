#pragma once

// Planted-evidence corpus generator. Every label owns a private set of keywords
// that also appear in its description; a document carries a label exactly when
// at least one of that label's keywords was planted in it.

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dlac/tensor.hpp"
#include "dlac/text.hpp"

namespace dlac {

struct SyntheticConfig {
  std::size_t m = 20;
  std::size_t n_docs = 1000;
  double mean_len = 400.0;
  double len_std = 0.0;  // 0 means mean_len / 2
  std::size_t min_len = 50;
  std::size_t max_len = 8000;
  std::size_t keywords_per_label = 3;
  std::size_t min_plants = 1;  // occurrences planted per assigned label
  std::size_t max_plants = 2;
  std::size_t noise_vocab_size = 2000;
  double extra_labels_mean = 2.0;  // labels per doc = 1 + Poisson(extra_labels_mean), capped at m
  double numeric_token_rate = 0.02;  // digit-only tokens mixed into the text; removed by preprocessing
  /// Optional explicit keyword lists, one per label; must be pairwise disjoint.
  std::vector<std::vector<std::string>> keywords;
};

/// Position of a planted keyword in the preprocessed token stream.
struct PlantedEvidence {
  std::size_t label = 0;
  std::size_t position = 0;
  friend bool operator==(const PlantedEvidence&, const PlantedEvidence&) = default;
};

struct SyntheticCorpus {
  LabelSet labels;
  std::vector<RawDocument> documents;
  std::vector<std::vector<std::string>> keywords;   // per label
  std::vector<std::vector<PlantedEvidence>> planted;  // per document
  std::vector<std::string> noise_words;
};

namespace detail {

inline std::string pseudo_word(std::size_t index) {
  static constexpr std::array<const char*, 24> kSyllables{"ba", "ke", "lo", "mi", "nu", "ra", "si", "to",
                                                           "ve", "zu", "da", "fo", "gi", "ha", "ju", "pe",
                                                           "qua", "ri", "so", "ti", "wo", "xe", "ya", "cor"};
  std::string w;
  std::size_t x = index;
  do {
    w += kSyllables[x % kSyllables.size()];
    x /= kSyllables.size();
  } while (x > 0);
  return w;
}

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace detail

inline void validate(const SyntheticConfig& c) {
  if (c.m < 2) throw ConfigError("synthetic corpus needs m >= 2 labels");
  if (c.min_len < 50 || c.max_len > 8000 || c.min_len > c.max_len) {
    throw ConfigError("document length range must lie within [50, 8000]");
  }
  if (c.mean_len < static_cast<double>(c.min_len) || c.mean_len > static_cast<double>(c.max_len)) {
    throw ConfigError("mean document length outside the length range");
  }
  if (c.keywords.empty() && c.keywords_per_label == 0) throw ConfigError("keywords_per_label must be >= 1");
  if (c.min_plants == 0 || c.min_plants > c.max_plants) throw ConfigError("invalid planting range");
  if (c.noise_vocab_size < 10) throw ConfigError("noise vocabulary too small");
  if (c.extra_labels_mean < 0.0) throw ConfigError("extra_labels_mean must be non-negative");
  if (!c.keywords.empty()) {
    if (c.keywords.size() != c.m) throw ConfigError("explicit keywords must list one set per label");
    std::set<std::string> seen;
    for (std::size_t j = 0; j < c.keywords.size(); ++j) {
      if (c.keywords[j].empty()) throw ConfigError("label " + std::to_string(j) + " has no evidence keywords");
      for (const auto& w : c.keywords[j]) {
        auto toks = preprocess_tokens(w);
        if (toks.size() != 1 || toks[0] != w) {
          throw ConfigError("evidence keyword '" + w + "' is not a single lowercase token");
        }
        if (!seen.insert(w).second) throw ConfigError("evidence vocabularies overlap on keyword '" + w + "'");
      }
    }
  }
  const std::size_t n_kw = c.keywords.empty() ? c.m * c.keywords_per_label : 0;
  if (n_kw + c.noise_vocab_size > 24 * 24 * 24 * 24) throw ConfigError("requested vocabulary too large");
}

/// Pure function of (config, seed).
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  SyntheticCorpus out;

  // Word pool: keywords and noise words are disjoint slices of one shuffled pool.
  auto rng = detail::derived_rng(seed, 0xFFFFFFFFull);
  const std::size_t n_kw = cfg.keywords.empty() ? cfg.m * cfg.keywords_per_label : 0;
  std::vector<std::size_t> pool(n_kw + cfg.noise_vocab_size);
  // Skip the first 24 single-syllable words so every pseudo-word has >= 4 letters.
  std::iota(pool.begin(), pool.end(), std::size_t{24});
  std::shuffle(pool.begin(), pool.end(), rng);
  std::set<std::string> reserved;
  if (cfg.keywords.empty()) {
    out.keywords.resize(cfg.m);
    for (std::size_t j = 0; j < cfg.m; ++j)
      for (std::size_t k = 0; k < cfg.keywords_per_label; ++k)
        out.keywords[j].push_back(detail::pseudo_word(pool[j * cfg.keywords_per_label + k]));
  } else {
    out.keywords = cfg.keywords;
  }
  for (const auto& ks : out.keywords) reserved.insert(ks.begin(), ks.end());
  for (std::size_t i = n_kw; i < pool.size(); ++i) {
    auto w = detail::pseudo_word(pool[i]);
    if (!reserved.count(w)) out.noise_words.push_back(std::move(w));
  }

  static constexpr std::array<const char*, 6> kQualifiers{"unspecified", "chronic", "acute", "other", "disorder",
                                                          "condition"};
  std::vector<Label> labels;
  for (std::size_t j = 0; j < cfg.m; ++j) {
    char code[16];
    std::snprintf(code, sizeof code, "S%03zu.%zu", 100 + j, j % 10);
    std::string desc = kQualifiers[j % kQualifiers.size()];
    for (const auto& w : out.keywords[j]) desc += " " + w;
    desc[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(desc[0])));
    labels.push_back({code, desc});
  }
  out.labels = LabelSet(std::move(labels));

  const double len_std = cfg.len_std > 0.0 ? cfg.len_std : cfg.mean_len / 2.0;
  const double sigma2 = std::log1p((len_std * len_std) / (cfg.mean_len * cfg.mean_len));
  const double mu = std::log(cfg.mean_len) - sigma2 / 2.0;

  out.documents.reserve(cfg.n_docs);
  out.planted.reserve(cfg.n_docs);
  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    auto drng = detail::derived_rng(seed, d);
    std::lognormal_distribution<double> len_dist(mu, std::sqrt(sigma2));
    const auto len = static_cast<std::size_t>(std::clamp<double>(
        std::round(len_dist(drng)), static_cast<double>(cfg.min_len), static_cast<double>(cfg.max_len)));

    std::poisson_distribution<int> extra(cfg.extra_labels_mean);
    const std::size_t n_labels = std::min(cfg.m, 1 + static_cast<std::size_t>(extra(drng)));
    std::vector<std::size_t> label_ids(cfg.m);
    std::iota(label_ids.begin(), label_ids.end(), std::size_t{0});
    std::shuffle(label_ids.begin(), label_ids.end(), drng);
    label_ids.resize(n_labels);
    std::sort(label_ids.begin(), label_ids.end());

    std::uniform_int_distribution<std::size_t> noise_pick(0, out.noise_words.size() - 1);
    std::vector<std::string> words(len);
    for (auto& w : words) w = out.noise_words[noise_pick(drng)];

    // Planted positions are distinct; a label's plant count is capped by the length.
    std::vector<std::size_t> slots(len);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    std::shuffle(slots.begin(), slots.end(), drng);
    std::size_t next_slot = 0;
    std::vector<PlantedEvidence> planted;
    std::uniform_int_distribution<std::size_t> plants(cfg.min_plants, cfg.max_plants);
    for (auto j : label_ids) {
      const std::size_t count = plants(drng);
      std::uniform_int_distribution<std::size_t> kw_pick(0, out.keywords[j].size() - 1);
      for (std::size_t c = 0; c < count && next_slot < len; ++c) {
        const std::size_t pos = slots[next_slot++];
        words[pos] = out.keywords[j][kw_pick(drng)];
        planted.push_back({j, pos});
      }
    }
    std::sort(planted.begin(), planted.end(),
              [](const auto& a, const auto& b) { return a.position < b.position; });

    // Render text: sentences with capitalized first words, punctuation and numbers.
    std::string text;
    std::bernoulli_distribution numeric(cfg.numeric_token_rate);
    std::uniform_int_distribution<int> number(1, 999);
    std::uniform_int_distribution<int> sentence_len(6, 18);
    int until_stop = sentence_len(drng);
    bool sentence_start = true;
    for (std::size_t i = 0; i < len; ++i) {
      if (!text.empty()) text += ' ';
      if (numeric(drng)) text += std::to_string(number(drng)) + ' ';
      std::string w = words[i];
      if (sentence_start) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      text += w;
      sentence_start = false;
      if (--until_stop == 0 || i + 1 == len) {
        text += '.';
        sentence_start = true;
        until_stop = sentence_len(drng);
      } else if (until_stop % 5 == 0) {
        text += ',';
      }
    }

    RawDocument doc;
    char id[32];
    std::snprintf(id, sizeof id, "doc-%06zu", d);
    doc.id = id;
    doc.text = std::move(text);
    for (auto j : label_ids) doc.codes.push_back(out.labels[j].code);
    out.documents.push_back(std::move(doc));
    out.planted.push_back(std::move(planted));
  }
  return out;
}

/// Settings whose length and label-count statistics follow the MIMIC-III-50 profile
/// (mean 1612 words, std 788, range 105..7567, 5.77 codes per summary).
inline SyntheticConfig clinical_profile_config(std::size_t n_docs = 2000) {
  SyntheticConfig c;
  c.m = 50;
  c.n_docs = n_docs;
  c.mean_len = 1612.0;
  c.len_std = 788.0;
  c.min_len = 105;
  c.max_len = 7567;
  c.extra_labels_mean = 4.77;
  return c;
}

}  // namespace dlac
