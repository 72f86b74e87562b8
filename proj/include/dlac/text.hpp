#pragma once

// Tokenization, vocabularies, label sets and the line-delimited corpus format.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace dlac {

/// Input that cannot be turned into a usable document or record.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyDocumentError : public DataError {
 public:
  using DataError::DataError;
};

/// Malformed line in a line-delimited JSON file.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Character range [begin, end) into the raw text.
struct TextSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const TextSpan&, const TextSpan&) = default;
};

struct Token {
  std::string text;
  TextSpan span;
};

/// Lowercases, splits on every non-alphanumeric character and drops tokens made
/// only of digits. Spans refer to the original text.
inline std::vector<Token> preprocess(std::string_view raw) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < raw.size()) {
    while (i < raw.size() && !std::isalnum(static_cast<unsigned char>(raw[i]))) ++i;
    const std::size_t begin = i;
    bool digits_only = true;
    while (i < raw.size() && std::isalnum(static_cast<unsigned char>(raw[i]))) {
      digits_only = digits_only && std::isdigit(static_cast<unsigned char>(raw[i]));
      ++i;
    }
    if (i == begin || digits_only) continue;
    Token tok{std::string(raw.substr(begin, i - begin)), {begin, i}};
    for (auto& ch : tok.text) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(std::move(tok));
  }
  if (out.empty()) throw EmptyDocumentError("text yields no tokens after preprocessing");
  return out;
}

inline std::vector<std::string> preprocess_tokens(std::string_view raw) {
  std::vector<std::string> out;
  for (auto& t : preprocess(raw)) out.push_back(std::move(t.text));
  return out;
}

// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary() : tokens_{"<pad>", "<unk>"} {}

  /// Tokens seen at least `min_count` times, ordered by descending frequency then lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& documents, std::size_t min_count = 1) {
    std::map<std::string, std::size_t> counts;
    for (const auto& doc : documents)
      for (const auto& tok : doc) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ranked)
      if (n >= min_count) v.add(tok);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
      throw DataError("vocabulary must start with <pad>, <unk>");
    }
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
    if (v.size() != tokens.size()) throw DataError("vocabulary contains duplicate tokens");
    return v;
  }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& tok) {
    if (index_.emplace(tok, tokens_.size()).second) tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

struct Label {
  std::string code;
  std::string description;
  friend bool operator==(const Label&, const Label&) = default;
};

/// Ordered, fixed set of codes; a code's position is its label index.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<Label> labels) : labels_(std::move(labels)) {
    for (std::size_t j = 0; j < labels_.size(); ++j) {
      if (labels_[j].code.empty()) throw DataError("label " + std::to_string(j) + " has an empty code");
      if (labels_[j].description.empty()) throw DataError("label '" + labels_[j].code + "' has an empty description");
      if (!index_.emplace(labels_[j].code, j).second) throw DataError("duplicate label code '" + labels_[j].code + "'");
    }
  }

  std::size_t size() const { return labels_.size(); }
  const Label& operator[](std::size_t j) const { return labels_.at(j); }
  const std::vector<Label>& labels() const { return labels_; }

  std::optional<std::size_t> index_of(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const LabelSet& a, const LabelSet& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<Label> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

/// A corpus record as stored on disk.
struct RawDocument {
  std::string id;
  std::string text;
  std::vector<std::string> codes;
  friend bool operator==(const RawDocument&, const RawDocument&) = default;
};

/// A tokenized document aligned with a vocabulary and a label set.
struct Document {
  std::string id;
  std::string raw_text;
  std::vector<std::size_t> tokens;
  std::vector<TextSpan> token_spans;
  std::vector<std::uint8_t> labels;

  std::size_t length() const { return tokens.size(); }
  std::vector<double> targets() const { return {labels.begin(), labels.end()}; }
};

inline std::vector<std::uint8_t> encode_codes(const std::vector<std::string>& codes, const LabelSet& labels,
                                              const std::string& doc_id) {
  std::vector<std::uint8_t> y(labels.size(), 0);
  for (const auto& c : codes) {
    auto j = labels.index_of(c);
    if (!j) throw DataError("document '" + doc_id + "' has unknown code '" + c + "'");
    y[*j] = 1;
  }
  return y;
}

inline Document make_document(const RawDocument& raw, const Vocabulary& vocab, const LabelSet& labels) {
  Document doc;
  doc.id = raw.id;
  doc.raw_text = raw.text;
  std::vector<Token> toks;
  try {
    toks = preprocess(raw.text);
  } catch (const EmptyDocumentError&) {
    throw EmptyDocumentError("document '" + raw.id + "' yields no tokens after preprocessing");
  }
  for (auto& t : toks) {
    doc.tokens.push_back(vocab.id(t.text));
    doc.token_spans.push_back(t.span);
  }
  doc.labels = encode_codes(raw.codes, labels, raw.id);
  return doc;
}

inline std::vector<Document> make_documents(const std::vector<RawDocument>& raws, const Vocabulary& vocab,
                                            const LabelSet& labels) {
  std::vector<Document> out;
  out.reserve(raws.size());
  for (const auto& r : raws) out.push_back(make_document(r, vocab, labels));
  return out;
}

inline Vocabulary build_vocabulary(const std::vector<RawDocument>& docs, std::size_t min_count = 1) {
  std::vector<std::vector<std::string>> toks;
  toks.reserve(docs.size());
  for (const auto& d : docs) toks.push_back(preprocess_tokens(d.text));
  return Vocabulary::build(toks, min_count);
}

// ---------------------------------------------------------------------------
// Line-delimited JSON I/O

namespace detail {

template <class F>
void for_each_json_line(std::istream& in, F&& f) {
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(no, "record is not a JSON object");
    f(j, no);
  }
}

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field \"") + key + "\"");
  if (!it->is_string()) throw ParseError(line, std::string("field \"") + key + "\" must be a string");
  return it->get<std::string>();
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace detail

inline std::vector<RawDocument> read_corpus(std::istream& in) {
  std::vector<RawDocument> docs;
  detail::for_each_json_line(in, [&](const nlohmann::json& j, std::size_t line) {
    RawDocument d;
    d.id = detail::require_string(j, "id", line);
    d.text = detail::require_string(j, "text", line);
    auto it = j.find("codes");
    if (it == j.end()) throw ParseError(line, "missing field \"codes\"");
    if (!it->is_array()) throw ParseError(line, "field \"codes\" must be an array");
    for (const auto& c : *it) {
      if (!c.is_string()) throw ParseError(line, "codes must be strings");
      d.codes.push_back(c.get<std::string>());
    }
    docs.push_back(std::move(d));
  });
  return docs;
}

inline void write_corpus(std::ostream& out, const std::vector<RawDocument>& docs) {
  for (const auto& d : docs) {
    nlohmann::json j{{"id", d.id}, {"text", d.text}, {"codes", d.codes}};
    out << j.dump() << '\n';
  }
}

inline std::vector<RawDocument> load_corpus(const std::string& path) {
  auto in = detail::open_in(path);
  return read_corpus(in);
}

inline void save_corpus(const std::vector<RawDocument>& docs, const std::string& path) {
  auto out = detail::open_out(path);
  write_corpus(out, docs);
}

inline LabelSet read_labels(std::istream& in) {
  std::vector<Label> labels;
  detail::for_each_json_line(in, [&](const nlohmann::json& j, std::size_t line) {
    labels.push_back({detail::require_string(j, "code", line), detail::require_string(j, "description", line)});
  });
  return LabelSet(std::move(labels));
}

inline void write_labels(std::ostream& out, const LabelSet& labels) {
  for (const auto& l : labels.labels()) out << nlohmann::json{{"code", l.code}, {"description", l.description}}.dump() << '\n';
}

inline LabelSet load_labels(const std::string& path) {
  auto in = detail::open_in(path);
  return read_labels(in);
}

inline void save_labels(const LabelSet& labels, const std::string& path) {
  auto out = detail::open_out(path);
  write_labels(out, labels);
}

// ---------------------------------------------------------------------------

/// Indices into a document list.
struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Deterministic shuffled train/validation/test split. Each part gets
/// round(n * ratio) documents (test takes the remainder).
inline CorpusSplit split_corpus(std::size_t n_docs, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const auto n = static_cast<double>(n_docs);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(n * ratios[0]));
  const std::size_t n_val = std::min(n_docs - std::min(n_train, n_docs),
                                     static_cast<std::size_t>(std::llround(n * ratios[1])));
  if (n_train > n_docs) throw ConfigError("split exceeds corpus size");
  const std::size_t n_test = n_docs - n_train - n_val;
  const std::array<std::size_t, 3> sizes{n_train, n_val, n_test};
  static constexpr std::array<const char*, 3> names{"train", "validation", "test"};
  for (std::size_t k = 0; k < 3; ++k) {
    if (ratios[k] > 0.0 && sizes[k] == 0) {
      throw DataError(std::string("split '") + names[k] + "' would be empty for " + std::to_string(n_docs) +
                      " documents");
    }
  }
  std::vector<std::size_t> order(n_docs);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  CorpusSplit s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

}  // namespace dlac
