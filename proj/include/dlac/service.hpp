#pragma once

// Review service: inference with explanations over a loaded checkpoint, a
// browsable corpus, and an append-only store of reviewer decisions.
// Handlers map a request onto {status, JSON body} and carry no HTTP types;
// http_server.hpp binds them to routes.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlac/checkpoint.hpp"
#include "dlac/explain.hpp"
#include "dlac/text.hpp"

namespace dlac {

/// Train/validation/test proportions of the 8066 / 1573 / 1729 clinical split.
inline constexpr std::array<double, 3> kReferenceSplitRatios{8066.0 / 11368.0, 1573.0 / 11368.0, 1729.0 / 11368.0};

struct ServiceConfig {
  std::string checkpoint_path;
  std::string corpus_path;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string decision_store_path = "decisions.jsonl";
  double threshold = 0.5;
  std::size_t top_k = 10;
  std::size_t max_page_size = 100;
  std::string cors_origin = "*";
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

inline Response error_response(int status, const std::string& message) {
  return {status, {{"error", message}}};
}

struct ReviewDecision {
  std::string document_id;
  std::string code;
  std::string verdict;  // "accepted" | "rejected"
  std::string reviewer;
  double probability = 0.0;
  double threshold = 0.5;
  std::string timestamp;  // ISO-8601 UTC, milliseconds
};

inline nlohmann::json to_json(const ReviewDecision& d) {
  return {{"document_id", d.document_id}, {"code", d.code},         {"verdict", d.verdict},    {"reviewer", d.reviewer},
          {"probability", d.probability}, {"threshold", d.threshold}, {"timestamp", d.timestamp}};
}

inline ReviewDecision decision_from_json(const nlohmann::json& j) {
  return {j.at("document_id").get<std::string>(), j.at("code").get<std::string>(),   j.at("verdict").get<std::string>(),
          j.at("reviewer").get<std::string>(),    j.at("probability").get<double>(), j.at("threshold").get<double>(),
          j.at("timestamp").get<std::string>()};
}

inline bool valid_verdict(const std::string& v) { return v == "accepted" || v == "rejected"; }

/// Append-only JSONL file. Each record is written with a single O_APPEND write
/// followed by fsync; records survive restarts and are returned in insertion order.
class DecisionStore {
 public:
  explicit DecisionStore(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    std::size_t no = 0;
    while (in && std::getline(in, line)) {
      ++no;
      if (line.empty()) continue;
      try {
        records_.push_back(decision_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(no, std::string("decision store '") + path_ + "': " + e.what());
      }
    }
    if (!records_.empty()) last_ms_ = parse_ms(records_.back().timestamp);
  }

  /// Assigns a strictly increasing timestamp and persists the record.
  ReviewDecision append(ReviewDecision d) {
    std::unique_lock lock(mutex_);
    const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    last_ms_ = std::max<long long>(now, last_ms_ + 1);
    d.timestamp = format_ms(last_ms_);
    const std::string line = to_json(d).dump() + "\n";
    const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw DataError("cannot open decision store '" + path_ + "'");
    const auto written = ::write(fd, line.data(), line.size());
    const bool ok = written == static_cast<ssize_t>(line.size()) && ::fsync(fd) == 0;
    ::close(fd);
    if (!ok) throw DataError("failed to append to decision store '" + path_ + "'");
    records_.push_back(d);
    return d;
  }

  std::vector<ReviewDecision> for_document(const std::string& id) const {
    std::shared_lock lock(mutex_);
    std::vector<ReviewDecision> out;
    for (const auto& r : records_)
      if (r.document_id == id) out.push_back(r);
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
  }

  const std::string& path() const { return path_; }

  static std::string format_ms(long long ms) {
    const std::time_t secs = static_cast<std::time_t>(ms / 1000);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03lldZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, ms % 1000);
    return buf;
  }

  static long long parse_ms(const std::string& ts) {
    std::tm tm{};
    int millis = 0;
    if (std::sscanf(ts.c_str(), "%d-%d-%dT%d:%d:%d.%dZ", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour, &tm.tm_min,
                    &tm.tm_sec, &millis) != 7) {
      return 0;
    }
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    return static_cast<long long>(timegm(&tm)) * 1000 + millis;
  }

 private:
  std::string path_;
  mutable std::shared_mutex mutex_;
  std::vector<ReviewDecision> records_;
  long long last_ms_ = 0;
};

class ReviewService {
 public:
  explicit ReviewService(ServiceConfig cfg)
      : cfg_(std::move(cfg)), store_(std::make_unique<DecisionStore>(cfg_.decision_store_path)) {}

  const ServiceConfig& config() const { return cfg_; }

  /// Installs the model once; the service never mutates it afterwards.
  void load_model(Checkpoint ck) {
    if (ckpt_) throw std::logic_error("model already loaded");
    ckpt_ = std::make_shared<const Checkpoint>(std::move(ck));
  }

  /// Corpus documents, ordered by id. Split membership follows the reference
  /// ratios with the checkpoint seed (or `split_seed` when given).
  void load_corpus(std::vector<RawDocument> docs, std::optional<std::uint64_t> split_seed = std::nullopt) {
    std::vector<std::string> split_of(docs.size(), "train");
    const std::uint64_t seed = split_seed ? *split_seed : (ckpt_ ? ckpt_->config.seed : 0);
    if (docs.size() >= 3) {
      auto s = split_corpus(docs.size(), kReferenceSplitRatios, seed);
      for (auto i : s.validation) split_of[i] = "validation";
      for (auto i : s.test) split_of[i] = "test";
    }
    docs_.clear();
    for (std::size_t i = 0; i < docs.size(); ++i) docs_.push_back({std::move(docs[i]), split_of[i]});
    std::sort(docs_.begin(), docs_.end(), [](const auto& a, const auto& b) { return a.raw.id < b.raw.id; });
    index_.clear();
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      if (!index_.emplace(docs_[i].raw.id, i).second) throw DataError("duplicate document id '" + docs_[i].raw.id + "'");
    }
  }

  bool model_loaded() const { return ckpt_ != nullptr; }

  Response health() const {
    if (!ckpt_) return {503, {{"status", "loading"}}};
    return {200,
            {{"status", "ok"},
             {"checkpoint_version", kCheckpointVersion},
             {"m", ckpt_->labels.size()},
             {"encoder_kind", to_string(ckpt_->config.model.encoder.kind)},
             {"head", to_string(ckpt_->config.model.head)}}};
  }

  Response predict(const std::string& body) const {
    if (!ckpt_) return error_response(503, "model not loaded");
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error&) {
      return error_response(400, "request body is not valid JSON");
    }
    if (!req.is_object()) return error_response(400, "request body must be a JSON object");
    double threshold = cfg_.threshold;
    std::size_t top_k = cfg_.top_k;
    bool all_labels = false;
    try {
      if (req.contains("threshold")) threshold = req.at("threshold").get<double>();
      if (req.contains("top_k")) top_k = req.at("top_k").get<std::size_t>();
      if (req.contains("all_labels")) all_labels = req.at("all_labels").get<bool>();
    } catch (const nlohmann::json::exception&) {
      return error_response(400, "threshold must be a number, top_k a non-negative integer, all_labels a boolean");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) return error_response(400, "threshold must lie in (0, 1)");
    if (top_k < 1) return error_response(400, "top_k must be >= 1");

    RawDocument raw;
    const bool by_id = req.contains("document_id");
    if (by_id) {
      if (!req["document_id"].is_string()) return error_response(400, "document_id must be a string");
      auto it = index_.find(req["document_id"].get<std::string>());
      if (it == index_.end()) return error_response(404, "unknown document '" + req["document_id"].get<std::string>() + "'");
      raw = docs_[it->second].raw;
      raw.codes.clear();
    } else if (req.contains("text")) {
      if (!req["text"].is_string()) return error_response(400, "text must be a string");
      raw.id = "request";
      raw.text = req["text"].get<std::string>();
    } else {
      return error_response(400, "request needs either \"text\" or \"document_id\"");
    }

    Document doc;
    try {
      doc = make_document(raw, ckpt_->vocabulary, ckpt_->labels);
    } catch (const EmptyDocumentError&) {
      return error_response(400, "text contains no tokens");
    }
    const auto prediction = ckpt_->model.predict(doc);
    const auto predicted = predict_labels(prediction.probs, threshold);
    std::vector<std::size_t> order(prediction.probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return prediction.probs[a] > prediction.probs[b]; });
    nlohmann::json codes = nlohmann::json::array();
    for (auto j : order) {
      if (!all_labels && !predicted[j]) continue;
      nlohmann::json item{{"code", ckpt_->labels[j].code},
                          {"description", ckpt_->labels[j].description},
                          {"probability", prediction.probs[j]},
                          {"predicted", predicted[j] == 1}};
      if (prediction.attention) {
        item["explanation"] = to_json(build_explanation(doc, prediction, ckpt_->labels, j, top_k), &doc.raw_text);
      } else {
        item["explanation"] = nullptr;
      }
      codes.push_back(std::move(item));
    }
    nlohmann::json out{{"codes", codes},
                       {"truncated", prediction.truncated},
                       {"threshold", threshold},
                       {"tokens", doc.length()},
                       {"encoded_tokens", prediction.encoded_length}};
    if (by_id) out["document_id"] = doc.id;
    return {200, out};
  }

  Response list_documents(const std::string& split, std::size_t page, std::size_t page_size) const {
    if (split != "all" && split != "train" && split != "validation" && split != "test") {
      return error_response(400, "split must be one of all, train, validation, test");
    }
    if (page_size < 1) return error_response(400, "page_size must be >= 1");
    page_size = std::min(page_size, cfg_.max_page_size);
    std::vector<const Entry*> selected;
    for (const auto& e : docs_)
      if (split == "all" || e.split == split) selected.push_back(&e);
    nlohmann::json items = nlohmann::json::array();
    const std::size_t begin = page * page_size;
    for (std::size_t i = begin; i < selected.size() && i < begin + page_size; ++i) {
      const auto& raw = selected[i]->raw;
      items.push_back({{"id", raw.id},
                       {"split", selected[i]->split},
                       {"characters", raw.text.size()},
                       {"codes", raw.codes.size()},
                       {"preview", raw.text.substr(0, 120)}});
    }
    return {200, {{"split", split}, {"page", page}, {"page_size", page_size}, {"total", selected.size()}, {"documents", items}}};
  }

  Response get_document(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return error_response(404, "unknown document '" + id + "'");
    const auto& e = docs_[it->second];
    return {200, {{"id", e.raw.id}, {"text", e.raw.text}, {"codes", e.raw.codes}, {"split", e.split}}};
  }

  Response post_decision(const std::string& body) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error&) {
      return error_response(400, "request body is not valid JSON");
    }
    for (const char* key : {"document_id", "code", "verdict", "reviewer"}) {
      if (!req.is_object() || !req.contains(key) || !req[key].is_string()) {
        return error_response(400, std::string("field \"") + key + "\" must be a string");
      }
    }
    ReviewDecision d;
    d.document_id = req["document_id"].get<std::string>();
    d.code = req["code"].get<std::string>();
    d.verdict = req["verdict"].get<std::string>();
    d.reviewer = req["reviewer"].get<std::string>();
    if (!valid_verdict(d.verdict)) return error_response(400, "verdict must be \"accepted\" or \"rejected\"");
    if (d.reviewer.empty()) return error_response(400, "reviewer must be non-empty");
    auto it = index_.find(d.document_id);
    if (it == index_.end()) return error_response(404, "unknown document '" + d.document_id + "'");
    if (!ckpt_) return error_response(503, "model not loaded");
    auto label = ckpt_->labels.index_of(d.code);
    if (!label) return error_response(404, "unknown code '" + d.code + "'");
    RawDocument raw = docs_[it->second].raw;
    raw.codes.clear();
    const auto doc = make_document(raw, ckpt_->vocabulary, ckpt_->labels);
    d.probability = ckpt_->model.predict(doc).probs[*label];
    d.threshold = cfg_.threshold;
    return {201, to_json(store_->append(std::move(d)))};
  }

  Response get_decisions(const std::string& document_id) const {
    if (document_id.empty()) return error_response(400, "document_id query parameter is required");
    nlohmann::json items = nlohmann::json::array();
    for (const auto& d : store_->for_document(document_id)) items.push_back(to_json(d));
    return {200, {{"document_id", document_id}, {"decisions", items}}};
  }

  const DecisionStore& store() const { return *store_; }

 private:
  struct Entry {
    RawDocument raw;
    std::string split;
  };

  ServiceConfig cfg_;
  std::shared_ptr<const Checkpoint> ckpt_;
  std::vector<Entry> docs_;
  std::map<std::string, std::size_t> index_;
  std::unique_ptr<DecisionStore> store_;
};

}  // namespace dlac
