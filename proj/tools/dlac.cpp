// dlac: corpus generation, training, evaluation, prediction and the review service.
//
// Every option can also be set through an environment variable named
// DLAC_<OPTION>, e.g. DLAC_PORT=9000 or DLAC_CHECKPOINT=model/checkpoint.json.
// Command-line values take precedence.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 runtime error.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dlac/dlac.hpp"
#include "dlac/http_server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

template <class T>
CLI::Option* opt(CLI::App* app, const std::string& name, T& var, const std::string& help) {
  std::string env = "DLAC_" + name;
  std::transform(env.begin(), env.end(), env.begin(), [](unsigned char c) { return c == '-' ? '_' : std::toupper(c); });
  return app->add_option("--" + name, var, help)->envname(env);
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

std::string join(const std::string& dir, const char* file) { return (fs::path(dir) / file).string(); }

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  auto out = dlac::detail::open_out(path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::size_t m = 20;
  std::size_t n_docs = 1000;
  double mean_len = 400.0;
  std::uint64_t seed = 7;
  std::string out = "corpus";
};

int generate(const GenerateArgs& a) {
  dlac::SyntheticConfig cfg;
  cfg.m = a.m;
  cfg.n_docs = a.n_docs;
  cfg.mean_len = a.mean_len;
  const auto corpus = dlac::generate_synthetic_corpus(cfg, a.seed);
  ensure_dir(a.out);
  dlac::save_corpus(corpus.documents, join(a.out, "corpus.jsonl"));
  dlac::save_labels(corpus.labels, join(a.out, "labels.jsonl"));
  auto kw = dlac::detail::open_out(join(a.out, "keywords.jsonl"));
  for (std::size_t j = 0; j < corpus.labels.size(); ++j)
    kw << json{{"code", corpus.labels[j].code}, {"keywords", corpus.keywords[j]}}.dump() << "\n";
  std::cerr << "wrote " << corpus.documents.size() << " documents, " << corpus.labels.size() << " labels to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string corpus;
  std::string out = "preprocessed";
  std::size_t min_count = 1;
};

int preprocess(const PreprocessArgs& a) {
  const auto docs = dlac::load_corpus(a.corpus);
  const auto vocab = dlac::build_vocabulary(docs, a.min_count);
  ensure_dir(a.out);
  auto toks = dlac::detail::open_out(join(a.out, "tokens.jsonl"));
  for (const auto& d : docs) {
    json tokens = json::array();
    for (const auto& t : dlac::preprocess(d.text)) tokens.push_back(t.text);
    toks << json{{"id", d.id}, {"tokens", tokens}, {"codes", d.codes}}.dump() << "\n";
  }
  auto voc = dlac::detail::open_out(join(a.out, "vocab.txt"));
  for (const auto& t : vocab.tokens()) voc << t << "\n";
  std::cerr << "vocabulary of " << vocab.size() << " tokens over " << docs.size() << " documents\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string labels;
  std::string config;
  std::string out = "model";
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> folds;
  std::optional<std::string> head;
};

int train(const TrainArgs& a) {
  dlac::TrainConfig cfg;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw dlac::DataError("cannot open config '" + a.config + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw dlac::ConfigError("config '" + a.config + "' is not valid JSON: " + e.what());
    }
    cfg = dlac::train_config_from_json(j);
  }
  if (a.lr) cfg.lr = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.folds) cfg.folds = *a.folds;
  if (a.head) cfg.model.head = dlac::head_kind_from_string(*a.head);
  cfg.validate();
  if (cfg.folds < 2) throw dlac::ConfigError("folds must be >= 2");

  const auto raws = dlac::load_corpus(a.corpus);
  const auto labels = dlac::load_labels(a.labels);
  const auto vocab = dlac::build_vocabulary(raws, cfg.min_count);
  const auto docs = dlac::make_documents(raws, vocab, labels);
  if (docs.size() < 3) throw dlac::DataError("corpus needs at least 3 documents");
  const auto split = dlac::split_corpus(docs.size(), dlac::kReferenceSplitRatios, cfg.seed);
  std::vector<std::size_t> pool = split.train;
  pool.insert(pool.end(), split.validation.begin(), split.validation.end());
  if (pool.size() < cfg.folds) throw dlac::DataError("corpus too small for " + std::to_string(cfg.folds) + " folds");
  std::cerr << "training " << to_string(cfg.model.head) << " on " << pool.size() << " documents (" << cfg.folds
            << " folds), testing on " << split.test.size() << "\n";

  auto cv = dlac::cross_validate(docs, pool, split.test, vocab, labels, cfg, [](std::size_t f, const dlac::EpochRecord& r) {
    std::cerr << "fold " << f + 1 << " epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss "
              << r.validation_loss << " val_micro_f1 " << r.validation_micro_f1 << " (" << r.wall_seconds << " s)\n";
  });

  const auto best = cv.best_fold;
  dlac::Checkpoint ck{cfg, dlac::derive_seed(cfg.seed, best + 1), vocab, labels, std::move(cv.folds[best].model),
                      cv.folds[best].fit.history};
  ensure_dir(a.out);
  dlac::save_checkpoint(ck, join(a.out, "checkpoint.json"));

  json history = json::array(), folds = json::array();
  for (std::size_t f = 0; f < cv.folds.size(); ++f) {
    const auto& o = cv.folds[f];
    history.push_back({{"fold", f + 1}, {"best_epoch", o.fit.best_epoch}, {"epochs", dlac::to_json(o.fit.history)}});
    folds.push_back({{"fold", f + 1}, {"validation", dlac::to_json(o.validation)}, {"test", dlac::to_json(o.test)}});
  }
  write_json(history, join(a.out, "history.json"));
  const auto summary = split.test.empty() ? json::object() : dlac::fold_summary_json(cv.test_reports());
  write_json({{"folds", folds}, {"best_fold", best + 1}, {"test_summary", summary}}, join(a.out, "metrics.json"));

  for (const auto& [k, v] : summary.items())
    if (v.value("folds", 0) > 0) std::cout << k << " " << dlac::format_mean_std(v) << "\n";
  std::cerr << "best fold " << best + 1 << ", checkpoint written to " << join(a.out, "checkpoint.json") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string corpus;
  std::optional<double> threshold;
  std::string out;
};

int eval(const EvalArgs& a) {
  const auto ck = dlac::load_checkpoint(a.checkpoint);
  const auto docs = dlac::make_documents(dlac::load_corpus(a.corpus), ck.vocabulary, ck.labels);
  if (docs.empty()) throw dlac::DataError("corpus '" + a.corpus + "' is empty");
  const double thr = a.threshold.value_or(ck.config.threshold);
  const auto ev = dlac::evaluate(ck.model, docs, dlac::all_indices(docs.size()));
  auto report = dlac::to_json(dlac::make_report(ev.batch, dlac::label_codes(ck.labels), thr));
  report["loss"] = ev.loss;
  write_json(report, a.out);
  return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string corpus;
  std::optional<double> threshold;
  std::size_t top_k = 10;
  bool all_labels = false;
  std::string out;
};

int predict(const PredictArgs& a) {
  const auto ck = dlac::load_checkpoint(a.checkpoint);
  const double thr = a.threshold.value_or(ck.config.threshold);
  if (!(thr > 0.0 && thr < 1.0)) throw dlac::ConfigError("threshold must lie in (0, 1)");
  if (a.top_k < 1) throw dlac::ConfigError("top-k must be >= 1");
  auto raws = dlac::load_corpus(a.corpus);
  std::ofstream file;
  if (!a.out.empty() && a.out != "-") file = dlac::detail::open_out(a.out);
  std::ostream& out = file.is_open() ? static_cast<std::ostream&>(file) : std::cout;
  for (auto& raw : raws) {
    raw.codes.clear();
    const auto doc = dlac::make_document(raw, ck.vocabulary, ck.labels);
    const auto p = ck.model.predict(doc);
    const auto predicted = dlac::predict_labels(p.probs, thr);
    std::vector<std::size_t> order(p.probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return p.probs[x] > p.probs[y]; });
    json codes = json::array();
    for (auto j : order) {
      if (!a.all_labels && !predicted[j]) continue;
      json item{{"code", ck.labels[j].code}, {"probability", p.probs[j]}, {"predicted", predicted[j] == 1}};
      item["explanation"] = p.attention ? dlac::to_json(dlac::build_explanation(doc, p, ck.labels, j, a.top_k), &doc.raw_text)
                                        : json(nullptr);
      codes.push_back(std::move(item));
    }
    out << json{{"id", doc.id}, {"truncated", p.truncated}, {"threshold", thr}, {"codes", codes}}.dump() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

int serve(const dlac::ServiceConfig& cfg) {
  if (cfg.port < 0 || cfg.port > 65535) throw dlac::ConfigError("port must lie in [0, 65535]");
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0)) throw dlac::ConfigError("threshold must lie in (0, 1)");
  dlac::ReviewService service(cfg);
  service.load_model(dlac::load_checkpoint(cfg.checkpoint_path));
  if (!cfg.corpus_path.empty()) service.load_corpus(dlac::load_corpus(cfg.corpus_path));
  auto server = dlac::make_http_server(service);
  std::cerr << "serving on http://" << cfg.host << ":" << cfg.port << "\n";
  if (!server->listen(cfg.host, cfg.port)) {
    std::cerr << "error: cannot listen on " << cfg.host << ":" << cfg.port << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlac: description-based label attention classifier"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic planted-evidence corpus");
  opt(g, "m", gen.m, "number of labels")->capture_default_str();
  opt(g, "n-docs", gen.n_docs, "number of documents")->capture_default_str();
  opt(g, "mean-len", gen.mean_len, "mean document length in tokens")->capture_default_str();
  opt(g, "seed", gen.seed, "generator seed")->capture_default_str();
  opt(g, "out", gen.out, "output directory (corpus.jsonl, labels.jsonl, keywords.jsonl)")->capture_default_str();

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "tokenize a corpus and build its vocabulary");
  opt(p, "corpus", pre.corpus, "corpus file (JSON lines)")->required();
  opt(p, "out", pre.out, "output directory (tokens.jsonl, vocab.txt)")->capture_default_str();
  opt(p, "min-count", pre.min_count, "minimum token frequency")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "k-fold training; writes checkpoint, history and metrics");
  opt(t, "corpus", tr.corpus, "corpus file (JSON lines)")->required();
  opt(t, "labels", tr.labels, "labels file (JSON lines)")->required();
  opt(t, "config", tr.config, "training config (JSON)");
  opt(t, "out", tr.out, "output directory")->capture_default_str();
  opt(t, "lr", tr.lr, "learning rate override");
  opt(t, "seed", tr.seed, "seed override");
  opt(t, "epochs", tr.epochs, "epoch cap override");
  opt(t, "folds", tr.folds, "fold count override");
  opt(t, "head", tr.head, "classifier head override")->check(CLI::IsMember({"dlac", "lrc"}));

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "metrics report for a checkpoint on a labelled corpus");
  opt(e, "checkpoint", ev.checkpoint, "checkpoint file")->required();
  opt(e, "corpus", ev.corpus, "corpus file (JSON lines)")->required();
  opt(e, "threshold", ev.threshold, "decision threshold (default: from checkpoint)");
  opt(e, "out", ev.out, "report file (default: stdout)");

  PredictArgs pr;
  auto* q = app.add_subcommand("predict", "per-document predictions with attention evidence (JSON lines)");
  opt(q, "checkpoint", pr.checkpoint, "checkpoint file")->required();
  opt(q, "corpus", pr.corpus, "corpus file (JSON lines); codes are ignored")->required();
  opt(q, "threshold", pr.threshold, "decision threshold (default: from checkpoint)");
  opt(q, "top-k", pr.top_k, "evidence tokens per code")->capture_default_str();
  q->add_flag("--all-labels", pr.all_labels, "emit every label, not only predicted ones");
  opt(q, "out", pr.out, "output file (default: stdout)");

  dlac::ServiceConfig sc;
  auto* s = app.add_subcommand("serve", "HTTP review service");
  opt(s, "checkpoint", sc.checkpoint_path, "checkpoint file")->required();
  opt(s, "corpus", sc.corpus_path, "corpus served under /documents");
  opt(s, "host", sc.host, "listen address")->capture_default_str();
  opt(s, "port", sc.port, "listen port")->capture_default_str();
  opt(s, "store", sc.decision_store_path, "decision store (JSON lines, append-only)")->capture_default_str();
  opt(s, "threshold", sc.threshold, "default decision threshold")->capture_default_str();
  opt(s, "top-k", sc.top_k, "default evidence tokens per code")->capture_default_str();
  opt(s, "max-page-size", sc.max_page_size, "upper bound on /documents page_size")->capture_default_str();
  opt(s, "cors-origin", sc.cors_origin, "Access-Control-Allow-Origin value")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return generate(gen);
    if (*p) return preprocess(pre);
    if (*t) return train(tr);
    if (*e) return eval(ev);
    if (*q) return predict(pr);
    if (*s) return serve(sc);
  } catch (const dlac::ConfigError& err) {
    std::cerr << "configuration error: " << err.what() << "\n";
    return kUsage;
  } catch (const dlac::DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
