// Generates a small planted-evidence corpus, trains a DLAC model on it and
// prints the predicted codes of one held-out document with their top evidence.

#include <iomanip>
#include <iostream>

#include "dlac/dlac.hpp"

int main() {
  using namespace dlac;
  SyntheticConfig sc;
  sc.m = 8;
  sc.n_docs = 400;
  sc.mean_len = 150;
  const auto corpus = generate_synthetic_corpus(sc, 1);
  const auto vocab = build_vocabulary(corpus.documents);
  const auto docs = make_documents(corpus.documents, vocab, corpus.labels);
  const auto split = split_corpus(docs.size(), {0.8, 0.1, 0.1}, 1);

  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 6;
  cfg.model.encoder.d_e = 32;
  cfg.model.d_a = 24;
  Model model(cfg.model, vocab, corpus.labels, 1);
  fit(model, docs, split.train, split.validation, cfg, 2, [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << "  train loss " << std::fixed << std::setprecision(4) << r.train_loss
              << "  validation micro-F1 " << r.validation_micro_f1 << "\n";
  });

  const auto report = make_report(evaluate(model, docs, split.test).batch, label_codes(corpus.labels));
  std::cout << "test micro-F1 " << report.f1_micro << ", macro-AUC " << report.auc_macro.value_or(0.0) << "\n\n";

  const auto& doc = docs[split.test.front()];
  std::cout << doc.id << " true codes:";
  for (std::size_t j = 0; j < doc.labels.size(); ++j)
    if (doc.labels[j]) std::cout << " " << corpus.labels[j].code;
  std::cout << "\n";
  for (const auto& ex : explain_document(model, doc, corpus.labels, 0.5, 3)) {
    std::cout << "  " << ex.code << "  p=" << ex.probability << "  evidence:";
    for (const auto& e : ex.evidence)
      std::cout << " " << doc.raw_text.substr(e.span.begin, e.span.end - e.span.begin) << "(" << e.intensity << ")";
    std::cout << "\n";
  }
}
