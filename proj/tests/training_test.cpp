#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "dlac/checkpoint.hpp"
#include "dlac/synthetic.hpp"
#include "dlac/training.hpp"

namespace dlac {
namespace {

struct Toy {
  SyntheticCorpus corpus;
  Vocabulary vocab;
  std::vector<Document> docs;
};

Toy toy_corpus(std::size_t n_docs, std::size_t m = 4, double mean_len = 60, std::uint64_t seed = 7) {
  Toy t;
  t.corpus = generate_synthetic_corpus(
      SyntheticConfig{.m = m, .n_docs = n_docs, .mean_len = mean_len, .noise_vocab_size = 200}, seed);
  t.vocab = build_vocabulary(t.corpus.documents);
  t.docs = make_documents(t.corpus.documents, t.vocab, t.corpus.labels);
  return t;
}

TrainConfig small_config() {
  TrainConfig c;
  c.model.encoder.d_e = 12;
  c.model.d_a = 8;
  c.batch_size = 8;
  c.epochs = 3;
  c.folds = 3;
  c.lr = 1e-2;
  return c;
}

TEST(BceLoss, AnalyticValues) {
  Graph g;
  auto half = bce_loss(g.constant(Tensor::vector(4, 0.5)), std::vector<double>{1, 0, 1, 0});
  EXPECT_NEAR(half.value().item(), std::log(2.0), 1e-15);
  auto perfect = bce_loss(g.constant(Tensor({3}, std::vector<double>{1.0, 0.0, 1.0})), std::vector<double>{1, 0, 1});
  EXPECT_LE(perfect.value().item(), -std::log(1.0 - 1e-7) + 1e-18);
  EXPECT_THROW(bce_loss(g.constant(Tensor::vector(3, 0.5)), std::vector<double>{1, 0}), DimensionError);
}

TEST(BceLoss, MatchesDirectSum) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor p = Tensor::vector(7);
    std::vector<double> y(7);
    std::vector<std::uint8_t> yb(7);
    double ref = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      p[j] = u(rng);
      yb[j] = (rep + j) % 2;
      y[j] = yb[j];
      ref += y[j] * std::log(p[j]) + (1 - y[j]) * std::log(1 - p[j]);
    }
    ref = -ref / 7.0;
    Graph g;
    EXPECT_NEAR(bce_loss(g.constant(p), y).value().item(), ref, 1e-12);
    EXPECT_NEAR(bce_value(p.data(), yb), ref, 1e-12);
  }
}

TEST(BceLoss, LogitGradientIsResidualOverM) {
  Parameter z("z", Tensor({3}, std::vector<double>{0.3, -1.2, 2.0}));
  const std::vector<double> y{1, 0, 0};
  Graph g;
  auto probs = sigmoid(g.parameter(z));
  const auto p = probs.value();
  g.backward(bce_loss(probs, y));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(z.grad[j], (p[j] - y[j]) / 3.0, 1e-15);
}

TEST(KFold, BalancedPartition) {
  auto f10 = kfold_split(10, 5, 1);
  for (const auto& f : f10) {
    EXPECT_EQ(f.validation.size(), 2u);
    EXPECT_EQ(f.train.size(), 8u);
  }
  auto f11 = kfold_split(11, 5, 1);
  std::vector<std::size_t> sizes;
  for (const auto& f : f11) sizes.push_back(f.validation.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 2, 2, 2, 2}));
  EXPECT_THROW(kfold_split(3, 5, 1), ConfigError);
  EXPECT_EQ(kfold_split(20, 4, 9)[2].validation, kfold_split(20, 4, 9)[2].validation);
}

TEST(KFold, PartitionPropertySweep) {
  for (std::size_t k : {2u, 3u, 5u, 7u}) {
    for (std::size_t n = k; n <= 1000; n += (n < 60 ? 1 : 37)) {
      auto folds = kfold_split(n, k, n * 31 + k);
      std::vector<int> seen(n, 0);
      std::size_t lo = n, hi = 0;
      for (const auto& f : folds) {
        lo = std::min(lo, f.validation.size());
        hi = std::max(hi, f.validation.size());
        ASSERT_EQ(f.train.size() + f.validation.size(), n);
        std::set<std::size_t> tr(f.train.begin(), f.train.end());
        for (auto i : f.validation) {
          ++seen[i];
          ASSERT_FALSE(tr.count(i));
        }
      }
      ASSERT_LE(hi - lo, 1u);
      ASSERT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; })) << n << "/" << k;
    }
  }
}

TEST(EarlyStop, Rules) {
  auto improving = early_stop({0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, 2);
  EXPECT_FALSE(improving.stop);
  EXPECT_EQ(improving.best_epoch, 6u);
  EXPECT_FALSE(early_stop({0.5, 0.5}, 2).stop);
  auto flat = early_stop({0.5, 0.5, 0.5}, 2);
  EXPECT_TRUE(flat.stop);
  EXPECT_EQ(flat.best_epoch, 1u);
  EXPECT_FALSE(early_stop({0.5, 0.7, 0.6, 0.6}, 3).stop);
  auto traced = early_stop({0.5, 0.7, 0.6, 0.6, 0.6}, 3);
  EXPECT_TRUE(traced.stop);
  EXPECT_EQ(traced.best_epoch, 2u);
  EXPECT_THROW(early_stop({}, 3), TrainingError);
}

TEST(EarlyStop, BestIsNeverWorseThanEarlier) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(0, 10);
  for (int rep = 0; rep < 300; ++rep) {
    std::vector<double> h;
    for (int e = 0; e < 1 + rep % 12; ++e) h.push_back(u(rng) / 10.0);
    auto d = early_stop(h, 3);
    for (std::size_t e = 0; e < h.size(); ++e) EXPECT_GE(h[d.best_epoch - 1], h[e]);
    for (std::size_t e = 0; e + 1 < d.best_epoch; ++e) EXPECT_LT(h[e], h[d.best_epoch - 1]);
  }
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto c = small_config();
  c.model.head = HeadKind::lrc;
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"dropout", 1.0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch_size", "big"}}), ConfigError);
  auto big = TrainConfig::pretrained_scale();
  EXPECT_EQ(big.lr, 1.41e-5);
  EXPECT_EQ(big.batch_size, 64u);
  EXPECT_EQ(big.epochs, 25u);
  EXPECT_EQ(big.folds, 5u);
  EXPECT_EQ(big.dropout, 0.1);
}

TEST(TrainEpoch, ZeroLearningRateChangesNothing) {
  auto t = toy_corpus(16);
  auto cfg = small_config();
  cfg.lr = 0.0;
  cfg.dropout = 0.0;
  Model model(cfg.model, t.vocab, t.corpus.labels, 5);
  std::vector<Tensor> before;
  for (auto* p : model.parameters()) before.push_back(p->value);
  Adam opt(model.parameters(), {0.0});
  std::mt19937_64 rng(1);
  const auto idx = all_indices(16);
  const double loss = train_epoch(model, t.docs, idx, opt, cfg, rng);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value, before[i]) << params[i]->name;
  EXPECT_NEAR(loss, evaluate(model, t.docs, idx).loss, 1e-12);
}

TEST(TrainEpoch, OverfitsOneTinyBatch) {
  LabelSet labels({{"A", "alpha"}, {"B", "beta"}, {"C", "gamma"}});
  std::vector<RawDocument> raw{{"d0",
                                "alpha one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
                                "fifteen sixteen seventeen gamma beta",
                                {"A", "B"}}};
  auto vocab = build_vocabulary(raw);
  auto docs = make_documents(raw, vocab, labels);
  ASSERT_EQ(docs[0].length(), 20u);
  auto cfg = small_config();
  cfg.dropout = 0.0;
  cfg.batch_size = 1;
  Model model(cfg.model, vocab, labels, 2);
  Adam opt(model.parameters(), {cfg.lr});
  std::mt19937_64 rng(1);
  double first = 0.0, last = 0.0;
  for (int epoch = 0; epoch < 200; ++epoch) {
    last = train_epoch(model, docs, {0}, opt, cfg, rng);
    if (epoch == 0) first = last;
  }
  EXPECT_LT(last, 0.05);
  EXPECT_LT(last, first);
}

TEST(TrainEpoch, NonFiniteLossAborts) {
  auto t = toy_corpus(4);
  auto cfg = small_config();
  Model model(cfg.model, t.vocab, t.corpus.labels, 5);
  model.dlac()->weights().value[0] = std::numeric_limits<double>::quiet_NaN();
  Adam opt(model.parameters(), {cfg.lr});
  std::mt19937_64 rng(1);
  EXPECT_THROW(train_epoch(model, t.docs, all_indices(4), opt, cfg, rng), TrainingError);
}

TEST(Fit, DeterministicTrajectoryAndBestEpochRestored) {
  auto t = toy_corpus(40);
  auto cfg = small_config();
  cfg.epochs = 4;
  auto run = [&] {
    Model model(cfg.model, t.vocab, t.corpus.labels, 11);
    std::vector<std::size_t> train(t.docs.size() - 10), val(10);
    std::iota(train.begin(), train.end(), std::size_t{0});
    std::iota(val.begin(), val.end(), t.docs.size() - 10);
    auto r = fit(model, t.docs, train, val, cfg, 3);
    return std::make_pair(std::move(model), r);
  };
  auto [m1, r1] = run();
  auto [m2, r2] = run();
  ASSERT_EQ(r1.history.epochs.size(), r2.history.epochs.size());
  for (std::size_t e = 0; e < r1.history.epochs.size(); ++e) {
    EXPECT_EQ(r1.history.epochs[e].epoch, e + 1);
    EXPECT_EQ(r1.history.epochs[e].train_loss, r2.history.epochs[e].train_loss);
    EXPECT_EQ(r1.history.epochs[e].validation_micro_f1, r2.history.epochs[e].validation_micro_f1);
  }
  std::vector<std::size_t> val(10);
  std::iota(val.begin(), val.end(), t.docs.size() - 10);
  const double restored = f1_scores(evaluate(m1, t.docs, val).batch, cfg.threshold).micro;
  EXPECT_EQ(restored, r1.history.epochs[r1.best_epoch - 1].validation_micro_f1);
}

TEST(CrossValidation, ZeroLearningRateKeepsInitialization) {
  auto t = toy_corpus(30);
  auto cfg = small_config();
  cfg.lr = 0.0;
  cfg.epochs = 2;
  auto pool = all_indices(24);
  std::vector<std::size_t> test{24, 25, 26, 27, 28, 29};
  auto cv = cross_validate(t.docs, pool, test, t.vocab, t.corpus.labels, cfg);
  ASSERT_EQ(cv.folds.size(), 3u);
  for (std::size_t f = 0; f < 3; ++f) {
    Model init(cfg.model, t.vocab, t.corpus.labels, derive_seed(cfg.seed, f + 1));
    auto a = cv.folds[f].model.parameters();
    auto b = init.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
  }
  EXPECT_EQ(cv.test_reports().size(), 3u);
}

// --- checkpoints ------------------------------------------------------------

class CheckpointFile : public ::testing::Test {
 protected:
  std::filesystem::path path = std::filesystem::temp_directory_path() /
                               (std::string("dlac_ckpt_") + ::testing::UnitTest::GetInstance()->current_test_info()->name() +
                                ".json");
  void TearDown() override { std::filesystem::remove(path); }

  Checkpoint trained(const Toy& t, HeadKind head = HeadKind::dlac) {
    auto cfg = small_config();
    cfg.model.head = head;
    cfg.epochs = 2;
    Checkpoint ck{cfg, 77, t.vocab, t.corpus.labels, Model(cfg.model, t.vocab, t.corpus.labels, 77), {}};
    std::vector<std::size_t> train = all_indices(20), val{20, 21, 22, 23};
    ck.history = fit(ck.model, t.docs, train, val, cfg, 5).history;
    return ck;
  }
};

TEST_F(CheckpointFile, RoundTripPreservesPredictionsBitwise) {
  auto t = toy_corpus(30);
  for (auto head : {HeadKind::dlac, HeadKind::lrc}) {
    auto ck = trained(t, head);
    save_checkpoint(ck, path.string());
    auto loaded = load_checkpoint(path.string());
    EXPECT_EQ(loaded.vocabulary, ck.vocabulary);
    EXPECT_EQ(loaded.labels, ck.labels);
    EXPECT_EQ(loaded.seed, 77u);
    EXPECT_EQ(loaded.history.epochs.size(), ck.history.epochs.size());
    for (std::size_t i = 20; i < 30; ++i) {
      auto a = ck.model.predict(t.docs[i]), b = loaded.model.predict(t.docs[i]);
      EXPECT_EQ(a.probs, b.probs);
      EXPECT_EQ(a.attention, b.attention);
    }
    EXPECT_EQ(serialize_checkpoint(loaded), serialize_checkpoint(ck));
  }
}

TEST_F(CheckpointFile, IdenticalRunsWriteIdenticalBytes) {
  auto t = toy_corpus(30);
  EXPECT_EQ(serialize_checkpoint(trained(t)), serialize_checkpoint(trained(t)));
}

TEST_F(CheckpointFile, TruncatedFileIsRejected) {
  auto t = toy_corpus(30);
  const auto text = serialize_checkpoint(trained(t));
  std::ofstream(path) << text.substr(0, text.size() / 2);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
}

TEST_F(CheckpointFile, VersionMismatchIsExplicit) {
  auto t = toy_corpus(30);
  auto j = checkpoint_to_json(trained(t));
  j["version"] = 2;
  std::ofstream(path) << j.dump();
  try {
    load_checkpoint(path.string());
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST_F(CheckpointFile, MissingFileAndWrongShape) {
  EXPECT_THROW(load_checkpoint((path.string() + ".missing")), CheckpointError);
  auto t = toy_corpus(30);
  auto j = checkpoint_to_json(trained(t));
  j["parameters"][1]["shape"] = {1, 1};
  j["parameters"][1]["data"] = {0.0};
  EXPECT_THROW(checkpoint_from_json(j), CheckpointError);
}

}  // namespace
}  // namespace dlac
