#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "dlac/http_server.hpp"
#include "dlac/service.hpp"
#include "dlac/synthetic.hpp"

namespace dlac {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class Service : public ::testing::Test {
 protected:
  fs::path dir;
  SyntheticCorpus corpus;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("dlac_service_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
    corpus = generate_synthetic_corpus(SyntheticConfig{.m = 5, .n_docs = 30, .mean_len = 80, .noise_vocab_size = 100}, 3);
  }
  void TearDown() override { fs::remove_all(dir); }

  Checkpoint checkpoint(std::size_t max_len = 512) const {
    TrainConfig cfg;
    cfg.model.encoder.d_e = 8;
    cfg.model.encoder.max_len = max_len;
    cfg.model.d_a = 6;
    cfg.seed = 4;
    auto vocab = build_vocabulary(corpus.documents);
    return {cfg, 4, vocab, corpus.labels, Model(cfg.model, vocab, corpus.labels, 4), {}};
  }

  ServiceConfig config() const {
    ServiceConfig c;
    c.decision_store_path = (dir / "decisions.jsonl").string();
    c.top_k = 3;
    c.max_page_size = 10;
    return c;
  }

  std::unique_ptr<ReviewService> service(std::size_t max_len = 512) const {
    auto s = std::make_unique<ReviewService>(config());
    s->load_model(checkpoint(max_len));
    s->load_corpus(corpus.documents);
    return s;
  }
};

TEST_F(Service, HealthBeforeAndAfterLoad) {
  ReviewService s(config());
  EXPECT_EQ(s.health().status, 503);
  EXPECT_EQ(s.predict(R"({"text":"hello"})").status, 503);
  s.load_model(checkpoint());
  auto h = s.health();
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body["m"], 5);
  EXPECT_EQ(h.body["checkpoint_version"], kCheckpointVersion);
  EXPECT_EQ(h.body["encoder_kind"], "bag");
  EXPECT_THROW(s.load_model(checkpoint()), std::logic_error);
}

TEST_F(Service, PredictSortsCodesAndExplainsEach) {
  auto s = service();
  auto r = s->predict(json{{"document_id", "doc-000002"}, {"threshold", 0.01}}.dump());
  ASSERT_EQ(r.status, 200);
  const auto& codes = r.body["codes"];
  ASSERT_EQ(codes.size(), 5u);
  const auto text = s->get_document("doc-000002").body["text"].get<std::string>();
  for (std::size_t k = 0; k < codes.size(); ++k) {
    if (k) EXPECT_GE(codes[k - 1]["probability"].get<double>(), codes[k]["probability"].get<double>());
    const auto& tokens = codes[k]["explanation"]["tokens"];
    EXPECT_EQ(tokens.size(), 3u);
    EXPECT_EQ(tokens[0]["intensity"], 1.0);
    for (const auto& t : tokens) {
      const auto b = t["start"].get<std::size_t>(), e = t["end"].get<std::size_t>();
      ASSERT_LE(e, text.size());
      EXPECT_EQ(text.substr(b, e - b), t["text"].get<std::string>());
    }
  }
  EXPECT_EQ(r.body["truncated"], false);
  EXPECT_EQ(s->predict(json{{"document_id", "doc-000002"}, {"threshold", 0.01}}.dump()).body.dump(), r.body.dump());
}

TEST_F(Service, PredictThresholdAndErrors) {
  auto s = service();
  auto high = s->predict(R"({"text":"some free text about nothing","threshold":0.999999})");
  EXPECT_EQ(high.status, 200);
  EXPECT_TRUE(high.body["codes"].empty());
  auto all = s->predict(R"({"text":"some free text","threshold":0.999999,"all_labels":true})");
  EXPECT_EQ(all.body["codes"].size(), 5u);
  EXPECT_EQ(s->predict(R"({"text":""})").status, 400);
  EXPECT_EQ(s->predict(R"({"text":"12 34"})").status, 400);
  EXPECT_EQ(s->predict("{nope").status, 400);
  EXPECT_EQ(s->predict(R"({"foo":1})").status, 400);
  EXPECT_EQ(s->predict(R"({"text":"a","threshold":1.5})").status, 400);
  EXPECT_EQ(s->predict(R"({"text":"a","top_k":0})").status, 400);
  EXPECT_EQ(s->predict(R"({"document_id":"missing"})").status, 404);
  EXPECT_TRUE(s->predict(R"({"text":"abc"})").body.contains("error") == false);
}

TEST_F(Service, PredictReportsTruncation) {
  auto s = service(16);
  auto r = s->predict(json{{"document_id", "doc-000000"}, {"all_labels", true}}.dump());
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["truncated"], true);
  EXPECT_EQ(r.body["encoded_tokens"], 16);
  for (const auto& c : r.body["codes"])
    for (const auto& t : c["explanation"]["tokens"]) EXPECT_LT(t["token_index"].get<std::size_t>(), 16u);
}

TEST_F(Service, DocumentPaging) {
  auto s = service();
  auto first = s->list_documents("all", 0, 4);
  ASSERT_EQ(first.status, 200);
  EXPECT_EQ(first.body["total"], 30);
  ASSERT_EQ(first.body["documents"].size(), 4u);
  EXPECT_EQ(first.body["documents"][0]["id"], "doc-000000");
  EXPECT_LT(first.body["documents"][0]["id"].get<std::string>(), first.body["documents"][1]["id"].get<std::string>());
  EXPECT_TRUE(s->list_documents("all", 100, 4).body["documents"].empty());
  EXPECT_EQ(s->list_documents("all", 0, 1000).body["page_size"], 10);
  EXPECT_EQ(s->list_documents("bogus", 0, 4).status, 400);
  std::size_t total = 0;
  for (const char* split : {"train", "validation", "test"}) {
    auto r = s->list_documents(split, 0, 10);
    total += r.body["total"].get<std::size_t>();
    for (const auto& d : r.body["documents"]) {
      EXPECT_EQ(d["split"], split);
      auto full = s->get_document(d["id"].get<std::string>());
      EXPECT_EQ(full.status, 200);
      EXPECT_EQ(full.body["split"], split);
    }
  }
  EXPECT_EQ(total, 30u);
  EXPECT_EQ(s->get_document("nope").status, 404);
}

TEST_F(Service, DecisionsValidateAndPersistAcrossRestart) {
  const std::string code0 = corpus.labels[0].code, code1 = corpus.labels[1].code;
  {
    auto s = service();
    auto a = s->post_decision(json{{"document_id", "doc-000001"}, {"code", code0}, {"verdict", "accepted"}, {"reviewer", "r1"}}.dump());
    ASSERT_EQ(a.status, 201);
    EXPECT_FALSE(a.body["timestamp"].get<std::string>().empty());
    auto b = s->post_decision(json{{"document_id", "doc-000001"}, {"code", code1}, {"verdict", "rejected"}, {"reviewer", "r1"}}.dump());
    ASSERT_EQ(b.status, 201);
    EXPECT_LT(a.body["timestamp"].get<std::string>(), b.body["timestamp"].get<std::string>());
    EXPECT_EQ(s->post_decision(json{{"document_id", "doc-000001"}, {"code", code0}, {"verdict", "maybe"}, {"reviewer", "r1"}}.dump()).status, 400);
    EXPECT_EQ(s->post_decision(json{{"document_id", "nope"}, {"code", code0}, {"verdict", "accepted"}, {"reviewer", "r1"}}.dump()).status, 404);
    EXPECT_EQ(s->post_decision(json{{"document_id", "doc-000001"}, {"code", "X"}, {"verdict", "accepted"}, {"reviewer", "r1"}}.dump()).status, 404);
    EXPECT_EQ(s->post_decision(R"({"document_id":"doc-000001"})").status, 400);
    EXPECT_EQ(s->get_decisions("").status, 400);
  }
  auto restarted = service();
  auto r = restarted->get_decisions("doc-000001");
  ASSERT_EQ(r.status, 200);
  ASSERT_EQ(r.body["decisions"].size(), 2u);
  EXPECT_EQ(r.body["decisions"][0]["code"], code0);
  EXPECT_EQ(r.body["decisions"][0]["verdict"], "accepted");
  EXPECT_EQ(r.body["decisions"][1]["verdict"], "rejected");
  EXPECT_TRUE(restarted->get_decisions("doc-000002").body["decisions"].empty());
  auto c = restarted->post_decision(json{{"document_id", "doc-000001"}, {"code", code0}, {"verdict", "rejected"}, {"reviewer", "r2"}}.dump());
  EXPECT_GT(c.body["timestamp"].get<std::string>(), r.body["decisions"][1]["timestamp"].get<std::string>());
}

TEST(DecisionStore, TimestampFormatRoundTrips) {
  const long long ms = 1760000000123;
  EXPECT_EQ(DecisionStore::format_ms(ms), "2025-10-09T08:53:20.123Z");
  EXPECT_EQ(DecisionStore::parse_ms(DecisionStore::format_ms(ms)), ms);
}

TEST_F(Service, HttpRoundTrip) {
  auto s = service();
  auto server = make_http_server(*s);
  const int port = server->bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread worker([&] { server->listen_after_bind(); });
  server->wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto health = client.Get("/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");

  auto pred = client.Post("/predict", R"({"document_id":"doc-000003","threshold":0.01})", "application/json");
  ASSERT_TRUE(pred);
  EXPECT_EQ(pred->status, 200);
  EXPECT_EQ(json::parse(pred->body)["codes"].size(), 5u);
  EXPECT_EQ(client.Post("/predict", "{}", "application/json")->status, 400);

  auto docs = client.Get("/documents?split=test&page=0&page_size=2");
  ASSERT_TRUE(docs);
  auto listed = json::parse(docs->body)["documents"];
  ASSERT_FALSE(listed.empty());
  auto one = client.Get(("/documents/" + listed[0]["id"].get<std::string>()).c_str());
  EXPECT_EQ(one->status, 200);
  EXPECT_EQ(client.Get("/documents/unknown")->status, 404);
  EXPECT_EQ(client.Get("/documents?page=x")->status, 400);

  const std::string code = corpus.labels[2].code;
  auto posted = client.Post("/decisions", json{{"document_id", "doc-000003"}, {"code", code}, {"verdict", "accepted"}, {"reviewer", "web"}}.dump(), "application/json");
  EXPECT_EQ(posted->status, 201);
  auto got = client.Get("/decisions?document_id=doc-000003");
  EXPECT_EQ(json::parse(got->body)["decisions"][0]["code"], code);
  auto options = client.Options("/predict");
  ASSERT_TRUE(options);
  EXPECT_EQ(options->status, 204);

  server->stop();
  worker.join();
}

}  // namespace
}  // namespace dlac
