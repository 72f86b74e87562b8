#pragma once

// HTTP routes for ReviewService (cpp-httplib).
//
//   GET  /health
//   POST /predict            {text | document_id, threshold?, top_k?, all_labels?}
//   GET  /documents          ?split=all|train|validation|test&page=0&page_size=20
//   GET  /documents/{id}
//   POST /decisions          {document_id, code, verdict, reviewer}
//   GET  /decisions          ?document_id=...

#include <memory>
#include <string>

#include <httplib.h>

#include "dlac/service.hpp"

namespace dlac {

inline void write_response(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

inline std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const auto v = req.get_param_value(key);
  std::size_t pos = 0;
  const unsigned long long n = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument(key);
  return static_cast<std::size_t>(n);
}

inline std::unique_ptr<httplib::Server> make_http_server(ReviewService& service) {
  auto server = std::make_unique<httplib::Server>();
  const std::string origin = service.config().cors_origin;
  server->set_default_headers({{"Access-Control-Allow-Origin", origin},
                               {"Access-Control-Allow-Headers", "Content-Type"},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server->Get("/health", [&service](const httplib::Request&, httplib::Response& res) {
    write_response(res, service.health());
  });
  server->Post("/predict", [&service](const httplib::Request& req, httplib::Response& res) {
    write_response(res, service.predict(req.body));
  });
  server->Get("/documents", [&service](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto split = req.has_param("split") ? req.get_param_value("split") : std::string("all");
      write_response(res, service.list_documents(split, query_size(req, "page", 0), query_size(req, "page_size", 20)));
    } catch (const std::exception&) {
      write_response(res, error_response(400, "page and page_size must be non-negative integers"));
    }
  });
  server->Get(R"(/documents/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    write_response(res, service.get_document(req.matches[1]));
  });
  server->Post("/decisions", [&service](const httplib::Request& req, httplib::Response& res) {
    write_response(res, service.post_decision(req.body));
  });
  server->Get("/decisions", [&service](const httplib::Request& req, httplib::Response& res) {
    write_response(res, service.get_decisions(req.has_param("document_id") ? req.get_param_value("document_id") : ""));
  });
  server->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    }
    write_response(res, error_response(500, msg));
  });
  return server;
}

}  // namespace dlac
