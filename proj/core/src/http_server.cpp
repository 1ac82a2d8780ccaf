#include "consentgate/http_server.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>

namespace consentgate {

struct HttpServer::Impl {
  explicit Impl(ApiRouter& r) : router(r) {}
  ApiRouter& router;
  httplib::Server server;
};

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

HttpServer::HttpServer(ApiRouter& router) : impl_(std::make_unique<Impl>(router)) {
  auto handler = [this](const httplib::Request& in, httplib::Response& out) {
    ApiRequest req;
    req.method = in.method;
    req.path = in.path;
    req.body = in.body;
    for (const auto& [k, v] : in.params) req.query[k] = v;
    for (const auto& [k, v] : in.headers) req.headers[lower(k)] = v;
    const auto res = impl_->router.handle(req);
    out.status = res.status;
    out.set_content(res.body.dump(), "application/json");
  };
  const char* pattern = R"(/v1/.*)";
  impl_->server.Get(pattern, handler);
  impl_->server.Post(pattern, handler);
  impl_->server.Put(pattern, handler);
  impl_->server.Delete(pattern, handler);
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace consentgate
