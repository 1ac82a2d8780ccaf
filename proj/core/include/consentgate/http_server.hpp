#pragma once

#include <memory>
#include <string>

#include "consentgate/http_api.hpp"

namespace consentgate {

/// Serves an ApiRouter over HTTP/1.1 with cpp-httplib.
class HttpServer {
 public:
  explicit HttpServer(ApiRouter& router);
  ~HttpServer();

  /// Binds host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace consentgate
