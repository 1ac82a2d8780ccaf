#pragma once

#include <map>
#include <string>
#include <vector>

#include "consentgate/codec.hpp"
#include "consentgate/error.hpp"
#include "consentgate/service.hpp"

namespace consentgate {

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;  // lower-case names
  std::string body;
};

struct ApiResponse {
  int status = 200;
  Json body = Json::object();
};

/// HTTP status for an operation error: 401 ticket failures, 403 denials,
/// 404 unknown ids, 409 conflicts, 422 malformed input.
int http_status(ErrorCode code) noexcept;

struct RouteInfo {
  std::string method;
  std::string pattern;  // e.g. "/v1/requests/{id}/decision"
};

/// The /v1 JSON surface, callable in-process. The network server only
/// translates to and from ApiRequest/ApiResponse.
class ApiRouter {
 public:
  explicit ApiRouter(Service& service) : service_(service) {}

  ApiResponse handle(const ApiRequest& request);

  static const std::vector<RouteInfo>& routes();

 private:
  Service& service_;
};

}  // namespace consentgate
