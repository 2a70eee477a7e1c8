#pragma once

#include <map>
#include <memory>
#include <string>

#include "cxrinf/annotate.hpp"

namespace httplib {
class Server;
}

namespace cxrinf::annotate {

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Routes one request against the campaign. Shared by the socket server and
/// by in-process callers.
HttpResponse handle_request(Campaign& campaign, const std::string& method,
                            const std::string& path, const std::string& body,
                            const std::map<std::string, std::string>& query);

/// JSON-over-HTTP front end for reviewers.
class AnnotationServer {
 public:
  explicit AnnotationServer(Campaign& campaign);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Binds an ephemeral port and returns it.
  int bind_any_port(const std::string& host = "127.0.0.1");
  bool bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void serve();
  void stop();

 private:
  Campaign& campaign_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace cxrinf::annotate
