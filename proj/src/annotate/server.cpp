#include "cxrinf/annotate_server.hpp"

#include "cxrinf/image_io.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cxrinf::annotate {

using nlohmann::json;

namespace {

HttpResponse error(int status, const std::string& message) {
  return {status, "application/json", json{{"error", message}}.dump()};
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

HttpResponse png(std::vector<std::uint8_t> bytes) {
  return {200, "image/png", std::string(bytes.begin(), bytes.end())};
}

HttpResponse route(Campaign& campaign, const std::string& method, const std::string& path,
                   const std::string& body, const std::map<std::string, std::string>& query) {
  if (method == "GET" && path == "/api/tasks/next") {
    auto it = query.find("reviewer");
    if (it == query.end() || it->second.empty()) {
      return error(400, "missing reviewer query parameter");
    }
    const auto task = campaign.next_task(it->second);
    if (!task) return {204, "application/json", ""};
    return {200, "application/json", task_payload_json(*task)};
  }
  if (method == "POST" && starts_with(path, "/api/tasks/") && path.size() > 21 &&
      path.compare(path.size() - 10, 10, "/selection") == 0) {
    const std::string task_id = path.substr(11, path.size() - 11 - 10);
    json j;
    try {
      j = json::parse(body);
    } catch (const json::exception&) {
      return error(400, "request body is not valid JSON");
    }
    if (!j.is_object() || !j.contains("reviewer") || !j.contains("choice") ||
        !j["reviewer"].is_string() || !j["choice"].is_string()) {
      return error(400, "body must be {\"reviewer\": string, \"choice\": string}");
    }
    const AnnotationTask t = campaign.submit_selection(
        {task_id, j["reviewer"].get<std::string>(), j["choice"].get<std::string>(), 0});
    return {200, "application/json",
            json{{"task_id", t.task_id}, {"status", to_string(t.status)}}.dump()};
  }
  if (method == "GET" && path == "/api/progress") {
    const Progress p = campaign.progress();
    return {200, "application/json",
            json{{"open", p.open},
                 {"locked", p.locked},
                 {"completed", p.completed},
                 {"rejected_all", p.rejected_all},
                 {"fallback_pending", p.fallback_pending}}
                .dump()};
  }
  if (method == "GET" && starts_with(path, "/api/images/")) {
    const std::filesystem::path p = campaign.image_path(path.substr(12));
    if (!std::filesystem::exists(p)) return error(404, "unknown image");
    return png(read_file(p));
  }
  if (method == "GET" && starts_with(path, "/api/masks/")) {
    return png(campaign.masks().bytes(path.substr(11)));
  }
  return error(404, "no route for " + method + " " + path);
}

}  // namespace

HttpResponse handle_request(Campaign& campaign, const std::string& method,
                            const std::string& path, const std::string& body,
                            const std::map<std::string, std::string>& query) {
  try {
    return route(campaign, method, path, body, query);
  } catch (const NotFoundError& e) {
    return error(404, e.what());
  } catch (const ConflictError& e) {
    return error(409, e.what());
  } catch (const ValidationError& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

AnnotationServer::AnnotationServer(Campaign& campaign)
    : campaign_(campaign), server_(std::make_unique<httplib::Server>()) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const HttpResponse r = handle_request(campaign_, req.method, req.path, req.body, query);
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body, r.content_type);
  };
  server_->Get(R"(/api/.*)", handler);
  server_->Post(R"(/api/.*)", handler);
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind_any_port(const std::string& host) {
  return server_->bind_to_any_port(host);
}

bool AnnotationServer::bind(const std::string& host, int port) {
  return server_->bind_to_port(host, port);
}

void AnnotationServer::serve() { server_->listen_after_bind(); }

void AnnotationServer::stop() {
  if (server_) server_->stop();
}

}  // namespace cxrinf::annotate
