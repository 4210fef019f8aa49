#pragma once

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that collides
// with Eigen parameter names.
#include "dspo/annotation_service.hpp"

#include <httplib.h>

#include <json.hpp>

#include <memory>
#include <string>
#include <thread>

namespace dspo {

/// HTTP front end of an AnnotationStore.
///
///   GET  /api/tasks/next?annotator=ID[&round=R]   → {"task": {...}} or {"task": null}
///   POST /api/tasks/{id}/submission               → {"ok": true} | 400/404 {"error": ...}
///   GET  /api/export                              → JSON array of preference records
///   GET  /api/stats
///   GET  /files/...                               → files under the data directory
///   GET  /                                        → static UI bundle from <data-dir>/ui, when present
class AnnotationServer {
 public:
  explicit AnnotationServer(AnnotationStore& store) : store_(store) { routes(); }
  ~AnnotationServer() { stop(); }

  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Blocks serving on host:port.
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  /// Serves on a background thread; port 0 picks a free port. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void routes() {
    server_.Get("/api/tasks/next", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string annotator = req.get_param_value("annotator");
      if (annotator.empty()) return send_json(res, 400, {{"error", "annotator query parameter required"}});
      int round = 1;
      if (req.has_param("round")) {
        try {
          round = std::stoi(req.get_param_value("round"));
        } catch (const std::exception&) {
          return send_json(res, 400, {{"error", "round must be an integer"}});
        }
      }
      const auto task = store_.next_task(annotator, round);
      send_json(res, 200, {{"task", task ? nlohmann::json(*task) : nlohmann::json()}});
    });

    server_.Post(R"(/api/tasks/([^/]+)/submission)", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        store_.submit(parse_submission(nlohmann::json::parse(req.body), req.matches[1]));
        send_json(res, 200, {{"ok", true}});
      } catch (const NotFound& e) {
        send_json(res, 404, {{"error", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        send_json(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}});
      } catch (const InvalidArgument& e) {
        send_json(res, 400, {{"error", e.what()}});
      }
    });

    server_.Get("/api/export", [this](const httplib::Request&, httplib::Response& res) {
      auto arr = nlohmann::json::array();
      for (const auto& r : store_.export_human_records()) arr.push_back(to_json_record(r));
      send_json(res, 200, arr);
    });

    server_.Get("/api/stats", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, store_.stats());
    });

    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      log::error("annotation server: " + what);
      send_json(res, 500, {{"error", what}});
    });

    server_.set_mount_point("/files", store_.dir().string());
    if (fs::is_directory(store_.dir() / "ui")) server_.set_mount_point("/", (store_.dir() / "ui").string());
  }

  AnnotationStore& store_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace dspo
