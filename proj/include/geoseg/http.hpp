#pragma once

#include <cstdlib>
#include <functional>
#include <string>

// Before httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "geoseg/session.hpp"

#include "httplib.h"
#include "json.hpp"

namespace geoseg {

inline int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation:
    case ErrorKind::shape:
    case ErrorKind::config: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::unavailable: return 503;
    default: return 500;
  }
}

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("request body is not valid JSON: ") + e.what());
  }
}

// Runs a handler, turning library errors into status codes with a JSON body.
inline void guarded(httplib::Response& res, const std::function<void()>& body) {
  try {
    body();
  } catch (const Error& e) {
    send_json(res, http_status(e.kind()), {{"error", to_string(e.kind())}, {"message", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", "internal"}, {"message", e.what()}});
  }
}

}  // namespace detail

// Registers the session API on `server`.
inline void install_routes(httplib::Server& server, SessionService& service) {
  using detail::guarded;
  using detail::send_json;
  server.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = detail::parse_body(req);
      if (!body.contains("image")) fail(ErrorKind::validation, "missing 'image'");
      const ImageGrid image = image_from_json(body.at("image"));
      send_json(res, 201, service.create(image, body.value("pnet", "pnet"), body.value("rnet", "rnet")));
    });
  });
  server.Get(R"(/sessions/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.get(req.matches[1])); });
  });
  server.Get(R"(/sessions/([^/]+)/mask)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      res.status = 200;
      res.set_content(service.mask_pgm(req.matches[1]), "image/x-portable-graymap");
    });
  });
  server.Post(R"(/sessions/([^/]+)/scribbles)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.submit(req.matches[1], scribbles_from_json(detail::parse_body(req)))); });
  });
  server.Post(R"(/sessions/([^/]+)/refine)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.refine(req.matches[1])); });
  });
  server.Delete(R"(/sessions/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      service.remove(req.matches[1]);
      send_json(res, 200, {{"deleted", true}});
    });
  });
  // The browser UI is served from another origin during development.
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

struct ServeOptions {
  fs::path model_dir;
  fs::path store_dir;
  std::string host = "127.0.0.1";
  int port = 8080;

  // GEOSEG_MODEL_DIR, GEOSEG_STORE_DIR, GEOSEG_PORT override the defaults.
  static ServeOptions from_env() {
    ServeOptions o;
    if (const char* v = std::getenv("GEOSEG_MODEL_DIR")) o.model_dir = v;
    o.store_dir = "sessions";
    if (const char* v = std::getenv("GEOSEG_STORE_DIR")) o.store_dir = v;
    if (const char* v = std::getenv("GEOSEG_PORT")) {
      try {
        o.port = std::stoi(v);
      } catch (const std::exception&) {
        fail(ErrorKind::config, std::string("GEOSEG_PORT is not a number: ") + v);
      }
    }
    return o;
  }
};

// Blocks until the server stops.
inline void serve(const ServeOptions& opts, const std::function<void(const std::string&)>& log = {}) {
  SessionService service(opts.model_dir, opts.store_dir);
  httplib::Server server;
  install_routes(server, service);
  if (!server.bind_to_port(opts.host, opts.port))
    fail(ErrorKind::io, "cannot bind " + opts.host + ":" + std::to_string(opts.port));
  if (log) log("serving on http://" + opts.host + ":" + std::to_string(opts.port) + " (models " +
               opts.model_dir.string() + ", sessions " + opts.store_dir.string() + ")");
  server.listen_after_bind();
}

}  // namespace geoseg
