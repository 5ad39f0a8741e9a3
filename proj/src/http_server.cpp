#include <thread>

#include "featguide/service.hpp"
#include "httplib.h"

namespace featguide {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {}) {
  json err{{"status", status}, {"message", message}};
  if (!field.empty()) err["field"] = field;
  send_json(res, status, json{{"v", 1}, {"error", err}});
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.what(), e.field());
    } catch (const SpecError& e) {
      send_error(res, 422, e.what(), e.field());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("malformed JSON: ") + e.what());
    } catch (const ContractError& e) {
      send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

json parse_body(const httplib::Request& req) { return json::parse(req.body); }

std::string sse_frame(const JobEvent& e) { return "event: " + e.type + "\ndata: " + e.data.dump() + "\n\n"; }

}  // namespace

struct HttpServer::Impl {
  explicit Impl(JobService& s) : service(s) {}
  JobService& service;
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(JobService& service) : impl_(std::make_unique<Impl>(service)) {
  httplib::Server& s = impl_->server;
  JobService& svc = service;

  s.Post("/images", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 201, svc.put_image(req.body));
         }));
  s.Get(R"(/images/([0-9a-f]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          res.set_content(svc.image_png(req.matches[1]), "image/png");
        }));
  s.Post("/banks", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           json info = svc.create_bank(parse_body(req));
           const int status = info.value("created", false) ? 201 : 200;
           send_json(res, status, info);
         }));
  s.Get(R"(/banks/([0-9a-f]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.bank_info(req.matches[1]));
        }));
  s.Post("/edits", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           const SubmitResult r = svc.submit_edit(parse_body(req));
           send_json(res, r.created ? 201 : 200, json{{"v", 1}, {"job_id", r.job_id}, {"created", r.created}});
         }));
  s.Get(R"(/edits/([0-9a-f]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.job_status(req.matches[1]));
        }));
  s.Get(R"(/edits/([0-9a-f]+)/result)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          res.set_content(svc.job_result_png(req.matches[1]), "image/png");
        }));
  s.Post(R"(/edits/([0-9a-f]+)/cancel)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           const std::string id = req.matches[1];
           svc.cancel(id);
           send_json(res, 202, json{{"v", 1}, {"job_id", id}, {"cancel", "acknowledged"}});
         }));
  s.Get(R"(/edits/([0-9a-f]+)/events)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          const std::string id = req.matches[1];
          svc.job_status(id);  // 404 before the stream opens
          auto cursor = std::make_shared<std::size_t>(0);
          res.set_header("Cache-Control", "no-cache");
          res.set_chunked_content_provider("text/event-stream", [&svc, id, cursor](std::size_t, httplib::DataSink& sink) {
            bool finished = false;
            const auto batch = svc.events(id, *cursor, std::chrono::milliseconds(500), finished);
            for (const JobEvent& e : batch) {
              const std::string frame = sse_frame(e);
              if (!sink.write(frame.data(), frame.size())) return false;
            }
            *cursor += batch.size();
            if (finished) sink.done();
            return true;
          });
        }));
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not found" : "request failed");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace featguide
