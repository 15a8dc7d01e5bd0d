#pragma once

// HTTP client for a remote hard-label scanner.
//
//   POST /scan    Content-Type: application/octet-stream, body = file bytes
//                 200 {"label":"malicious"} | {"label":"benign"}
//   GET  /health  200 {"status":"ok"}
// Any other status is treated as the service being unavailable.

#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "mabpe/bytes.hpp"
#include "mabpe/features.hpp"

namespace mabpe {

class RemoteUnavailable : public Error {
 public:
  explicit RemoteUnavailable(const std::string& what) : Error("remote oracle unavailable: " + what) {}
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error("oracle protocol error: " + what) {}
};

struct RemoteEndpoint {
  std::string url;  // scheme://host:port
  std::chrono::milliseconds timeout{5000};
  unsigned retries = 2;
  bool operator==(const RemoteEndpoint&) const = default;
};

// Decodes a /scan response body; throws ProtocolError unless it is exactly
// one "label" key holding "malicious" or "benign".
inline Label parse_scan_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object() || j.size() != 1 || !j.contains("label") || !j["label"].is_string())
    throw ProtocolError("expected exactly one string key \"label\"");
  const auto v = j["label"].get<std::string>();
  if (v == "malicious") return Label::Malicious;
  if (v == "benign") return Label::Benign;
  throw ProtocolError("unknown label '" + v + "'");
}

class RemoteClient {
 public:
  explicit RemoteClient(RemoteEndpoint ep) : ep_(std::move(ep)) {}

  Label scan(ByteView sample) const {
    std::string last_error = "no attempt made";
    for (unsigned attempt = 0; attempt <= ep_.retries; ++attempt) {
      auto cli = make_client();
      auto res = cli->Post("/scan", reinterpret_cast<const char*>(sample.data()), sample.size(),
                           "application/octet-stream");
      if (!res) {
        last_error = httplib::to_string(res.error());
      } else if (res->status != 200) {
        last_error = "HTTP status " + std::to_string(res->status);
      } else {
        return parse_scan_response(res->body);
      }
      if (attempt < ep_.retries) std::this_thread::sleep_for(std::chrono::milliseconds(50 * (attempt + 1)));
    }
    throw RemoteUnavailable(ep_.url + ": " + last_error);
  }

  bool healthy() const {
    auto cli = make_client();
    auto res = cli->Get("/health");
    if (!res || res->status != 200) return false;
    try {
      auto j = nlohmann::json::parse(res->body);
      return j.is_object() && j.value("status", "") == "ok";
    } catch (const nlohmann::json::exception&) {
      return false;
    }
  }

  const RemoteEndpoint& endpoint() const { return ep_; }

 private:
  std::unique_ptr<httplib::Client> make_client() const {
    auto cli = std::make_unique<httplib::Client>(ep_.url);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(ep_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(ep_.timeout - secs);
    cli->set_connection_timeout(secs.count(), usecs.count());
    cli->set_read_timeout(secs.count(), usecs.count());
    cli->set_write_timeout(secs.count(), usecs.count());
    return cli;
  }

  RemoteEndpoint ep_;
};

}  // namespace mabpe
