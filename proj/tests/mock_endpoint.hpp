#pragma once

#include <atomic>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>

#include "rlkf/records.hpp"

namespace rlkf::testing {

inline json chat_reply(const std::string& text) {
  json message{{"role", "assistant"}, {"content", text}};
  json choice{{"message", std::move(message)}};
  return json{{"choices", json::array({std::move(choice)})}};
}

inline std::string user_content(const json& request) {
  for (const auto& m : request.at("messages")) {
    if (m.at("role").get<std::string>() == "user")
      return m.at("content").get<std::string>();
  }
  throw Error("request has no user message");
}

// Local chat-completions stand-in bound to an ephemeral port. The handler
// sees the parsed request body, a 1-based hit count, and the response to
// fill in; tests inspect hits() and the last Authorization header.
class MockServer {
 public:
  using Handler = std::function<void(const json& request, long long hit,
                                     httplib::Response& res)>;

  explicit MockServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   long long hit = ++hits_;
                   {
                     std::lock_guard<std::mutex> lock(mutex_);
                     last_auth_ = req.get_header_value("Authorization");
                   }
                   handler_(json::parse(req.body), hit, res);
                 });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  ~MockServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string base_url() const {
    return "http://127.0.0.1:" + std::to_string(port_);
  }

  long long hits() const { return hits_.load(); }

  std::string last_auth() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return last_auth_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<long long> hits_{0};
  mutable std::mutex mutex_;
  std::string last_auth_;
};

// Every request gets the same assistant text back.
inline MockServer::Handler always_reply(std::string text) {
  return [text = std::move(text)](const json&, long long,
                                  httplib::Response& res) {
    res.set_content(chat_reply(text).dump(), "application/json");
  };
}

}  // namespace rlkf::testing
