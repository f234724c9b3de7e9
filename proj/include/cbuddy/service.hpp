#pragma once

// Triage-study API: alerts, condition-dependent feature views, assistant
// suggestions, explanations, sessions and submissions.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/pipeline.hpp"

namespace cbuddy {

enum class Condition { c1, c2, c3 };  // all features / suggested only / iterative filtering

std::string to_string(Condition c);

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

struct Submission {
  int predicted_class = 0;
  int confidence = 0;  // 0..100
  std::map<std::string, int> reliance;  // features, explanations, knowledge: 1..5
  double elapsed_seconds = 0.0;
};

struct SessionState {
  std::string id;
  std::vector<Condition> conditions;     // one block of alerts each
  std::vector<std::int64_t> alert_ids;   // block-major
  int alerts_per_condition = 4;
  std::map<std::int64_t, double> timer_start;  // seconds on the service clock
  std::map<std::int64_t, Submission> submissions;
  std::vector<nlohmann::json> questionnaires;
  double created = 0.0;

  std::optional<Condition> condition_of(std::int64_t alert_id) const;
};

class TriageService {
 public:
  using Clock = std::function<double()>;  // seconds, monotonic

  TriageService(std::shared_ptr<const PreparedData> data, SubsetContext context, AssistantPolicy assistant,
                std::uint64_t seed, Clock clock = {});

  ApiResponse list_alerts() const;
  ApiResponse features(std::int64_t alert_id, const std::optional<std::string>& session);
  ApiResponse suggestion(std::int64_t alert_id) const;
  ApiResponse explanation(std::int64_t alert_id, const std::string& mask_hex) const;
  ApiResponse feature_stats() const;
  ApiResponse create_session(const nlohmann::json& body);
  ApiResponse session(const std::string& id) const;
  ApiResponse classify(std::int64_t alert_id, const nlohmann::json& body);
  ApiResponse questionnaire(const std::string& session_id, const nlohmann::json& body);

  // Routes a request the way the HTTP server does.
  ApiResponse dispatch(const std::string& method, const std::string& path,
                       const std::map<std::string, std::string>& query, const std::string& body);

 private:
  const AlertRecord* find_alert(std::int64_t id) const;
  nlohmann::json feature_entry(const AlertRecord& a, std::size_t f) const;

  std::shared_ptr<const PreparedData> data_;
  SubsetContext ctx_;
  AssistantPolicy assistant_;
  std::uint64_t seed_;
  Clock clock_;
  std::vector<int> feature_category_;  // -1 = initial

  mutable std::mutex mutex_;
  std::map<std::string, SessionState> sessions_;
  std::uint64_t next_session_ = 1;
};

// Blocking HTTP server on host:port.
void serve_http(TriageService& service, const std::string& host, int port);

// Background HTTP server for tests and embedding.
class HttpServer {
 public:
  explicit HttpServer(TriageService& service);
  ~HttpServer();
  // Binds an ephemeral port on host and starts serving; returns the port.
  int start(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cbuddy
