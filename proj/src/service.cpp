#include "cbuddy/service.hpp"

#include <charconv>
#include <regex>

#include <httplib.h>

#include "cbuddy/explainer.hpp"

namespace cbuddy {

using nlohmann::json;

namespace {

ApiResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

std::optional<std::int64_t> parse_id(const std::string& s) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

bool int_in(const json& j, int lo, int hi) {
  return j.is_number_integer() && j.get<long>() >= lo && j.get<long>() <= hi;
}

}  // namespace

std::string to_string(Condition c) {
  switch (c) {
    case Condition::c1:
      return "C1";
    case Condition::c2:
      return "C2";
    case Condition::c3:
      return "C3";
  }
  return "?";
}

std::optional<Condition> SessionState::condition_of(std::int64_t alert_id) const {
  for (std::size_t i = 0; i < alert_ids.size(); ++i) {
    if (alert_ids[i] == alert_id) return conditions[i / static_cast<std::size_t>(alerts_per_condition)];
  }
  return std::nullopt;
}

TriageService::TriageService(std::shared_ptr<const PreparedData> data, SubsetContext context,
                             AssistantPolicy assistant, std::uint64_t seed, Clock clock)
    : data_(std::move(data)), ctx_(std::move(context)), assistant_(std::move(assistant)), seed_(seed),
      clock_(std::move(clock)) {
  if (!clock_) {
    clock_ = [] {
      return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
    };
  }
  feature_category_.assign(data_->schema.size(), -1);
  for (const auto& c : data_->catalog.categories) {
    for (auto f : c.feature_indices) feature_category_[f] = c.id;
  }
}

const AlertRecord* TriageService::find_alert(std::int64_t id) const {
  for (const auto& a : ctx_.split->fresh) {
    if (a.alert_id == id) return &a;
  }
  return nullptr;
}

json TriageService::feature_entry(const AlertRecord& a, std::size_t f) const {
  const int cat = feature_category_[f];
  json e = {{"name", data_->schema[f].name},
            {"value", a.values[f]},
            {"category", cat < 0 ? json("initial") : json(data_->catalog.categories[static_cast<std::size_t>(cat)].name)}};
  if (f < ctx_.stats.size()) {
    e["mean"] = ctx_.stats[f].mean;
    e["median"] = ctx_.stats[f].median;
    e["mode"] = ctx_.stats[f].mode;
  }
  return e;
}

ApiResponse TriageService::list_alerts() const {
  json out = json::array();
  for (const auto& a : ctx_.split->fresh) out.push_back({{"id", a.alert_id}});
  return {200, {{"alerts", out}, {"classes", data_->class_names}}};
}

ApiResponse TriageService::features(std::int64_t alert_id, const std::optional<std::string>& session) {
  const auto* alert = find_alert(alert_id);
  if (!alert) return error(404, "unknown alert " + std::to_string(alert_id));
  Condition cond = Condition::c1;
  if (session) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(*session);
    if (it == sessions_.end()) return error(404, "unknown session " + *session);
    const auto c = it->second.condition_of(alert_id);
    if (!c) return error(404, "alert " + std::to_string(alert_id) + " is not part of session " + *session);
    cond = *c;
    it->second.timer_start.try_emplace(alert_id, clock_());
  }

  json body = {{"alert_id", alert_id}, {"condition", to_string(cond)}};
  std::optional<Plan> plan;
  if (cond != Condition::c1) {
    auto env = ctx_.make_env();
    plan = one_time_plan(assistant_, env, *alert);
    body["suggestion"] = plan->to_json(&data_->catalog);
  }
  json feats = json::array();
  const ContextMask visible = plan ? plan->mask() : ContextMask::full(data_->catalog.num_categories());
  for (std::size_t f = 0; f < alert->values.size(); ++f) {
    const int cat = feature_category_[f];
    // C2 hides everything outside the suggestion; C1 and C3 show all features.
    if (cond == Condition::c2 && cat >= 0 && !visible.has(cat)) continue;
    feats.push_back(feature_entry(*alert, f));
  }
  body["features"] = feats;
  if (cond == Condition::c3) {
    json cats = json::array();
    for (const auto& c : data_->catalog.categories) {
      std::vector<std::string> names;
      for (auto f : c.feature_indices) names.push_back(data_->schema[f].name);
      cats.push_back({{"name", c.name}, {"features", names}});
    }
    body["catalog"] = cats;
  }
  return {200, body};
}

ApiResponse TriageService::suggestion(std::int64_t alert_id) const {
  const auto* alert = find_alert(alert_id);
  if (!alert) return error(404, "unknown alert " + std::to_string(alert_id));
  auto env = ctx_.make_env();
  return {200, one_time_plan(assistant_, env, *alert).to_json(&data_->catalog)};
}

ApiResponse TriageService::explanation(std::int64_t alert_id, const std::string& mask_hex) const {
  const auto* alert = find_alert(alert_id);
  if (!alert) return error(404, "unknown alert " + std::to_string(alert_id));
  const int k = data_->catalog.num_categories();
  ContextMask mask;
  try {
    mask = mask_hex.empty() ? ContextMask{} : ContextMask::parse_hex(mask_hex, k);
  } catch (const std::exception& e) {
    return error(400, std::string("bad mask: ") + e.what());
  }
  std::vector<std::string> cat_names;
  for (const auto& c : data_->catalog.categories) cat_names.push_back(c.name);
  const auto shap = shapley_exact(*alert, *ctx_.store);
  const auto view = evidence_view(*alert, mask, *ctx_.store, ctx_.stats, data_->schema);
  return {200,
          {{"alert_id", alert_id},
           {"mask", mask.hex(k)},
           {"shapley", shap.to_json(cat_names, data_->class_names)},
           {"evidence", view.to_json(data_->class_names)}}};
}

ApiResponse TriageService::feature_stats() const {
  json out = json::array();
  for (std::size_t f = 0; f < ctx_.stats.size(); ++f) {
    out.push_back({{"name", data_->schema[f].name},
                   {"mean", ctx_.stats[f].mean},
                   {"median", ctx_.stats[f].median},
                   {"mode", ctx_.stats[f].mode}});
  }
  return {200, {{"features", out}}};
}

ApiResponse TriageService::create_session(const json& body) {
  constexpr int per_condition = 4;
  const auto& fresh = ctx_.split->fresh;
  if (fresh.size() < 3 * per_condition) return error(409, "not enough alerts for a session");
  std::lock_guard lock(mutex_);
  const std::uint64_t n = next_session_++;
  const json given = body.is_object() ? body.value("seed", json()) : json();
  const std::uint64_t sseed = given.is_number_integer() && given.get<std::int64_t>() >= 0
                                  ? given.get<std::uint64_t>()
                                  : mix_seed(seed_, n);
  SessionState s;
  s.id = "s" + std::to_string(n);
  s.alerts_per_condition = per_condition;
  // C1 and C2 are counterbalanced by the session seed; C3 always comes last.
  s.conditions = sseed % 2 == 0 ? std::vector{Condition::c1, Condition::c2, Condition::c3}
                                : std::vector{Condition::c2, Condition::c1, Condition::c3};
  std::vector<std::int64_t> ids;
  for (const auto& a : fresh) ids.push_back(a.alert_id);
  Rng rng(sseed);
  rng.shuffle(ids);
  ids.resize(3 * per_condition);
  s.alert_ids = ids;
  s.created = clock_();
  json blocks = json::array();
  for (std::size_t b = 0; b < s.conditions.size(); ++b) {
    blocks.push_back({{"condition", to_string(s.conditions[b])},
                      {"alerts", std::vector<std::int64_t>(ids.begin() + b * per_condition,
                                                           ids.begin() + (b + 1) * per_condition)}});
  }
  const auto id = s.id;
  sessions_.emplace(id, std::move(s));
  return {201, {{"session", id}, {"blocks", blocks}}};
}

ApiResponse TriageService::session(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return error(404, "unknown session " + id);
  const auto& s = it->second;
  json subs = json::object();
  for (const auto& [aid, sub] : s.submissions) {
    subs[std::to_string(aid)] = {{"class", data_->class_names[static_cast<std::size_t>(sub.predicted_class)]},
                                 {"confidence", sub.confidence},
                                 {"reliance", sub.reliance},
                                 {"elapsed_seconds", sub.elapsed_seconds}};
  }
  std::vector<std::string> conds;
  for (auto c : s.conditions) conds.push_back(to_string(c));
  return {200,
          {{"session", s.id},
           {"conditions", conds},
           {"alerts", s.alert_ids},
           {"submissions", subs},
           {"questionnaires", s.questionnaires.size()}}};
}

ApiResponse TriageService::classify(std::int64_t alert_id, const json& body) {
  if (!body.is_object()) return error(400, "body must be a JSON object");
  if (!body.contains("session") || !body.at("session").is_string()) return error(400, "missing session");
  const auto sid = body.at("session").get<std::string>();
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(sid);
  if (it == sessions_.end()) return error(404, "unknown session " + sid);
  auto& s = it->second;
  if (!find_alert(alert_id) || !s.condition_of(alert_id)) {
    return error(404, "alert " + std::to_string(alert_id) + " is not part of session " + sid);
  }
  if (s.submissions.count(alert_id)) return error(409, "alert " + std::to_string(alert_id) + " already classified");

  const auto cls = body.value("class", json());
  if (!cls.is_string()) return error(400, "missing class");
  const auto& names = data_->class_names;
  const auto pos = std::find(names.begin(), names.end(), cls.get<std::string>());
  if (pos == names.end()) return error(400, "invalid class '" + cls.get<std::string>() + "'");
  if (!int_in(body.value("confidence", json()), 0, 100)) return error(400, "confidence must be an integer 0-100");
  const auto rel = body.value("reliance", json());
  Submission sub;
  for (const char* key : {"features", "explanations", "knowledge"}) {
    if (!rel.is_object() || !int_in(rel.value(key, json()), 1, 5)) {
      return error(400, std::string("reliance.") + key + " must be an integer 1-5");
    }
    sub.reliance[key] = rel.at(key).get<int>();
  }
  sub.predicted_class = static_cast<int>(pos - names.begin());
  sub.confidence = body.at("confidence").get<int>();
  const auto start = s.timer_start.count(alert_id) ? s.timer_start.at(alert_id) : s.created;
  sub.elapsed_seconds = clock_() - start;
  s.submissions.emplace(alert_id, sub);
  return {201, {{"recorded", true}, {"alert_id", alert_id}, {"elapsed_seconds", sub.elapsed_seconds}}};
}

ApiResponse TriageService::questionnaire(const std::string& session_id, const json& body) {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return error(404, "unknown session " + session_id);
  if (!body.is_object()) return error(400, "body must be a JSON object");
  bool any = false;
  for (const char* key : {"trust", "cognitive_load"}) {
    if (!body.contains(key)) continue;
    const auto& items = body.at(key);
    if (!items.is_array() || items.empty()) return error(400, std::string(key) + " must be a non-empty array");
    for (const auto& v : items) {
      if (!int_in(v, 1, 7)) return error(400, std::string(key) + " items must be integers 1-7");
    }
    any = true;
  }
  if (!any) return error(400, "questionnaire needs trust or cognitive_load items");
  it->second.questionnaires.push_back(body);
  return {201, {{"recorded", true}, {"count", it->second.questionnaires.size()}}};
}

ApiResponse TriageService::dispatch(const std::string& method, const std::string& path,
                                    const std::map<std::string, std::string>& query, const std::string& body) {
  static const std::regex alert_re(R"(^/alerts/(-?\d+)/(features|suggestion|explanation|classification)$)");
  static const std::regex session_re(R"(^/sessions/([A-Za-z0-9_-]+)(/questionnaire)?$)");
  auto q = [&](const char* key) -> std::optional<std::string> {
    auto it = query.find(key);
    return it == query.end() ? std::nullopt : std::optional(it->second);
  };
  json parsed;
  if (method == "POST") {
    parsed = json::parse(body.empty() ? "{}" : body, nullptr, false);
    if (parsed.is_discarded()) return error(400, "body is not valid JSON");
  }
  std::smatch m;
  try {
    if (method == "GET" && path == "/alerts") return list_alerts();
    if (method == "GET" && path == "/features/stats") return feature_stats();
    if (method == "POST" && path == "/sessions") return create_session(parsed);
    if (std::regex_match(path, m, alert_re)) {
      const auto id = parse_id(m[1]);
      if (!id) return error(404, "unknown alert");
      const std::string what = m[2];
      if (method == "GET" && what == "features") return features(*id, q("session"));
      if (method == "GET" && what == "suggestion") return suggestion(*id);
      if (method == "GET" && what == "explanation") return explanation(*id, q("mask").value_or(""));
      if (method == "POST" && what == "classification") return classify(*id, parsed);
      return error(405, "method not allowed");
    }
    if (std::regex_match(path, m, session_re)) {
      if (m[2].matched) {
        if (method == "POST") return questionnaire(m[1], parsed);
      } else if (method == "GET") {
        return session(m[1]);
      }
      return error(405, "method not allowed");
    }
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
  return error(404, "no route for " + method + " " + path);
}

namespace {

void install_routes(httplib::Server& server, TriageService& service) {
  auto handler = [&service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const auto r = service.dispatch(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get(".*", handler);
  server.Post(".*", handler);
}

}  // namespace

void serve_http(TriageService& service, const std::string& host, int port) {
  httplib::Server server;
  install_routes(server, service);
  if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

struct HttpServer::Impl {
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(TriageService& service) : impl_(std::make_unique<Impl>()) {
  install_routes(impl_->server, service);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host) {
  const int port = impl_->server.bind_to_any_port(host);
  if (port <= 0) throw std::runtime_error("cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void HttpServer::stop() {
  if (impl_ && impl_->thread.joinable()) {
    impl_->server.stop();
    impl_->thread.join();
  }
}

}  // namespace cbuddy
