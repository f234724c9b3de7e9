#include "cbuddy/teaming.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "cbuddy/rng.hpp"

namespace cbuddy {

ContextMask Plan::mask() const {
  ContextMask m;
  for (int a : actions) m = m.with(a);
  return m;
}

nlohmann::json Plan::to_json(const ContextCatalog* catalog) const {
  nlohmann::json j = {{"actions", actions}, {"found", found}};
  if (catalog) {
    std::vector<std::string> names;
    for (int a : actions) names.push_back(catalog->categories[static_cast<std::size_t>(a)].name);
    j["categories"] = names;
  }
  return j;
}

Plan one_time_plan(const AssistantPolicy& assistant, InvestigationEnv& env, const AlertRecord& alert, int max_steps) {
  const int k = env.num_categories();
  const int env_cap = env.config().max_steps(k);
  const int cap = max_steps > 0 ? std::min(max_steps, env_cap) : env_cap;
  Plan plan;
  plan.found = false;
  Observation obs = env.reset(alert);
  for (int t = 0; t < cap; ++t) {
    const ActionId a = assistant.greedy_action(obs);
    if (a.is_classify(k)) {
      plan.found = true;
      break;
    }
    if (std::find(plan.actions.begin(), plan.actions.end(), a.value) == plan.actions.end()) {
      plan.actions.push_back(a.value);
    }
    const auto out = env.step(a);
    if (out.done) break;  // forced classification at the step cap
    obs = out.observation;
  }
  return plan;
}

std::optional<int> iterative_suggest(const AssistantPolicy& assistant, InvestigationEnv& env,
                                     const SuggestionHistory& history, const AlertRecord& alert) {
  const int k = env.num_categories();
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  Observation obs = env.reset(alert);
  for (int c : history.requested) {
    if (c < 0 || c >= k) throw std::invalid_argument("history holds an unknown category");
    used[static_cast<std::size_t>(c)] = true;
    // Replaying more requests than the step cap allows only matters for the
    // counters, which saturate anyway.
    if (env.done() || env.steps_taken() + 1 >= env.config().max_steps(k)) continue;
    obs = env.step(ActionId{c}).observation;
  }
  const auto probs = assistant.probabilities(obs);
  std::optional<int> best;
  for (int c = 0; c < k; ++c) {
    if (used[static_cast<std::size_t>(c)]) continue;
    if (!best || probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(*best)]) best = c;
  }
  if (best && probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(*best)]) return std::nullopt;
  return best;
}

AdoptionStrategy AdoptionStrategy::parse(std::string_view text) {
  const auto colon = text.find(':');
  const auto head = text.substr(0, colon);
  std::optional<double> arg;
  if (colon != std::string_view::npos) {
    const std::string tail(text.substr(colon + 1));
    try {
      std::size_t used = 0;
      arg = std::stod(tail, &used);
      if (used != tail.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument("bad strategy parameter in '" + std::string(text) + "'");
    }
  }
  AdoptionStrategy s;
  if (head == "alone") {
    s = alone();
  } else if (head == "always") {
    s = always();
  } else if (head == "random") {
    s = random(arg.value_or(0.5));
  } else if (head == "threshold") {
    s = with_threshold(arg.value_or(0.9));
  } else {
    throw std::invalid_argument("unknown adoption strategy '" + std::string(text) + "'");
  }
  if (arg && (s.kind == Kind::alone || s.kind == Kind::always)) {
    throw std::invalid_argument("strategy '" + std::string(head) + "' takes no parameter");
  }
  s.validate();
  return s;
}

std::string AdoptionStrategy::name() const {
  char buf[32];
  switch (kind) {
    case Kind::alone:
      return "alone";
    case Kind::always:
      return "always";
    case Kind::random:
      std::snprintf(buf, sizeof buf, "random:%.2f", p);
      return buf;
    case Kind::threshold:
      std::snprintf(buf, sizeof buf, "threshold:%.2f", threshold);
      return buf;
  }
  return "?";
}

void AdoptionStrategy::validate() const {
  if (kind == Kind::random && !(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("random adoption p must be in [0, 1]");
  if (kind == Kind::threshold && !(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("adoption threshold must be in (0, 1)");
  }
}

TeamDecision adopt_decision(const AdoptionStrategy& strategy, const Trajectory& analyst_traj, const Plan& plan,
                            ClassifierStore& store, const AlertRecord& alert) {
  if (analyst_traj.steps.empty() || !analyst_traj.steps.back().action.is_classify(store.catalog().num_categories())) {
    throw std::invalid_argument("analyst trajectory has not classified");
  }
  const int k = store.catalog().num_categories();
  TeamDecision d;
  d.alert_id = alert.alert_id;
  d.truth = alert.label;
  d.analyst_mask = analyst_traj.mask(k);
  d.analyst_pred = store.predict(d.analyst_mask, alert);
  d.suggested = plan.mask();

  switch (strategy.kind) {
    case AdoptionStrategy::Kind::alone:
      d.considered = false;
      break;
    case AdoptionStrategy::Kind::always:
      d.considered = true;
      break;
    case AdoptionStrategy::Kind::random:
      d.considered = Rng(mix_seed(strategy.seed, static_cast<std::uint64_t>(alert.alert_id))).uniform() < strategy.p;
      break;
    case AdoptionStrategy::Kind::threshold:
      d.considered = d.analyst_pred.confidence < strategy.threshold;
      break;
  }
  d.final_pred = d.analyst_pred;
  if (d.considered) {
    d.extended_pred = store.predict(d.analyst_mask | d.suggested, alert);
    if (d.extended_pred->confidence > d.analyst_pred.confidence) {
      d.adopted = true;
      d.final_pred = *d.extended_pred;
    }
  }
  return d;
}

std::string outcome_label(int truth, int pred, std::span<const int> negative_classes) {
  auto negative = [&](int c) { return std::find(negative_classes.begin(), negative_classes.end(), c) != negative_classes.end(); };
  if (negative(truth)) return negative(pred) ? "TN" : "FP";
  if (negative(pred)) return "FN";
  return pred == truth ? "TP" : "MC";
}

FlipCounts count_flips(const std::vector<TeamDecision>& decisions, std::span<const int> negative_classes) {
  FlipCounts f;
  for (const auto& d : decisions) {
    const bool before = d.analyst_pred.predicted_class == d.truth;
    const bool after = d.final_pred.predicted_class == d.truth;
    if (before && !after) ++f.correct_to_wrong;
    if (!before && after) ++f.wrong_to_correct;
    const auto a = outcome_label(d.truth, d.analyst_pred.predicted_class, negative_classes);
    const auto b = outcome_label(d.truth, d.final_pred.predicted_class, negative_classes);
    if (a != b) ++f.transitions[a + "->" + b];
  }
  return f;
}

std::string TeamingReport::decisions_csv() const {
  auto cls = [&](int c) {
    return c >= 0 && c < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(c)]
                                                               : std::to_string(c);
  };
  std::ostringstream out;
  out << "subset,analyst,strategy,seed,alert_id,truth,analyst_mask,suggested_mask,analyst_pred,analyst_conf,"
         "considered,extended_conf,adopted,final_pred,final_conf,outcome\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return std::string(buf);
  };
  for (const auto& row : rows) {
    for (const auto& d : row.decisions) {
      out << row.subset << ',' << row.analyst << ',' << row.strategy << ',' << row.seed << ',' << d.alert_id << ','
          << cls(d.truth) << ',' << d.analyst_mask.hex(num_categories) << ',' << d.suggested.hex(num_categories)
          << ',' << cls(d.analyst_pred.predicted_class) << ',' << num(d.analyst_pred.confidence) << ','
          << (d.considered ? 1 : 0) << ',' << (d.extended_pred ? num(d.extended_pred->confidence) : "") << ','
          << (d.adopted ? 1 : 0) << ',' << cls(d.final_pred.predicted_class) << ','
          << num(d.final_pred.confidence) << ','
          << outcome_label(d.truth, d.final_pred.predicted_class, negative_classes) << '\n';
    }
  }
  return out.str();
}

nlohmann::json TeamingReport::summary() const {
  nlohmann::json jrows = nlohmann::json::array();
  std::map<std::string, std::vector<double>> f1_by_strategy, conf_by_strategy;
  std::map<std::string, long> fp_by_strategy, fn_by_strategy;
  for (const auto& r : rows) {
    jrows.push_back({{"subset", r.subset},
                     {"analyst", r.analyst},
                     {"strategy", r.strategy},
                     {"seed", r.seed},
                     {"metrics", r.metrics.to_json()},
                     {"considered", r.considered},
                     {"adopted", r.adopted},
                     {"flips",
                      {{"correct_to_wrong", r.flips.correct_to_wrong},
                       {"wrong_to_correct", r.flips.wrong_to_correct},
                       {"transitions", r.flips.transitions}}}});
    f1_by_strategy[r.strategy].push_back(r.metrics.weighted_f1);
    conf_by_strategy[r.strategy].push_back(r.metrics.mean_confidence);
    fp_by_strategy[r.strategy] += r.metrics.errors.false_positives;
    fn_by_strategy[r.strategy] += r.metrics.errors.false_negatives;
  }
  nlohmann::json by_strategy = nlohmann::json::object();
  for (const auto& [s, f1] : f1_by_strategy) {
    by_strategy[s] = {{"mean_weighted_f1", mean(f1)},
                      {"mean_confidence", mean(conf_by_strategy[s])},
                      {"false_positives", fp_by_strategy[s]},
                      {"false_negatives", fn_by_strategy[s]},
                      {"rows", f1.size()}};
  }
  return {{"classes", class_names}, {"negative_classes", negative_classes}, {"strategies", by_strategy}, {"rows", jrows}};
}

std::vector<TeamRow> run_team_experiment(const TeamExperimentInput& input, InvestigationEnv& env,
                                         std::span<const int> negative_classes) {
  if (!input.assistant) throw std::invalid_argument("team experiment needs an assistant");
  auto& store = env.store();
  std::vector<Plan> plans;
  plans.reserve(input.alerts.size());
  for (const auto& a : input.alerts) plans.push_back(one_time_plan(*input.assistant, env, a));

  std::vector<TeamRow> rows;
  for (const auto& analyst : input.analysts) {
    std::vector<Trajectory> trajs;
    trajs.reserve(input.alerts.size());
    for (const auto& a : input.alerts) trajs.push_back(rollout(analyst, env, a));
    for (const auto& base : input.strategies) {
      for (auto seed : input.seeds) {
        auto strategy = base;
        strategy.seed = seed;
        TeamRow row;
        row.analyst = analyst.id;
        row.strategy = strategy.name();
        row.seed = seed;
        row.subset = input.subset;
        std::vector<int> preds, truths;
        std::vector<double> confs;
        for (std::size_t i = 0; i < input.alerts.size(); ++i) {
          auto d = adopt_decision(strategy, trajs[i], plans[i], store, input.alerts[i]);
          row.considered += d.considered;
          row.adopted += d.adopted;
          preds.push_back(d.final_pred.predicted_class);
          truths.push_back(d.truth);
          confs.push_back(d.final_pred.confidence);
          row.decisions.push_back(std::move(d));
        }
        row.metrics = metrics_report(preds, truths, confs, store.num_classes(), negative_classes);
        row.flips = count_flips(row.decisions, negative_classes);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

}  // namespace cbuddy
