#include <doctest.h>

#include "cbuddy/teaming.hpp"
#include "support.hpp"

using namespace cbtest;

namespace {

// Linear softmax policy whose action preferences ignore the observation.
AssistantPolicy fixed_preferences(std::size_t obs_size, std::vector<double> logits) {
  AssistantPolicy a;
  a.policy = Network::zeros(NetworkSpec{{static_cast<int>(obs_size), static_cast<int>(logits.size())}, OutputHead::softmax});
  for (std::size_t i = 0; i < logits.size(); ++i) a.policy.layers()[0].bias(static_cast<Eigen::Index>(i)) = logits[i];
  return a;
}

Trajectory requesting(InvestigationEnv& env, const AlertRecord& alert, std::vector<int> cats) {
  std::size_t i = 0;
  return run_episode(env, alert, [&](const Observation&) { return ActionId{i < cats.size() ? cats[i++] : 4}; });
}

const AssistantPolicy& toy_assistant() {
  static const AssistantPolicy a = behavior_clone(toy_expert().traces, BCConfig{});
  return a;
}

TeamDecision hand(int truth, int analyst, int final) {
  TeamDecision d;
  d.truth = truth;
  d.analyst_pred.predicted_class = analyst;
  d.final_pred.predicted_class = final;
  return d;
}

}  // namespace

TEST_CASE("one-time plans") {
  const auto& e = toy_expert();
  auto env = e.toy->make_env();
  const auto& alert = e.toy->test[0];

  const auto classify_now = fixed_preferences(env.observation_size(), {0, 0, 0, 0, 5});
  const auto p = one_time_plan(classify_now, env, alert);
  CHECK(p.actions.empty());
  CHECK(p.found);

  const auto stuck = fixed_preferences(env.observation_size(), {0, 5, 0, 0, 0});
  const auto q = one_time_plan(stuck, env, alert);
  CHECK(q.actions == std::vector<int>{1});
  CHECK_FALSE(q.found);
  CHECK(q.mask().bits == 0b0010);
  CHECK_FALSE(one_time_plan(stuck, env, alert, 3).found);

  int with_signature = 0;
  for (int i = 0; i < 50; ++i) {
    const auto plan = one_time_plan(toy_assistant(), env, e.toy->test[static_cast<std::size_t>(i)]);
    with_signature += plan.found && plan.mask().has(e.toy->label_category());
  }
  CHECK(with_signature >= 48);
}

TEST_CASE("iterative suggestions follow the policy ranking") {
  const auto& e = toy_expert();
  auto env = e.toy->make_env();
  const auto& alert = e.toy->test[1];
  const auto ranked = fixed_preferences(env.observation_size(), {1, 3, 2, 0, -1});
  CHECK(iterative_suggest(ranked, env, {}, alert) == 1);
  CHECK(iterative_suggest(ranked, env, {{1}}, alert) == 2);
  CHECK(iterative_suggest(ranked, env, {{1, 2}}, alert) == 0);
  CHECK(iterative_suggest(ranked, env, {{1, 2, 0}}, alert) == 3);
  CHECK_FALSE(iterative_suggest(ranked, env, {{0, 1, 2, 3}}, alert).has_value());
  const auto done = fixed_preferences(env.observation_size(), {1, 3, 2, 0, 4});
  CHECK_FALSE(iterative_suggest(done, env, {{1}}, alert).has_value());
  CHECK_THROWS_AS(iterative_suggest(ranked, env, {{7}}, alert), std::invalid_argument);

  // Trained assistant: the empty-history pick is the plan's first step, and
  // after it the pick is the best unused request at the replayed state.
  const auto& a = toy_assistant();
  for (int i = 0; i < 20; ++i) {
    const auto& x = e.toy->test[static_cast<std::size_t>(i)];
    const auto plan = one_time_plan(a, env, x);
    REQUIRE_FALSE(plan.actions.empty());
    const int top = plan.actions[0];
    CHECK(iterative_suggest(a, env, {}, x) == top);

    env.reset(x);
    const auto probs = a.probabilities(env.step(ActionId{top}).observation);
    int second = -1;
    for (int c = 0; c < 4; ++c) {
      if (c != top && (second < 0 || probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(second)])) second = c;
    }
    const auto want = probs[4] > probs[static_cast<std::size_t>(second)] ? std::nullopt : std::optional<int>(second);
    CHECK(iterative_suggest(a, env, {{top}}, x) == want);
  }
}

TEST_CASE("adoption decisions") {
  const auto& e = toy_expert();
  auto env = e.toy->make_env();
  auto& store = *e.toy->store;
  const Plan signature{{2}, true};

  // Find a test alert where the blind analyst is unsure and the signature
  // category makes it confident.
  const AlertRecord* pick = nullptr;
  for (const auto& a : e.toy->test) {
    const auto blind = store.predict(ContextMask{0}, a);
    const auto informed = store.predict(ContextMask{0b0100}, a);
    if (blind.confidence < 0.9 && informed.confidence >= 0.9) {
      pick = &a;
      break;
    }
  }
  REQUIRE(pick != nullptr);
  const auto blind_traj = requesting(env, *pick, {});
  const auto d = adopt_decision(AdoptionStrategy::with_threshold(0.9), blind_traj, signature, store, *pick);
  CHECK(d.considered);
  CHECK(d.adopted);
  CHECK(d.final_pred == store.predict(ContextMask{0b0100}, *pick));

  // Confident analyst: the gate stays closed.
  const auto informed_traj = requesting(env, *pick, {2});
  const auto closed = adopt_decision(AdoptionStrategy::with_threshold(0.9), informed_traj, Plan{{0}, true}, store, *pick);
  CHECK_FALSE(closed.considered);
  CHECK_FALSE(closed.extended_pred.has_value());
  CHECK(closed.final_pred == closed.analyst_pred);

  // Nothing new to look at: equal confidence is not an improvement.
  const auto same = adopt_decision(AdoptionStrategy::always(), informed_traj, signature, store, *pick);
  CHECK(same.considered);
  CHECK(same.extended_pred == same.analyst_pred);
  CHECK_FALSE(same.adopted);

  CHECK_FALSE(adopt_decision(AdoptionStrategy::alone(), blind_traj, signature, store, *pick).considered);
  Trajectory open = blind_traj;
  open.steps.pop_back();
  CHECK_THROWS_AS(adopt_decision(AdoptionStrategy::always(), open, signature, store, *pick), std::invalid_argument);
}

TEST_CASE("strategy names") {
  CHECK(AdoptionStrategy::parse("threshold:0.9").name() == "threshold:0.90");
  CHECK(AdoptionStrategy::parse("random:0.3").p == 0.3);
  CHECK(AdoptionStrategy::parse("random").p == 0.5);
  CHECK(AdoptionStrategy::parse("always").kind == AdoptionStrategy::Kind::always);
  CHECK(AdoptionStrategy::parse("alone").name() == "alone");
  CHECK_THROWS(AdoptionStrategy::parse("sometimes"));
  CHECK_THROWS(AdoptionStrategy::parse("random:1.5"));
}

TEST_CASE("flip counts on a hand-labelled fixture") {
  // Classes: 0 benign, 1 and 2 attacks.
  const std::vector<TeamDecision> ds = {
      hand(0, 0, 0),  // TN
      hand(0, 0, 1),  // TN->FP, correct to wrong
      hand(0, 1, 0),  // FP->TN, wrong to correct
      hand(1, 1, 1),  // TP
      hand(1, 0, 1),  // FN->TP, wrong to correct
      hand(1, 1, 0),  // TP->FN, correct to wrong
      hand(1, 2, 1),  // MC->TP, wrong to correct
      hand(2, 1, 2),  // MC->TP, wrong to correct
      hand(2, 2, 1),  // TP->MC, correct to wrong
      hand(2, 0, 0),  // FN
  };
  const std::vector<int> neg = {0};
  const auto f = count_flips(ds, neg);
  CHECK(f.correct_to_wrong == 3);
  CHECK(f.wrong_to_correct == 4);
  const std::map<std::string, long> want = {{"TN->FP", 1}, {"FP->TN", 1}, {"FN->TP", 1},
                                            {"TP->FN", 1}, {"MC->TP", 2}, {"TP->MC", 1}};
  CHECK(f.transitions == want);
}

TEST_CASE("team experiment") {
  const auto& e = toy_expert();
  auto env = e.toy->make_env();
  auto weak_cfg = toy_analyst_config(9);
  weak_cfg.max_timesteps = 400;
  TeamExperimentInput in;
  in.analysts = {e.expert, train_analyst(e.toy->factory(), e.toy->train, weak_cfg)};
  in.assistant = &toy_assistant();
  in.alerts.assign(e.toy->test.begin(), e.toy->test.begin() + 80);
  in.strategies = {AdoptionStrategy::alone(), AdoptionStrategy::always(), AdoptionStrategy::random(0.5),
                   AdoptionStrategy::with_threshold(0.5), AdoptionStrategy::with_threshold(0.7),
                   AdoptionStrategy::with_threshold(0.9), AdoptionStrategy::with_threshold(0.99)};
  in.seeds = {0, 1};
  const std::vector<int> neg = {0};
  const auto rows = run_team_experiment(in, env, neg);
  REQUIRE(rows.size() == 2 * 7 * 2);

  for (const auto& r : rows) {
    REQUIRE(r.decisions.size() == 80);
    for (const auto& d : r.decisions) CHECK(d.final_pred.confidence >= d.analyst_pred.confidence);
  }

  for (std::size_t a = 0; a < 2; ++a) {
    const auto& alone = rows[a * 14];
    const auto& always = rows[a * 14 + 2];
    CHECK(alone.strategy == "alone");
    CHECK(always.strategy == "always");
    std::vector<int> preds, truths;
    std::vector<double> confs;
    for (std::size_t i = 0; i < 80; ++i) {
      const auto& d = alone.decisions[i];
      CHECK_FALSE(d.considered);
      CHECK(d.final_pred == d.analyst_pred);
      preds.push_back(d.analyst_pred.predicted_class);
      truths.push_back(d.truth);
      confs.push_back(d.analyst_pred.confidence);
      if (!always.decisions[i].considered) CHECK(always.decisions[i].final_pred == d.final_pred);
    }
    const auto base = metrics_report(preds, truths, confs, 3, neg);
    CHECK(alone.metrics.weighted_f1 == base.weighted_f1);
    CHECK(alone.metrics.errors.false_positives == base.errors.false_positives);
    CHECK(alone.metrics.errors.false_negatives == base.errors.false_negatives);

    // Thresholds 0.5 < 0.7 < 0.9 < 0.99 give nested considered sets.
    for (std::size_t t = 0; t + 1 < 4; ++t) {
      const auto& lo = rows[a * 14 + 6 + 2 * t];
      const auto& hi = rows[a * 14 + 8 + 2 * t];
      for (std::size_t i = 0; i < 80; ++i) {
        if (lo.decisions[i].considered) CHECK(hi.decisions[i].considered);
      }
    }
  }

  TeamingReport rep{{"a", "b", "c"}, neg, 4, rows};
  TeamingReport again{{"a", "b", "c"}, neg, 4, run_team_experiment(in, env, neg)};
  CHECK(rep.summary().dump() == again.summary().dump());
  CHECK(rep.decisions_csv() == again.decisions_csv());
  const auto csv = rep.decisions_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 28 * 80);
}
