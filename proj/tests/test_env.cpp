#include <doctest.h>

#include "support.hpp"

using namespace cbtest;

TEST_CASE("reset") {
  auto toy = make_toy(1);
  auto env = toy->make_env();
  const auto obs = env.reset(toy->test[0]);
  CHECK(obs.request_counters == std::vector<int>(4, 0));
  CHECK(obs.confidence == doctest::Approx(1.0 / 3));
  CHECK(obs.repeat_ratio == 0.0);
  CHECK(obs.size() == env.observation_size());
  const auto& init = toy->ds.catalog.initial_indices;
  for (std::size_t f = 0; f < obs.feature_slots.size(); ++f) {
    const bool initial = std::find(init.begin(), init.end(), f) != init.end();
    if (!initial) CHECK(obs.feature_slots[f] == 0.0);
    if (initial) CHECK(obs.feature_slots[f] == toy->store->standardizer().apply(f, toy->test[0].values[f]));
  }
  CHECK(env.num_actions() == 5);
}

TEST_CASE("request populates slots and counters") {
  auto toy = make_toy(1);
  auto env = toy->make_env();
  env.reset(toy->test[1]);
  const auto out = env.step(ActionId{2});
  CHECK(out.info.novel);
  CHECK_FALSE(out.done);
  CHECK(out.observation.request_counters == std::vector<int>{0, 0, 1, 0});
  for (auto f : toy->ds.catalog.categories[2].feature_indices) CHECK(out.observation.feature_slots[f] != 0.0);
  for (auto f : toy->ds.catalog.categories[1].feature_indices) CHECK(out.observation.feature_slots[f] == 0.0);
  const auto pred = toy->store->predict(ContextMask{0b0100}, toy->test[1]);
  CHECK(out.observation.confidence == pred.confidence);
  // Confidence rises from the 1/3 prior, and the gain is paid on top of the novelty bonus.
  CHECK(out.reward == doctest::Approx(-0.02 + 0.2 + (pred.confidence - 1.0 / 3)).epsilon(1e-12));
}

TEST_CASE("classify rewards") {
  auto toy = make_toy(1);
  auto env = toy->make_env();
  const auto& alert = toy->test[2];

  SUBCASE("with context") {
    env.reset(alert);
    env.step(ActionId{2});
    const auto out = env.step(ActionId{4});
    CHECK(out.done);
    REQUIRE(out.info.prediction);
    const auto& p = *out.info.prediction;
    CHECK(p == toy->store->predict(ContextMask{0b0100}, alert));
    CHECK(out.reward == classify_reward(p.predicted_class, alert.label, p.confidence, true, env.config()));
    CHECK_THROWS_AS(env.step(ActionId{0}), std::logic_error);
  }
  SUBCASE("without context") {
    env.reset(alert);
    const auto out = env.step(ActionId{4});
    const auto& p = *out.info.prediction;
    CHECK(out.reward == classify_reward(p.predicted_class, alert.label, p.confidence, false, env.config()));
  }
  SUBCASE("incorrect, low confidence") {
    CHECK(classify_reward(0, 1, 0.4, true, env.config()) == doctest::Approx(-10.4));
    CHECK(classify_reward(0, 1, 0.4, false, env.config()) == doctest::Approx(-15.4));
  }
}

TEST_CASE("repeat ratio and counter cap") {
  auto toy = make_toy(1);
  auto env = toy->make_env();
  env.reset(toy->test[3]);
  env.step(ActionId{0});
  CHECK(env.observation().repeat_ratio == 0.0);
  env.step(ActionId{1});
  CHECK(env.observation().repeat_ratio == 0.0);
  env.step(ActionId{0});
  CHECK(env.observation().repeat_ratio == doctest::Approx(1.0 / 3));
  env.step(ActionId{0});
  CHECK(env.observation().repeat_ratio == doctest::Approx(2.0 / 4));
  CHECK(env.observation().request_counters[0] == 2);
}

TEST_CASE("episodes are capped at 3K steps with a forced classification") {
  auto toy = make_toy(1);
  auto env = toy->make_env();
  env.reset(toy->test[4]);
  StepOutcome out;
  int steps = 0;
  while (!env.done()) {
    out = env.step(ActionId{1});
    ++steps;
  }
  CHECK(steps == 12);
  CHECK(out.info.forced);
  CHECK(out.action.is_classify(4));
  CHECK(out.info.prediction.has_value());
}

TEST_CASE("random action sequences keep the observation invariants") {
  auto toy = make_toy(2);
  auto env = toy->make_env();
  Rng rng(13);
  for (int ep = 0; ep < 60; ++ep) {
    auto prev = env.reset(toy->test[rng.below(toy->test.size())]);
    int steps = 0;
    bool repeated = false;
    while (!env.done()) {
      const ActionId a{static_cast<int>(rng.below(5))};
      const auto out = env.step(a);
      ++steps;
      CHECK(std::isfinite(out.reward));
      const auto& o = out.observation;
      for (int k = 0; k < 4; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        CHECK(o.request_counters[ks] >= prev.request_counters[ks]);
        CHECK(o.request_counters[ks] <= 2);
        bool any = false;
        for (auto f : toy->ds.catalog.categories[ks].feature_indices) any = any || o.feature_slots[f] != 0.0;
        CHECK(any == (o.request_counters[ks] > 0));
      }
      repeated = repeated || out.info.repeat;
      if (!repeated) CHECK(o.repeat_ratio == 0.0);
      prev = o;
    }
    CHECK(steps <= 12);
  }
}

TEST_CASE("transitions are deterministic") {
  auto toy = make_toy(3);
  auto e1 = toy->make_env();
  auto e2 = toy->make_env();
  const std::vector<int> actions = {3, 2, 2, 0, 4};
  e1.reset(toy->test[7]);
  e2.reset(toy->test[7]);
  for (int a : actions) {
    const auto x = e1.step(ActionId{a});
    const auto y = e2.step(ActionId{a});
    CHECK(x.observation == y.observation);
    CHECK(x.reward == y.reward);
  }
}

TEST_CASE("environment settings validation and serialization") {
  EnvConfig c;
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(4), std::invalid_argument);
  c = EnvConfig{};
  c.max_steps_per_episode = 4;
  CHECK_THROWS_AS(c.validate(4), std::invalid_argument);
  c.max_steps_per_episode = 7;
  c.phi = 12;
  const auto back = EnvConfig::from_json(c.to_json());
  CHECK(back.max_steps(4) == 7);
  CHECK(back.phi == 12);
  CHECK(EnvConfig{}.max_steps(5) == 15);
}
