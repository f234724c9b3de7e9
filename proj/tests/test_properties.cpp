#include <doctest.h>

#include "criteria.hpp"

using namespace cbtest;

TEST_CASE("reward cases match hand-computed values") {
  for (const auto& c : reward_cases()) {
    INFO(c.name);
    CHECK(std::abs(c.got - c.want) <= 1e-12);
  }
}

TEST_CASE("shapley values satisfy the axioms on random games") {
  const auto r = shapley_axioms();
  CHECK(r.efficiency <= 1e-9);
  CHECK(r.dummy == 0.0);
  CHECK(r.symmetry <= 1e-9);
  CHECK(r.enumeration <= 1e-9);
  CHECK(r.sampled <= 0.02);
}

TEST_CASE("analytic gradients agree with central differences") {
  const auto r = gradient_checks();
  CHECK(r.classifier <= 1e-3);
  CHECK(r.policy <= 1e-3);
  CHECK(r.discriminator <= 1e-3);
}

TEST_CASE("test statistics agree with enumeration and closed forms") {
  const auto r = stats_oracles();
  CHECK(r.wilcoxon_fixtures > 30);
  CHECK(r.wilcoxon <= 1e-12);
  CHECK(r.mcnemar <= 1e-12);
  CHECK(r.bonferroni <= 1e-12);
  CHECK(r.cohen <= 1e-12);
}
