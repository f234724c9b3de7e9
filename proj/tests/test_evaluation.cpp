#include <doctest.h>

#include "cbuddy/evaluation.hpp"
#include "criteria.hpp"

using namespace cbtest;

TEST_CASE("weighted F1") {
  const std::vector<int> t = {0, 0, 1, 1};
  CHECK(weighted_f1(t, t) == 1.0);
  const std::vector<int> all_a = {0, 0, 0, 0};
  const ConfusionMatrix cm(t, all_a, 2);
  const auto f1 = per_class_f1(cm);
  CHECK(f1[0] == doctest::Approx(2.0 / 3));
  CHECK(f1[1] == 0.0);
  CHECK(weighted_f1(all_a, t) == doctest::Approx(1.0 / 3));
  CHECK(weighted_f1(all_a, all_a) == 1.0);
  CHECK_THROWS_AS(weighted_f1(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("weighted F1 is invariant under relabeling") {
  Rng rng(3);
  std::vector<int> t, p;
  for (int i = 0; i < 200; ++i) {
    t.push_back(static_cast<int>(rng.below(4)));
    p.push_back(rng.uniform() < 0.7 ? t.back() : static_cast<int>(rng.below(4)));
  }
  const std::vector<int> perm = {2, 0, 3, 1};
  std::vector<int> t2, p2;
  for (int x : t) t2.push_back(perm[static_cast<std::size_t>(x)]);
  for (int x : p) p2.push_back(perm[static_cast<std::size_t>(x)]);
  CHECK(weighted_f1(p2, t2) == doctest::Approx(weighted_f1(p, t)).epsilon(1e-12));
}

TEST_CASE("confusion matrix and binary errors") {
  // classes: 0 benign (negative), 1 scan, 2 miner
  const std::vector<int> truth = {0, 0, 0, 1, 1, 2, 2, 2};
  const std::vector<int> pred = {0, 1, 2, 1, 0, 2, 1, 2};
  const ConfusionMatrix cm(truth, pred, 3);
  CHECK(cm.total() == 8);
  CHECK(cm.tp(2) == 2);
  CHECK(cm.fp(1) == 2);
  CHECK(cm.fn(0) == 2);
  CHECK(cm.tn(0) == 4);
  const std::vector<int> neg = {0};
  const auto e = binary_errors(cm, neg);
  CHECK(e.false_positives == 2);
  CHECK(e.false_negatives == 1);
  CHECK(e.negatives == 3);
  CHECK(e.positives == 5);
  CHECK(e.fp_rate() == doctest::Approx(2.0 / 3));
  CHECK_THROWS_AS(ConfusionMatrix(3).add(3, 0), std::out_of_range);
}

TEST_CASE("McNemar") {
  const auto t = mcnemar(1, 9);
  CHECK(t.statistic == doctest::Approx(4.9));
  CHECK(t.p_value == doctest::Approx(22.0 / 1024).epsilon(1e-12));
  CHECK(t.effect_size == doctest::Approx(0.4));
  const auto eq = mcnemar(4, 4);
  CHECK(eq.p_value == 1.0);
  CHECK(eq.effect_size == 0.0);
  CHECK(mcnemar(0, 5).p_value == doctest::Approx(0.0625).epsilon(1e-12));
  // Large-sample branch: chi-square with continuity correction, 1 df.
  const auto big = mcnemar(10, 30);
  CHECK(big.statistic == doctest::Approx(361.0 / 40));
  CHECK(big.p_value == doctest::Approx(std::erfc(std::sqrt(361.0 / 40 / 2))).epsilon(1e-12));
  CHECK_THROWS_AS(mcnemar(0, 0), std::invalid_argument);
}

TEST_CASE("signed-rank test") {
  const std::vector<double> pos = {1, 2, 3, 4, 5, 6};
  const auto t = wilcoxon_signed_rank(pos);
  CHECK(t.statistic == 0.0);
  CHECK(t.p_value == doctest::Approx(0.03125).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(std::vector<double>{1, -1, 2, -2, 3, -3}).p_value == doctest::Approx(1.0));
  const auto tb = textbook_deltas();
  CHECK(std::abs(wilcoxon_signed_rank(tb).p_value - brute_wilcoxon_p(tb)) <= 1e-12);
  CHECK_THROWS_AS(wilcoxon_signed_rank(std::vector<double>{1, 2, 0, 0}), std::invalid_argument);
}

TEST_CASE("signed-rank normal approximation agrees with the exact path near the switch") {
  Rng rng(9);
  std::vector<double> d;
  for (int i = 0; i < 25; ++i) d.push_back(rng.normal(0.4, 1.0));
  const double exact = wilcoxon_signed_rank(d).p_value;
  d.push_back(rng.normal(0.4, 1.0));
  const double approx = wilcoxon_signed_rank(d).p_value;
  CHECK(std::abs(exact - approx) < 0.05);
}

TEST_CASE("Bonferroni") {
  const std::vector<double> p = {0.01, 0.2};
  CHECK(bonferroni(p, 2) == std::vector<double>{0.02, 0.4});
  CHECK(bonferroni(std::vector<double>{0.6}, 2)[0] == 1.0);
  CHECK(bonferroni(std::vector<double>{0.3}, 1)[0] == 0.3);
}

TEST_CASE("Cohen's d") {
  const std::vector<double> x = {0, 1, 2}, y = {-1, 0, 1};
  CHECK(cohen_d(x, x) == 0.0);
  CHECK(cohen_d(x, y) == doctest::Approx(1.0));
  CHECK(cohen_d(y, x) == -cohen_d(x, y));
  CHECK_THROWS_AS(cohen_d(std::vector<double>{1}, y), std::invalid_argument);
}

TEST_CASE("metrics report") {
  const std::vector<int> truth = {0, 1, 1, 0}, pred = {0, 1, 0, 0};
  const std::vector<double> conf = {0.9, 0.8, 0.6, 0.7};
  const std::vector<int> neg = {0};
  const auto r = metrics_report(pred, truth, conf, 2, neg);
  CHECK(r.n == 4);
  CHECK(r.mean_confidence == doctest::Approx(0.75));
  CHECK(r.median_confidence == doctest::Approx(0.75));
  CHECK(r.errors.false_negatives == 1);
  CHECK(r.weighted_f1 == doctest::Approx(weighted_f1(pred, truth)));
}
