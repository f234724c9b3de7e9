#include <doctest.h>

#include "cbuddy/explainer.hpp"
#include "support.hpp"

using namespace cbtest;

namespace {

CoalitionGame table_game(std::vector<std::vector<double>> table) {
  return [t = std::move(table)](ContextMask m) { return t[m.bits]; };
}

std::vector<std::vector<double>> random_table(int k, Rng& rng) {
  std::vector<std::vector<double>> t(1U << k, std::vector<double>(1));
  for (auto& row : t) row[0] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("two-player hand example") {
  const auto a = shapley_exact(2, table_game({{0.0}, {0.5}, {0.5}, {1.0}}));
  CHECK(a.value(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.value(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.baseline[0] == 0.0);
  CHECK(a.full[0] == 1.0);
}

TEST_CASE("efficiency on random four-category games") {
  Rng rng(31);
  for (int g = 0; g < 20; ++g) {
    const auto t = random_table(4, rng);
    const auto a = shapley_exact(4, table_game(t));
    double sum = 0.0;
    for (int i = 0; i < 4; ++i) sum += a.value(i, 0);
    CHECK(std::abs(sum - (t[15][0] - t[0][0])) <= 1e-12);
  }
  CHECK_THROWS_AS(shapley_exact(kMaxCategories + 1, table_game({})), std::invalid_argument);
}

TEST_CASE("sampled estimator") {
  Rng rng(41);
  SUBCASE("one category, one permutation is exact") {
    const auto g = table_game({{0.2}, {0.9}});
    CHECK(shapley_sampled(1, g, 1, 3).value(0, 0) == doctest::Approx(shapley_exact(1, g).value(0, 0)).epsilon(1e-15));
  }
  SUBCASE("deterministic per seed") {
    const auto g = table_game(random_table(5, rng));
    const auto a = shapley_sampled(5, g, 37, 9);
    const auto b = shapley_sampled(5, g, 37, 9);
    CHECK(a.phi == b.phi);
    CHECK_THROWS_AS(shapley_sampled(5, g, 0, 9), std::invalid_argument);
  }
  SUBCASE("error shrinks as the permutation count doubles") {
    // Mean absolute error over 20 games and seeds at 25, 50, ..., 800 permutations.
    std::vector<double> err(6, 0.0);
    for (int trial = 0; trial < 20; ++trial) {
      const auto g = table_game(random_table(6, rng));
      const auto exact = shapley_exact(6, g);
      for (int j = 0; j < 6; ++j) {
        const auto est = shapley_sampled(6, g, 25 << j, mix_seed(5, static_cast<std::uint64_t>(trial)));
        for (int i = 0; i < 6; ++i) err[static_cast<std::size_t>(j)] += std::abs(est.value(i, 0) - exact.value(i, 0));
      }
    }
    for (int j = 1; j < 6; ++j) CHECK(err[static_cast<std::size_t>(j)] < err[static_cast<std::size_t>(j - 1)]);
  }
}

TEST_CASE("characteristic values come from the classifier store") {
  auto uniform = make_toy(1, 0);
  CHECK(characteristic_value(ContextMask{0}, uniform->test[0], 2, *uniform->store) == doctest::Approx(1.0 / 3));
  auto toy = make_toy(1);
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const double v = characteristic_value(ContextMask{static_cast<std::uint32_t>(rng.below(16))}, toy->test[static_cast<std::size_t>(t)],
                                          static_cast<int>(rng.below(3)), *toy->store);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(characteristic_value(ContextMask{0}, toy->test[0], 3, *toy->store), std::out_of_range);
}

TEST_CASE("store attributions credit the signature category") {
  auto toy = make_toy(1);
  int credited = 0;
  for (int i = 0; i < 30; ++i) {
    const auto& alert = toy->test[static_cast<std::size_t>(i)];
    const auto a = shapley_exact(alert, *toy->store);
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) sum += a.value(k, alert.label);
    CHECK(std::abs(sum - (a.full[static_cast<std::size_t>(alert.label)] - a.baseline[static_cast<std::size_t>(alert.label)])) <= 1e-9);
    int best = 0;
    for (int k = 1; k < 4; ++k) {
      if (a.value(k, alert.label) > a.value(best, alert.label)) best = k;
    }
    credited += best == toy->label_category();
  }
  CHECK(credited >= 27);
}

TEST_CASE("evidence view") {
  auto toy = make_toy(1);
  const auto stats = feature_stats(toy->train);
  const auto& alert = toy->test[4];
  const ContextMask mask{0b0100};
  const auto view = evidence_view(alert, mask, *toy->store, stats, toy->ds.schema);
  const auto handle = toy->store->get_or_train(mask);
  REQUIRE(view.features.size() == alert.values.size());

  std::vector<double> totals(3, 0.0);
  for (const auto& f : view.features) {
    const auto it = std::find(handle->input_indices.begin(), handle->input_indices.end(), f.feature);
    if (it == handle->input_indices.end()) {
      for (double c : f.contribution) CHECK(c == 0.0);
      continue;
    }
    // Logistic model: the logit delta is w_cj * (z(x_f) - z(mean_f)).
    const auto j = static_cast<Eigen::Index>(it - handle->input_indices.begin());
    const double dz = (alert.values[f.feature] - stats[f.feature].mean) / handle->input_scale[static_cast<std::size_t>(j)];
    for (int c = 0; c < 3; ++c) {
      const double want = handle->model.layers()[0].weights(c, j) * dz;
      CHECK(std::abs(f.contribution[static_cast<std::size_t>(c)] - want) <= 1e-12);
      totals[static_cast<std::size_t>(c)] += f.contribution[static_cast<std::size_t>(c)];
    }
  }
  for (int c = 0; c < 3; ++c) CHECK(view.class_totals[static_cast<std::size_t>(c)] == doctest::Approx(totals[static_cast<std::size_t>(c)]));
  CHECK(view.prediction == toy->store->predict(mask, alert));

  auto uniform = make_toy(1, 0);
  const auto flat = evidence_view(alert, ContextMask::full(4), *uniform->store, stats, toy->ds.schema);
  for (const auto& f : flat.features) {
    for (double c : f.contribution) CHECK(c == 0.0);
  }
  const auto j = view.to_json({"a", "b", "c"});
  CHECK(j.at("features").size() == alert.values.size());
  CHECK(j.at("class_totals").size() == 3);
}
