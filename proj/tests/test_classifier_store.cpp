#include <doctest.h>

#include <thread>

#include "support.hpp"

using namespace cbtest;

namespace {

double accuracy(ClassifierStore& store, ContextMask mask, const std::vector<AlertRecord>& alerts) {
  int ok = 0;
  for (const auto& a : alerts) ok += store.predict(mask, a).predicted_class == a.label;
  return static_cast<double>(ok) / static_cast<double>(alerts.size());
}

}  // namespace

TEST_CASE("confidence and prediction conventions") {
  CHECK(confidence_of(std::vector<double>{0.2, 0.8}) == 0.8);
  CHECK(confidence_of(std::vector<double>(6, 1.0 / 6)) == doctest::Approx(1.0 / 6));
  const auto tie = Prediction::from_probs({0.5, 0.5});
  CHECK(tie.confidence == 0.5);
  CHECK(tie.predicted_class == 0);
}

TEST_CASE("context mask hex encoding") {
  CHECK(ContextMask{0x5}.hex(4) == "5");
  CHECK(ContextMask{0x1a}.hex(9) == "01a");
  CHECK(ContextMask::parse_hex("01A", 9).bits == 0x1a);
  CHECK_THROWS_AS(ContextMask::parse_hex("1z", 8), std::invalid_argument);
  CHECK_THROWS_AS(ContextMask::parse_hex("10", 4), std::invalid_argument);
  CHECK(ContextMask::full(5).bits == 0x1f);
}

TEST_CASE("classifiers are memoized per mask") {
  auto toy = make_toy(1);
  const auto a = toy->store->get_or_train(ContextMask{0b0100});
  const auto b = toy->store->get_or_train(ContextMask{0b0100});
  CHECK(a.get() == b.get());
  CHECK(a->training_digest == toy->store->digest());
  CHECK(toy->store->training_runs() == 1);
  CHECK_THROWS_AS(toy->store->get_or_train(ContextMask{0b10000}), std::invalid_argument);
}

TEST_CASE("concurrent requests for one mask train once") {
  auto toy = make_toy(2);
  std::vector<std::thread> ts;
  std::vector<const ClassifierHandle*> got(8);
  for (int i = 0; i < 8; ++i) {
    ts.emplace_back([&, i] { got[static_cast<std::size_t>(i)] = toy->store->get_or_train(ContextMask{0b0110}).get(); });
  }
  for (auto& t : ts) t.join();
  CHECK(toy->store->training_runs() == 1);
  for (auto* p : got) CHECK(p == got[0]);
}

TEST_CASE("initial-only mask uses the initial features") {
  auto toy = make_toy(1);
  const auto h = toy->store->get_or_train(ContextMask{0});
  CHECK(h->model.spec().input_size() == 2);
  CHECK(h->input_indices == toy->ds.catalog.initial_indices);
}

TEST_CASE("untrained classifiers predict uniformly") {
  auto toy = make_toy(1, 0);
  const auto p = toy->store->predict(ContextMask::full(4), toy->test[0]);
  for (double x : p.probs) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(p.confidence == doctest::Approx(1.0 / 3));
}

TEST_CASE("full mask separates the synthetic classes") {
  auto toy = make_toy(1);
  CHECK(accuracy(*toy->store, ContextMask::full(4), toy->test) >= 0.95);
}

TEST_CASE("predictions ignore masked-out features") {
  auto toy = make_toy(3);
  Rng rng(21);
  for (int t = 0; t < 40; ++t) {
    const ContextMask m{static_cast<std::uint32_t>(rng.below(16))};
    const auto inputs = mask_features(toy->ds.catalog, m);
    AlertRecord a = toy->test[rng.below(toy->test.size())];
    AlertRecord b = a;
    for (std::size_t f = 0; f < b.values.size(); ++f) {
      if (std::find(inputs.begin(), inputs.end(), f) == inputs.end()) b.values[f] += rng.normal(0, 50);
    }
    CHECK(toy->store->predict(m, a) == toy->store->predict(m, b));
  }
}

TEST_CASE("more context does not lose accuracy") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto toy = make_toy(seed);
    const double full = accuracy(*toy->store, ContextMask::full(4), toy->test);
    const double signature = accuracy(*toy->store, ContextMask{0b0100}, toy->test);
    CHECK(full >= signature - 0.02);
  }
}

TEST_CASE("cache directory holds one checkpoint per mask") {
  TempDir dir("store");
  auto toy = make_toy(4);
  const auto bal = balance_oversample(toy->train, 3, 600, 4);
  ClassifierConfig cc;
  cc.seed = 4;
  Prediction first;
  {
    ClassifierStore store(toy->ds.catalog, 3, bal, Standardizer::fit(toy->train), cc, dir.path);
    first = store.predict(ContextMask{0b1010}, toy->test[5]);
    CHECK(store.training_runs() == 1);
  }
  CHECK(std::filesystem::exists(dir.path / "a.json"));
  ClassifierStore again(toy->ds.catalog, 3, bal, Standardizer::fit(toy->train), cc, dir.path);
  CHECK(again.predict(ContextMask{0b1010}, toy->test[5]) == first);
  CHECK(again.training_runs() == 0);
}

TEST_CASE("classifier training is reproducible") {
  auto a = make_toy(6);
  auto b = make_toy(6);
  const auto ha = a->store->get_or_train(ContextMask{0b0101});
  const auto hb = b->store->get_or_train(ContextMask{0b0101});
  CHECK(ha->model.to_json() == hb->model.to_json());
}
