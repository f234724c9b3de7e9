#include <doctest.h>

#include <fstream>
#include <thread>

#include "cbuddy/repository.hpp"
#include "support.hpp"

using namespace cbtest;

namespace {

std::vector<TraceRecord> make_records(int n) {
  auto toy = make_toy(1, 0);
  auto env = toy->make_env();
  std::vector<TraceRecord> out;
  for (int i = 0; i < n; ++i) {
    const int first = i % 4;
    int step = 0;
    const PolicyFn policy = [&](const Observation&) { return ActionId{step++ == 0 ? first : 4}; };
    TraceRecord r;
    r.trajectory = run_episode(env, toy->test[static_cast<std::size_t>(i % 300)], policy, "x");
    r.analyst_id = i % 3 == 0 ? "a2c-1" : "dqn-1";
    r.algorithm = i % 3 == 0 ? "a2c" : "dqn";
    r.subset_id = i % 2;
    r.seed = static_cast<std::uint64_t>(i);
    r.timestamp = utc_timestamp();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("save and load round trip") {
  TempDir dir("repo");
  const auto recs = make_records(300);
  const auto path = dir.path / "traces.jsonl";
  CHECK(save_traces(path, recs) == 300);
  const auto back = load_traces(path);
  REQUIRE(back.size() == 300);
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(back[i] == recs[i]);
}

TEST_CASE("filters") {
  TempDir dir("repo");
  const auto path = dir.path / "traces.jsonl";
  save_traces(path, make_records(30));
  const auto a2c = load_traces(path, TraceFilter{std::nullopt, std::nullopt, "a2c"});
  CHECK(a2c.size() == 10);
  for (const auto& r : a2c) CHECK(r.algorithm == "a2c");
  const auto sub = load_traces(path, TraceFilter{"dqn-1", 1, std::nullopt});
  for (const auto& r : sub) {
    CHECK(r.analyst_id == "dqn-1");
    CHECK(r.subset_id == 1);
  }
  CHECK(sub.size() == 10);
}

TEST_CASE("truncated final line is skipped with a warning") {
  TempDir dir("repo");
  const auto path = dir.path / "traces.jsonl";
  save_traces(path, make_records(5));
  {
    std::ofstream out(path, std::ios::app);
    out << R"({"analyst_id": "a2c-1", "trajectory": {"alert_id": 3, "ste)";
  }
  std::vector<std::string> warnings;
  const auto back = load_traces(path, {}, &warnings);
  CHECK(back.size() == 5);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find(".jsonl:6:") != std::string::npos);
}

TEST_CASE("concurrent appends keep every line intact") {
  TempDir dir("repo");
  TraceRepository repo(dir.path / "t.jsonl");
  const auto recs = make_records(20);
  std::vector<std::thread> ts;
  for (int t = 0; t < 4; ++t) ts.emplace_back([&] { repo.append(recs); });
  for (auto& t : ts) t.join();
  std::vector<std::string> warnings;
  CHECK(repo.load({}, &warnings).size() == 80);
  CHECK(warnings.empty());
}

TEST_CASE("timestamps are ISO 8601 UTC") {
  const auto ts = utc_timestamp();
  CHECK(ts.size() == 20);
  CHECK(ts[10] == 'T');
  CHECK(ts.back() == 'Z');
}
