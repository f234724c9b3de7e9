// Acceptance run: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

#include "cbuddy/pipeline.hpp"
#include "cbuddy/repository.hpp"
#include "criteria.hpp"

using namespace cbuddy;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int failures = 0;
std::string lines;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  lines += line + "\n";
}

void report(const char* id, bool ok, const std::string& detail) {
  emit(std::string(id) + (ok ? " PASS  " : " FAIL  ") + detail);
  failures += !ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Mean weighted F1 across analysts per (subset, strategy).
std::map<std::pair<int, std::string>, double> subset_means(const json& summary) {
  std::map<std::pair<int, std::string>, std::pair<double, int>> acc;
  for (const auto& r : summary.at("rows")) {
    auto& [sum, n] = acc[{r.at("subset").get<int>(), r.at("strategy").get<std::string>()}];
    sum += r.at("metrics").at("weighted_f1").get<double>();
    ++n;
  }
  std::map<std::pair<int, std::string>, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

double run_all(ExperimentManifest m, const fs::path& out) {
  m.output_dir = out;
  const auto t0 = std::chrono::steady_clock::now();
  run_pipeline(m, Stage::all, PipelineOptions{true});
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void teaming_criteria(const ExperimentManifest& m, const fs::path& run, double seconds) {
  const auto summary = read_json(run / "team/summary.json");
  const auto stats = read_json(run / "team/statistics.json");
  const auto means = subset_means(summary);

  int wins = 0;
  for (int s = 0; s < m.n_subsets; ++s) wins += means.at({s, "threshold:0.90"}) > means.at({s, "alone"});
  const double p = stats.at("strategies").at("threshold:0.90").at("mcnemar").at("p_value").get<double>();
  report("AC-1", wins >= 9 && p < 0.05 && seconds <= 600.0,
         fmt("Threshold(0.9) beats Alone in %d/%d subsets, pooled McNemar p=%.3g, runtime %.0fs", wins, m.n_subsets,
             p, seconds));

  double gap_sum = 0.0, worst = -1.0;
  int n = 0;
  for (const auto& f : stats.at("fidelity")) {
    double best = 0.0;
    for (const auto& [who, v] : f.at("weighted_f1").items()) {
      if (who != "assistant") best = std::max(best, v.get<double>());
    }
    const double gap = best - f.at("weighted_f1").at("assistant").get<double>();
    gap_sum += gap;
    worst = std::max(worst, gap);
    ++n;
  }
  const double mean_gap = gap_sum / n;

  // BC against one deterministic expert: the first analyst's greedy traces on subset 0.
  const auto expert = m.analysts.front().id;
  const auto traces = load_traces(run / "traces/traces.jsonl", TraceFilter{expert, 0, std::nullopt});
  std::vector<Trajectory> demos;
  for (const auto& r : traces) demos.push_back(r.trajectory);
  BCConfig bc_cfg = m.bc;
  bc_cfg.seed = m.seed;
  const double agreement = demos.empty() ? 0.0 : action_agreement(behavior_clone(demos, bc_cfg).policy, demos);
  report("AC-2", mean_gap <= 0.03 && agreement >= 0.95,
         fmt("assistant F1 gap to best analyst: mean %.4f, worst subset %.4f; BC agreement with %s %.4f", mean_gap,
             worst, expert.c_str(), agreement));

  const auto& strat = summary.at("strategies");
  const double always = strat.at("always").at("mean_confidence").get<double>();
  const double alone = strat.at("alone").at("mean_confidence").get<double>();
  report("AC-7", always >= alone, fmt("mean confidence Always %.4f vs Alone %.4f", always, alone));
}

void unit_criteria() {
  double worst = 0.0;
  std::string which;
  for (const auto& c : cbtest::reward_cases()) {
    const double err = std::abs(c.got - c.want);
    if (!(err <= worst)) {
      worst = err;
      which = c.name;
    }
  }
  report("AC-3", worst <= 1e-12,
         fmt("%zu reward cases, max error %.3g%s", cbtest::reward_cases().size(), worst,
             which.empty() ? "" : (" (" + which + ")").c_str()));

  const auto sh = cbtest::shapley_axioms();
  report("AC-4", sh.efficiency <= 1e-9 && sh.dummy == 0.0 && sh.symmetry <= 1e-9 && sh.sampled <= 0.02,
         fmt("%d games: efficiency %.2g, dummy %.2g, symmetry %.2g; sampled K=4 at 2000 permutations max error "
             "%.4f over %d games",
             sh.games, sh.efficiency, sh.dummy, sh.symmetry, sh.sampled, sh.sampled_games));

  const auto g = cbtest::gradient_checks();
  report("AC-5", g.classifier <= 1e-3 && g.policy <= 1e-3 && g.discriminator <= 1e-3,
         fmt("max relative error: classifier %.2g, policy 64x64 %.2g, discriminator 32x32 %.2g", g.classifier,
             g.policy, g.discriminator));

  const auto st = cbtest::stats_oracles();
  report("AC-6", st.wilcoxon <= 1e-12 && st.mcnemar <= 1e-12 && st.bonferroni <= 1e-12 && st.cohen <= 1e-12,
         fmt("Wilcoxon %d fixtures max diff %.2g, McNemar %d fixtures max diff %.2g, Bonferroni %.2g, Cohen's d %.2g",
             st.wilcoxon_fixtures, st.wilcoxon, st.mcnemar_fixtures, st.mcnemar, st.bonferroni, st.cohen));
}

void dataset_criterion(const fs::path& data_dir, const fs::path& work) {
  const auto manifest_path = data_dir / "hikari.json";
  const auto m = load_manifest(manifest_path);
  if (!fs::exists(m.csv)) {
    emit("AC-8 SKIP  " + m.csv.filename().string() + " not found");
    return;
  }
  const double seconds = run_all(m, work / "hikari");
  const auto strat = read_json(work / "hikari/team/summary.json").at("strategies");
  const long alone = strat.at("alone").at("false_positives").get<long>();
  const long thr = strat.at("threshold:0.90").at("false_positives").get<long>();
  report("AC-8", thr < alone, fmt("false positives Threshold(0.9) %ld vs Alone %ld (%.0fs)", thr, alone, seconds));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string manifest_path = std::string(CBUDDY_DATA_DIR) + "/synthetic.json";
  std::string data_dir = CBUDDY_DATA_DIR;
  std::string work;
  std::string report_path;
  bool keep = false;
  app.add_option("--manifest", manifest_path, "synthetic manifest");
  app.add_option("--data-dir", data_dir, "directory holding the dataset manifests");
  app.add_option("--work", work, "scratch directory for pipeline outputs");
  app.add_flag("--keep", keep, "keep pipeline outputs");
  app.add_option("--report", report_path, "also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir = work.empty() ? fs::temp_directory_path() / ("cbuddy-acceptance-" + std::to_string(getpid()))
                                    : fs::path(work);
  fs::create_directories(dir);

  try {
    const auto m = load_manifest(manifest_path);
    const double seconds = run_all(m, dir / "run1");
    teaming_criteria(m, dir / "run1", seconds);
    unit_criteria();
    dataset_criterion(data_dir, dir);
    run_all(m, dir / "run2");
    const bool same = slurp(dir / "run1/team/summary.json") == slurp(dir / "run2/team/summary.json");
    report("AC-9", same, same ? "team/summary.json byte-identical across two runs" : "team/summary.json differs");
  } catch (const std::exception& e) {
    emit(std::string("acceptance run aborted: ") + e.what());
    ++failures;
  }

  if (!keep && work.empty()) fs::remove_all(dir);
  emit(std::to_string(failures) + " criteria failed");
  if (!report_path.empty()) std::ofstream(report_path) << lines;
  return failures == 0 ? 0 : 1;
}
