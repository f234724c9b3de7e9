#include "cbuddy/pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "cbuddy/evaluation.hpp"
#include "cbuddy/explainer.hpp"
#include "cbuddy/repository.hpp"
#include "cbuddy/service.hpp"

namespace cbuddy {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Stage kOrder[] = {Stage::prepare_data,    Stage::train_analysts, Stage::collect_traces,
                            Stage::train_assistant, Stage::eval_team,      Stage::explain};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw PipelineError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PipelineError("cannot write " + p.string());
    out << text;
    if (!out) throw PipelineError("write to " + p.string() + " failed");
  }
  fs::rename(tmp, p);
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw PipelineError(p.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path stamp_path(const ExperimentManifest& m, Stage s) { return m.output_dir / "stamps" / (to_string(s) + ".json"); }

std::optional<std::string> read_stamp(const ExperimentManifest& m, Stage s) {
  const auto p = stamp_path(m, s);
  if (!fs::exists(p)) return std::nullopt;
  try {
    return read_json(p).at("digest").get<std::string>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

Stage upstream(Stage s) {
  switch (s) {
    case Stage::train_analysts:
      return Stage::prepare_data;
    case Stage::collect_traces:
      return Stage::train_analysts;
    case Stage::train_assistant:
      return Stage::collect_traces;
    case Stage::eval_team:
    case Stage::explain:
    case Stage::serve:
      return Stage::train_assistant;
    default:
      return s;
  }
}

std::string require_upstream(const ExperimentManifest& m, Stage s) {
  const Stage up = upstream(s);
  auto d = read_stamp(m, up);
  if (!d) {
    throw PipelineError("stage " + to_string(s) + " needs the outputs of " + to_string(up) + ": run " + to_string(up) +
                        " first");
  }
  return *d;
}

// Digest of the manifest parts a stage depends on plus its upstream digest.
std::string stage_digest(const ExperimentManifest& m, Stage s, const std::string& upstream_digest) {
  const json j = m.to_json();
  Digest d;
  d.add(to_string(s));
  d.add(upstream_digest);
  d.add(j.at("seed").dump());
  switch (s) {
    case Stage::prepare_data:
      d.add(j.at("data").dump());
      d.add(j.at("splits").dump());
      if (!m.synthetic) d.add(read_file(m.csv));
      break;
    case Stage::train_analysts:
      d.add(j.at("classifier").dump());
      d.add(j.at("env").dump());
      d.add(j.at("analysts").dump());
      break;
    case Stage::collect_traces:
      d.add(j.at("traces").dump());
      break;
    case Stage::train_assistant:
      d.add(j.at("imitation").dump());
      break;
    case Stage::eval_team:
      d.add(j.at("teaming").dump());
      break;
    case Stage::explain:
      d.add(j.at("explain_alerts").dump());
      break;
    default:
      break;
  }
  return hex64(d.value());
}

json alert_to_json(const AlertRecord& a) { return {{"id", a.alert_id}, {"values", a.values}, {"label", a.label}}; }

AlertRecord alert_from_json(const json& j) {
  return {j.at("id").get<std::int64_t>(), j.at("values").get<std::vector<double>>(), j.at("label").get<int>()};
}

std::uint64_t subset_seed(const ExperimentManifest& m, std::uint64_t tag, int subset) {
  return mix_seed(mix_seed(m.seed, tag), static_cast<std::uint64_t>(subset));
}

int worker_count(const ExperimentManifest& m) {
  if (m.workers > 0) return m.workers;
  return static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
}

fs::path analyst_path(const ExperimentManifest& m, int subset, const std::string& id) {
  return m.output_dir / "analysts" / ("subset_" + std::to_string(subset)) / (id + ".json");
}

fs::path assistant_path(const ExperimentManifest& m, int subset) {
  return m.output_dir / "assistant" / ("subset_" + std::to_string(subset) + ".json");
}

std::vector<AnalystConfig> analyst_configs(const ExperimentManifest& m, int subset) {
  std::vector<AnalystConfig> out;
  for (std::size_t i = 0; i < m.analysts.size(); ++i) {
    auto c = m.analysts[i];
    c.seed = mix_seed(subset_seed(m, 1000, subset), c.seed + i);
    out.push_back(c);
  }
  return out;
}

class Logger {
 public:
  explicit Logger(std::ostream* out) : out_(out) {}
  void operator()(const std::string& line) {
    if (!out_) return;
    std::lock_guard lock(mutex_);
    *out_ << line << std::endl;
  }

 private:
  std::ostream* out_;
  std::mutex mutex_;
};

void stage_prepare(const ExperimentManifest& m, Logger& log) {
  PreparedData d;
  if (m.synthetic) {
    auto ds = generate_synthetic_alerts(*m.synthetic, mix_seed(m.seed, 1));
    d.schema = std::move(ds.schema);
    d.catalog = std::move(ds.catalog);
    d.alerts = std::move(ds.alerts);
    d.class_names = std::move(ds.class_names);
  } else {
    const auto grouping = GroupingManifest::parse(read_file(m.grouping));
    d.schema = grouping.schema();
    d.catalog = build_catalog(grouping, d.schema);
    d.class_names = grouping.classes;
    d.alerts = ingest_alerts(read_file(m.csv), d.schema, {grouping.label, grouping.classes, grouping.drop});
  }
  for (const auto& name : m.negative_classes) {
    const auto it = std::find(d.class_names.begin(), d.class_names.end(), name);
    if (it == d.class_names.end()) throw PipelineError("negative class '" + name + "' is not a dataset class");
  }
  d.splits = stratified_split(d.alerts, m.n_subsets, m.n_hist, m.n_new, mix_seed(m.seed, 2));

  json features = json::array();
  for (const auto& f : d.schema.features()) {
    features.push_back({{"name", f.name}, {"kind", f.kind == FeatureKind::binary ? "binary" : "numeric"}});
  }
  json cats = json::array();
  for (const auto& c : d.catalog.categories) cats.push_back({{"name", c.name}, {"features", c.feature_indices}});
  json alerts = json::array();
  for (const auto& a : d.alerts) alerts.push_back(alert_to_json(a));
  json splits = json::array();
  for (const auto& s : d.splits) {
    std::vector<std::int64_t> hist, fresh;
    for (const auto& a : s.historical) hist.push_back(a.alert_id);
    for (const auto& a : s.fresh) fresh.push_back(a.alert_id);
    splits.push_back({{"subset", s.subset_id}, {"historical", hist}, {"fresh", fresh}});
  }
  write_file(m.output_dir / "prepared" / "dataset.json",
             json{{"features", features},
                  {"classes", d.class_names},
                  {"negative_classes", m.negative_classes},
                  {"initial", d.catalog.initial_indices},
                  {"categories", cats},
                  {"alerts", alerts}}
                 .dump());
  write_file(m.output_dir / "prepared" / "splits.json", json{{"subsets", splits}}.dump(1));
  for (const auto& s : d.splits) {
    json stats = json::array();
    for (const auto& st : feature_stats(s.historical)) {
      stats.push_back({{"mean", st.mean}, {"median", st.median}, {"mode", st.mode}});
    }
    write_file(m.output_dir / "prepared" / ("stats_" + std::to_string(s.subset_id) + ".json"), stats.dump(1));
  }
  log("prepare-data: " + std::to_string(d.alerts.size()) + " alerts, " + std::to_string(d.splits.size()) +
      " subsets, " + std::to_string(d.catalog.num_categories()) + " categories");
}

void stage_train_analysts(const ExperimentManifest& m, Logger& log) {
  if (m.analysts.empty()) throw PipelineError("manifest lists no analysts");
  const auto data = load_prepared(m.output_dir);
  parallel_for(static_cast<int>(data.splits.size()), worker_count(m), [&](int s) {
    const auto ctx = make_subset_context(m, data, s);
    const EnvFactory factory = [&ctx] { return ctx.make_env(); };
    for (const auto& cfg : analyst_configs(m, s)) {
      auto a = train_analyst(factory, ctx.split->historical, cfg);
      write_file(analyst_path(m, s, cfg.id), a.to_json().dump());
      write_file(analyst_path(m, s, cfg.id).replace_extension(".csv"), a.training_log_csv());
      log("train-analysts: subset " + std::to_string(s) + " " + cfg.id + " " + std::to_string(a.timesteps_trained) +
          " steps");
    }
  });
}

void stage_collect_traces(const ExperimentManifest& m, Logger& log) {
  const auto data = load_prepared(m.output_dir);
  std::vector<std::vector<TraceRecord>> per_subset(data.splits.size());
  parallel_for(static_cast<int>(data.splits.size()), worker_count(m), [&](int s) {
    const auto ctx = make_subset_context(m, data, s);
    auto env = ctx.make_env();
    const auto& hist = ctx.split->historical;
    if (m.trace_alerts > static_cast<int>(hist.size())) throw PipelineError("trace_alerts exceeds the historical split");
    const std::vector<AlertRecord> alerts(hist.begin(), hist.begin() + m.trace_alerts);
    for (const auto& a : load_analysts(m, s)) {
      for (auto& t : collect_traces({a}, env, alerts, 1, subset_seed(m, 2000, s))) {
        per_subset[static_cast<std::size_t>(s)].push_back(
            {std::move(t), a.id, to_string(a.algorithm), s, a.config.seed, ""});
      }
    }
  });
  const auto path = m.output_dir / "traces" / "traces.jsonl";
  fs::remove(path);
  TraceRepository repo(path);
  const auto stamp = utc_timestamp();
  std::size_t n = 0;
  for (auto& recs : per_subset) {
    for (auto& r : recs) r.timestamp = stamp;
    n += repo.append(recs);
  }
  log("collect-traces: " + std::to_string(n) + " trajectories");
}

void stage_train_assistant(const ExperimentManifest& m, Logger& log) {
  const auto data = load_prepared(m.output_dir);
  const auto all_traces = load_traces(m.output_dir / "traces" / "traces.jsonl");
  parallel_for(static_cast<int>(data.splits.size()), worker_count(m), [&](int s) {
    std::map<std::string, std::vector<Trajectory>> by_analyst;
    for (const auto& r : all_traces) {
      if (r.subset_id == s) by_analyst[r.analyst_id].push_back(r.trajectory);
    }
    const auto merged = merge_multi_source(by_analyst, m.per_source, subset_seed(m, 3000, s));
    const auto ctx = make_subset_context(m, data, s);
    AssistantPolicy assistant;
    std::string rounds_csv;
    if (m.imitation_method == "bc") {
      auto bc = m.bc;
      bc.seed = subset_seed(m, 3100, s);
      assistant = behavior_clone(merged, bc);
    } else {
      auto gc = m.gail;
      gc.seed = subset_seed(m, 3200, s);
      const EnvFactory factory = [&ctx] { return ctx.make_env(); };
      auto res = train_gail(merged, factory, ctx.split->historical, gc);
      assistant = std::move(res.assistant);
      std::ostringstream csv;
      csv << "round,transitions,disc_loss,disc_accuracy,expert_reward,generator_reward,episode_length,mask_agreement\n";
      for (const auto& r : res.rounds) {
        csv << r.round << ',' << r.transitions << ',' << r.disc_loss << ',' << r.disc_accuracy << ','
            << r.expert_reward << ',' << r.generator_reward << ',' << r.episode_length << ','
            << r.mask_agreement << '\n';
      }
      rounds_csv = csv.str();
    }
    write_file(assistant_path(m, s), assistant.to_json().dump());
    if (!rounds_csv.empty()) write_file(assistant_path(m, s).replace_extension(".rounds.csv"), rounds_csv);
    log("train-assistant: subset " + std::to_string(s) + " " + to_string(assistant.provenance) + " from " +
        std::to_string(merged.size()) + " trajectories");
  });
}

// Paired comparisons of every strategy against working alone.
json strategy_statistics(const std::vector<TeamRow>& rows, const std::vector<AdoptionStrategy>& strategies) {
  const std::string alone = AdoptionStrategy::alone().name();
  std::map<std::tuple<int, std::string, std::uint64_t>, const TeamRow*> baseline;
  for (const auto& r : rows) {
    if (r.strategy == alone) baseline[{r.subset, r.analyst, r.seed}] = &r;
  }
  json out = json::object();
  if (baseline.empty()) return out;
  std::vector<std::string> names;
  for (const auto& s : strategies) {
    if (s.name() != alone) names.push_back(s.name());
  }
  std::vector<double> wilcoxon_p;
  for (const auto& name : names) {
    long b = 0, c = 0;  // alone right / team wrong, alone wrong / team right
    std::vector<double> deltas, f1_team, f1_alone;
    for (const auto& r : rows) {
      if (r.strategy != name) continue;
      const auto it = baseline.find({r.subset, r.analyst, r.seed});
      if (it == baseline.end()) continue;
      const auto& base = *it->second;
      for (std::size_t i = 0; i < r.decisions.size(); ++i) {
        const bool a_ok = base.decisions[i].final_pred.predicted_class == base.decisions[i].truth;
        const bool t_ok = r.decisions[i].final_pred.predicted_class == r.decisions[i].truth;
        b += a_ok && !t_ok;
        c += !a_ok && t_ok;
      }
      deltas.push_back(r.metrics.weighted_f1 - base.metrics.weighted_f1);
      f1_team.push_back(r.metrics.weighted_f1);
      f1_alone.push_back(base.metrics.weighted_f1);
    }
    json entry = {{"discordant_alone_only", b}, {"discordant_team_only", c}, {"mean_f1_delta", mean(deltas)}};
    if (b + c > 0) entry["mcnemar"] = mcnemar(b, c).to_json();
    try {
      const auto w = wilcoxon_signed_rank(deltas);
      entry["wilcoxon"] = w.to_json();
      wilcoxon_p.push_back(w.p_value);
    } catch (const std::invalid_argument& e) {
      entry["wilcoxon"] = {{"skipped", e.what()}};
      wilcoxon_p.push_back(1.0);
    }
    try {
      entry["cohen_d"] = cohen_d(f1_team, f1_alone);
    } catch (const std::invalid_argument&) {
      entry["cohen_d"] = nullptr;
    }
    out[name] = entry;
  }
  const auto adjusted = bonferroni(wilcoxon_p, static_cast<int>(wilcoxon_p.size()));
  for (std::size_t i = 0; i < names.size(); ++i) out[names[i]]["wilcoxon_p_bonferroni"] = adjusted[i];
  return out;
}

void stage_eval_team(const ExperimentManifest& m, Logger& log) {
  if (m.strategies.empty()) throw PipelineError("manifest lists no adoption strategies");
  const auto data = load_prepared(m.output_dir);
  const std::size_t n = data.splits.size();
  std::vector<std::vector<TeamRow>> per_subset(n);
  std::vector<json> fidelity(n);
  parallel_for(static_cast<int>(n), worker_count(m), [&](int s) {
    const auto ctx = make_subset_context(m, data, s);
    auto env = ctx.make_env();
    const auto analysts = load_analysts(m, s);
    const auto assistant = load_assistant(m, s);
    TeamExperimentInput in;
    in.analysts = analysts;
    in.assistant = &assistant;
    in.alerts = ctx.split->fresh;
    in.strategies = m.strategies;
    in.seeds = m.team_seeds;
    in.subset = s;
    per_subset[static_cast<std::size_t>(s)] = run_team_experiment(in, env, data.negative_classes);

    // How well each agent classifies the fresh alerts on its own.
    json f = json::object();
    auto score = [&](const PolicyFn& policy) {
      std::vector<int> preds, truths;
      for (const auto& a : ctx.split->fresh) {
        preds.push_back(run_episode(env, a, policy).final_prediction.predicted_class);
        truths.push_back(a.label);
      }
      return weighted_f1(preds, truths);
    };
    for (const auto& a : analysts) f[a.id] = score([&](const Observation& o) { return a.greedy_action(o); });
    f["assistant"] = score([&](const Observation& o) { return assistant.greedy_action(o); });
    fidelity[static_cast<std::size_t>(s)] = f;
  });

  TeamingReport report;
  report.class_names = data.class_names;
  report.negative_classes = data.negative_classes;
  report.num_categories = data.catalog.num_categories();
  for (auto& rows : per_subset) {
    for (auto& r : rows) report.rows.push_back(std::move(r));
  }
  const auto dir = m.output_dir / "team";
  write_file(dir / "decisions.csv", report.decisions_csv());
  write_file(dir / "summary.json", report.summary().dump(1) + "\n");
  json fid = json::array();
  for (std::size_t s = 0; s < n; ++s) fid.push_back({{"subset", s}, {"weighted_f1", fidelity[s]}});
  write_file(dir / "statistics.json",
             json{{"strategies", strategy_statistics(report.rows, m.strategies)}, {"fidelity", fid}}.dump(1) + "\n");
  const auto summary = report.summary();
  for (const auto& [name, s] : summary.at("strategies").items()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "eval-team: %-16s mean F1 %.4f  mean confidence %.4f  FP %ld  FN %ld",
                  name.c_str(), s.at("mean_weighted_f1").get<double>(), s.at("mean_confidence").get<double>(),
                  s.at("false_positives").get<long>(), s.at("false_negatives").get<long>());
    log(buf);
  }
}

void stage_explain(const ExperimentManifest& m, Logger& log) {
  const auto data = load_prepared(m.output_dir);
  std::vector<std::string> cat_names;
  for (const auto& c : data.catalog.categories) cat_names.push_back(c.name);
  parallel_for(static_cast<int>(data.splits.size()), worker_count(m), [&](int s) {
    const auto ctx = make_subset_context(m, data, s);
    auto env = ctx.make_env();
    const auto assistant = load_assistant(m, s);
    json out = json::array();
    const auto& fresh = ctx.split->fresh;
    for (std::size_t i = 0; i < fresh.size() && static_cast<int>(i) < m.explain_alerts; ++i) {
      const auto& a = fresh[i];
      const auto plan = one_time_plan(assistant, env, a);
      const auto attribution = data.catalog.num_categories() <= kMaxCategories
                                   ? shapley_exact(a, *ctx.store)
                                   : shapley_sampled(a, *ctx.store, 2000, subset_seed(m, 4000, s));
      out.push_back({{"alert_id", a.alert_id},
                     {"plan", plan.to_json(&data.catalog)},
                     {"shapley", attribution.to_json(cat_names, data.class_names)},
                     {"evidence", evidence_view(a, plan.mask(), *ctx.store, ctx.stats, data.schema)
                                      .to_json(data.class_names)}});
    }
    write_file(m.output_dir / "explain" / ("subset_" + std::to_string(s) + ".json"), out.dump(1));
  });
  log("explain: attributions for " + std::to_string(m.explain_alerts) + " fresh alerts per subset");
}

}  // namespace

std::string to_string(Stage s) {
  switch (s) {
    case Stage::prepare_data:
      return "prepare-data";
    case Stage::train_analysts:
      return "train-analysts";
    case Stage::collect_traces:
      return "collect-traces";
    case Stage::train_assistant:
      return "train-assistant";
    case Stage::eval_team:
      return "eval-team";
    case Stage::explain:
      return "explain";
    case Stage::serve:
      return "serve";
    case Stage::all:
      return "all";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  for (Stage st : {Stage::prepare_data, Stage::train_analysts, Stage::collect_traces, Stage::train_assistant,
                   Stage::eval_team, Stage::explain, Stage::serve, Stage::all}) {
    if (to_string(st) == s) return st;
  }
  throw std::invalid_argument("unknown stage '" + std::string(s) + "'");
}

json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"classes", c.classes},
          {"categories", c.categories},
          {"signatures", c.signatures},
          {"class_weights", c.class_weights},
          {"n_alerts", c.n_alerts},
          {"n_initial", c.n_initial},
          {"features_per_category", c.features_per_category},
          {"signal_scale", c.signal_scale},
          {"noise_scale", c.noise_scale},
          {"initial_signal", c.initial_signal}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  SyntheticConfig c;
  c.classes = j.at("classes").get<std::vector<std::string>>();
  c.categories = j.at("categories").get<std::vector<std::string>>();
  c.signatures = j.at("signatures").get<std::vector<std::vector<std::string>>>();
  c.class_weights = j.value("class_weights", c.class_weights);
  c.n_alerts = j.value("n_alerts", c.n_alerts);
  c.n_initial = j.value("n_initial", c.n_initial);
  c.features_per_category = j.value("features_per_category", c.features_per_category);
  c.signal_scale = j.value("signal_scale", c.signal_scale);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.initial_signal = j.value("initial_signal", c.initial_signal);
  return c;
}

json ExperimentManifest::to_json() const {
  json data;
  if (synthetic) {
    data["synthetic"] = synthetic_config_to_json(*synthetic);
  } else {
    data["csv"] = csv.string();
    data["grouping"] = grouping.string();
  }
  json analysts_json = json::array();
  for (const auto& a : analysts) analysts_json.push_back(a.to_json());
  std::vector<std::string> strategy_names;
  for (const auto& s : strategies) strategy_names.push_back(s.name());
  return {{"name", name},
          {"seed", seed},
          {"data", data},
          {"splits", {{"n_subsets", n_subsets}, {"n_hist", n_hist}, {"n_new", n_new}, {"balance_total", balance_total}}},
          {"classifier", classifier.to_json()},
          {"env", env.to_json()},
          {"analysts", analysts_json},
          {"traces", {{"alerts_per_analyst", trace_alerts}, {"per_source", per_source}}},
          {"imitation", {{"method", imitation_method}, {"gail", gail.to_json()}, {"bc", bc.to_json()}}},
          {"teaming", {{"strategies", strategy_names}, {"seeds", team_seeds}, {"negative_classes", negative_classes}}},
          {"explain_alerts", explain_alerts},
          {"workers", workers},
          {"output", output_dir.string()}};
}

ExperimentManifest ExperimentManifest::from_json(const json& j, const fs::path& base_dir) {
  ExperimentManifest m;
  try {
    m.name = j.value("name", m.name);
    m.seed = j.value("seed", m.seed);
    const auto& data = j.at("data");
    if (data.contains("synthetic")) {
      m.synthetic = synthetic_config_from_json(data.at("synthetic"));
    } else {
      auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
      m.csv = resolve(data.at("csv").get<std::string>());
      m.grouping = resolve(data.at("grouping").get<std::string>());
    }
    if (j.contains("splits")) {
      const auto& s = j.at("splits");
      m.n_subsets = s.value("n_subsets", m.n_subsets);
      m.n_hist = s.value("n_hist", m.n_hist);
      m.n_new = s.value("n_new", m.n_new);
      m.balance_total = s.value("balance_total", m.balance_total);
    }
    if (j.contains("classifier")) m.classifier = ClassifierConfig::from_json(j.at("classifier"));
    if (j.contains("env")) m.env = EnvConfig::from_json(j.at("env"));
    for (const auto& a : j.at("analysts")) m.analysts.push_back(AnalystConfig::from_json(a));
    if (j.contains("traces")) {
      m.trace_alerts = j.at("traces").value("alerts_per_analyst", m.trace_alerts);
      m.per_source = j.at("traces").value("per_source", m.per_source);
    }
    if (j.contains("imitation")) {
      const auto& im = j.at("imitation");
      m.imitation_method = im.value("method", m.imitation_method);
      if (im.contains("gail")) m.gail = GailConfig::from_json(im.at("gail"));
      if (im.contains("bc")) m.bc = BCConfig::from_json(im.at("bc"));
    }
    if (m.imitation_method != "gail" && m.imitation_method != "bc") {
      throw PipelineError("imitation method must be 'gail' or 'bc'");
    }
    if (j.contains("teaming")) {
      const auto& t = j.at("teaming");
      for (const auto& s : t.value("strategies", std::vector<std::string>{})) m.strategies.push_back(AdoptionStrategy::parse(s));
      m.team_seeds = t.value("seeds", m.team_seeds);
      m.negative_classes = t.value("negative_classes", m.negative_classes);
    }
    m.explain_alerts = j.value("explain_alerts", m.explain_alerts);
    m.workers = j.value("workers", m.workers);
    m.output_dir = j.value("output", m.output_dir.string());
  } catch (const json::exception& e) {
    throw PipelineError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

ExperimentManifest load_manifest(const fs::path& path) {
  auto m = ExperimentManifest::from_json(read_json(path), path.parent_path());
  if (const char* env_seed = std::getenv("CB_SEED"); env_seed && *env_seed) {
    try {
      m.seed = std::stoull(env_seed);
    } catch (const std::exception&) {
      throw PipelineError(std::string("CB_SEED is not an unsigned integer: ") + env_seed);
    }
  }
  return m;
}

const AlertRecord& PreparedData::alert(std::int64_t id) const {
  // Alerts are stored in id order by every loader.
  auto it = std::lower_bound(alerts.begin(), alerts.end(), id, [](const AlertRecord& a, std::int64_t v) {
    return a.alert_id < v;
  });
  if (it == alerts.end() || it->alert_id != id) throw std::out_of_range("unknown alert " + std::to_string(id));
  return *it;
}

PreparedData load_prepared(const fs::path& output_dir) {
  const auto ds_path = output_dir / "prepared" / "dataset.json";
  if (!fs::exists(ds_path)) throw PipelineError("no prepared data in " + output_dir.string() + ": run prepare-data first");
  const auto j = read_json(ds_path);
  PreparedData d;
  std::vector<Feature> features;
  for (const auto& f : j.at("features")) {
    features.push_back({f.at("name").get<std::string>(), features.size(),
                        f.at("kind").get<std::string>() == "binary" ? FeatureKind::binary : FeatureKind::numeric});
  }
  d.schema = FeatureSchema(std::move(features));
  d.class_names = j.at("classes").get<std::vector<std::string>>();
  for (const auto& name : j.at("negative_classes").get<std::vector<std::string>>()) {
    d.negative_classes.push_back(
        static_cast<int>(std::find(d.class_names.begin(), d.class_names.end(), name) - d.class_names.begin()));
  }
  d.catalog.initial_indices = j.at("initial").get<std::vector<std::size_t>>();
  int id = 0;
  for (const auto& c : j.at("categories")) {
    d.catalog.categories.push_back({id++, c.at("name").get<std::string>(), c.at("features").get<std::vector<std::size_t>>()});
  }
  d.catalog.validate(d.schema.size());
  for (const auto& a : j.at("alerts")) d.alerts.push_back(alert_from_json(a));
  std::sort(d.alerts.begin(), d.alerts.end(), [](const auto& a, const auto& b) { return a.alert_id < b.alert_id; });

  const auto splits = read_json(output_dir / "prepared" / "splits.json");
  for (const auto& s : splits.at("subsets")) {
    DatasetSplit split;
    split.subset_id = s.at("subset").get<int>();
    for (auto aid : s.at("historical").get<std::vector<std::int64_t>>()) split.historical.push_back(d.alert(aid));
    for (auto aid : s.at("fresh").get<std::vector<std::int64_t>>()) split.fresh.push_back(d.alert(aid));
    d.splits.push_back(std::move(split));
  }
  return d;
}

SubsetContext make_subset_context(const ExperimentManifest& m, const PreparedData& data, int subset) {
  if (subset < 0 || subset >= static_cast<int>(data.splits.size())) {
    throw PipelineError("subset " + std::to_string(subset) + " does not exist");
  }
  SubsetContext ctx;
  ctx.subset = subset;
  ctx.split = &data.splits[static_cast<std::size_t>(subset)];
  const auto& hist = ctx.split->historical;
  const int n_classes = static_cast<int>(data.class_names.size());
  auto train = m.balance_total > 0 ? balance_oversample(hist, n_classes, m.balance_total, subset_seed(m, 5, subset)) : hist;
  auto cfg = m.classifier;
  cfg.seed = subset_seed(m, 10, subset);
  ctx.store = std::make_shared<ClassifierStore>(data.catalog, n_classes, std::move(train), Standardizer::fit(hist), cfg,
                                                m.output_dir / "classifiers" / ("subset_" + std::to_string(subset)));
  ctx.env = m.env;
  const auto stats_path = m.output_dir / "prepared" / ("stats_" + std::to_string(subset) + ".json");
  if (fs::exists(stats_path)) {
    const auto stats = read_json(stats_path);
    for (const auto& s : stats) {
      ctx.stats.push_back({s.at("mean").get<double>(), s.at("median").get<double>(), s.at("mode").get<double>()});
    }
  } else {
    ctx.stats = feature_stats(hist);
  }
  return ctx;
}

std::vector<TrainedAnalyst> load_analysts(const ExperimentManifest& m, int subset) {
  std::vector<TrainedAnalyst> out;
  for (const auto& cfg : m.analysts) {
    const auto p = analyst_path(m, subset, cfg.id);
    if (!fs::exists(p)) throw PipelineError("missing analyst " + p.string() + ": run train-analysts first");
    out.push_back(TrainedAnalyst::from_json(read_json(p)));
  }
  return out;
}

AssistantPolicy load_assistant(const ExperimentManifest& m, int subset) {
  const auto p = assistant_path(m, subset);
  if (!fs::exists(p)) throw PipelineError("missing assistant " + p.string() + ": run train-assistant first");
  return AssistantPolicy::from_json(read_json(p));
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int t = std::clamp(workers, 1, n);
  if (t == 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (int i = 0; i < t; ++i) threads.emplace_back(work);
    for (auto& th : threads) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<StageResult> run_pipeline(const ExperimentManifest& m, Stage stage, const PipelineOptions& options) {
  Logger log(options.log);
  if (stage == Stage::serve) {
    require_upstream(m, Stage::serve);
    const auto data = std::make_shared<const PreparedData>(load_prepared(m.output_dir));
    auto ctx = make_subset_context(m, *data, options.serve_subset);
    TriageService service(data, std::move(ctx), load_assistant(m, options.serve_subset), m.seed);
    log("serve: listening on port " + std::to_string(options.serve_port));
    serve_http(service, "0.0.0.0", options.serve_port);
    return {{Stage::serve, false, ""}};
  }

  std::vector<Stage> stages;
  if (stage == Stage::all) {
    stages.assign(std::begin(kOrder), std::end(kOrder));
  } else {
    stages.push_back(stage);
  }
  std::vector<StageResult> results;
  for (Stage s : stages) {
    const std::string up = s == Stage::prepare_data ? std::string() : require_upstream(m, s);
    const auto digest = stage_digest(m, s, up);
    if (!options.force && read_stamp(m, s) == digest) {
      log(to_string(s) + ": up to date");
      results.push_back({s, true, digest});
      continue;
    }
    // Downstream stamps are no longer valid once this stage reruns.
    for (Stage d : kOrder) {
      if (d > s) fs::remove(stamp_path(m, d));
    }
    switch (s) {
      case Stage::prepare_data:
        stage_prepare(m, log);
        fs::remove_all(m.output_dir / "classifiers");
        break;
      case Stage::train_analysts:
        stage_train_analysts(m, log);
        break;
      case Stage::collect_traces:
        stage_collect_traces(m, log);
        break;
      case Stage::train_assistant:
        stage_train_assistant(m, log);
        break;
      case Stage::eval_team:
        stage_eval_team(m, log);
        break;
      case Stage::explain:
        stage_explain(m, log);
        break;
      default:
        break;
    }
    write_file(stamp_path(m, s), json{{"stage", to_string(s)}, {"digest", digest}}.dump() + "\n");
    results.push_back({s, false, digest});
  }
  return results;
}

}  // namespace cbuddy
