#pragma once

// Experiment manifests and the staged pipeline: prepare data, train analysts,
// collect traces, train the assistant, evaluate teaming, explain.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/analyst.hpp"
#include "cbuddy/imitation.hpp"
#include "cbuddy/teaming.hpp"

namespace cbuddy {

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { prepare_data, train_analysts, collect_traces, train_assistant, eval_team, explain, serve, all };

std::string to_string(Stage s);
Stage stage_from_string(std::string_view s);

nlohmann::json synthetic_config_to_json(const SyntheticConfig& c);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

struct ExperimentManifest {
  std::string name = "experiment";
  std::uint64_t seed = 0;

  // Exactly one of `synthetic` or (`csv`, `grouping`).
  std::optional<SyntheticConfig> synthetic;
  std::filesystem::path csv;
  std::filesystem::path grouping;

  int n_subsets = 10;
  int n_hist = 1500;
  int n_new = 100;
  int balance_total = 0;  // 0 = train classifiers on the historical alerts as they are

  ClassifierConfig classifier;
  EnvConfig env;
  std::vector<AnalystConfig> analysts;

  int trace_alerts = 100;  // historical alerts each analyst investigates for the assistant
  int per_source = 100;    // trajectories taken from each analyst

  std::string imitation_method = "gail";  // gail | bc
  GailConfig gail;
  BCConfig bc;

  std::vector<AdoptionStrategy> strategies;
  std::vector<std::uint64_t> team_seeds = {0};
  std::vector<std::string> negative_classes;

  int explain_alerts = 5;
  int workers = 0;  // 0 = hardware concurrency
  std::filesystem::path output_dir = "out";

  nlohmann::json to_json() const;
  // Relative data paths are resolved against `base_dir`.
  static ExperimentManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

// Reads a manifest file. CB_SEED, when set, replaces the manifest seed.
ExperimentManifest load_manifest(const std::filesystem::path& path);

struct PreparedData {
  FeatureSchema schema;
  std::vector<std::string> class_names;
  ContextCatalog catalog;
  std::vector<int> negative_classes;
  std::vector<AlertRecord> alerts;
  std::vector<DatasetSplit> splits;

  const AlertRecord& alert(std::int64_t id) const;
};

PreparedData load_prepared(const std::filesystem::path& output_dir);

// Classifier store, environment settings and historical statistics of one subset.
struct SubsetContext {
  int subset = 0;
  const DatasetSplit* split = nullptr;
  std::shared_ptr<ClassifierStore> store;
  EnvConfig env;
  std::vector<FeatureStats> stats;

  InvestigationEnv make_env() const { return InvestigationEnv(store, env); }
};

SubsetContext make_subset_context(const ExperimentManifest& manifest, const PreparedData& data, int subset);

std::vector<TrainedAnalyst> load_analysts(const ExperimentManifest& manifest, int subset);
AssistantPolicy load_assistant(const ExperimentManifest& manifest, int subset);

struct PipelineOptions {
  bool force = false;           // ignore digests and rerun
  std::ostream* log = nullptr;  // progress lines
  int serve_port = 8080;
  int serve_subset = 0;
};

struct StageResult {
  Stage stage;
  bool skipped = false;  // digest matched a previous run
  std::string digest;
};

// `all` runs every stage except serve, in order.
std::vector<StageResult> run_pipeline(const ExperimentManifest& manifest, Stage stage,
                                      const PipelineOptions& options = {});

// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown after
// all tasks finish, lowest index first.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace cbuddy
