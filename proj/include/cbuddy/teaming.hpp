#pragma once

// Assistant suggestions (one-time plans and iterative next-category picks),
// adoption strategies and team experiments.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/evaluation.hpp"
#include "cbuddy/imitation.hpp"

namespace cbuddy {

struct Plan {
  std::vector<int> actions;  // requested categories, first-request order
  bool found = true;         // false when the assistant never chose to classify

  ContextMask mask() const;
  nlohmann::json to_json(const ContextCatalog* catalog = nullptr) const;
};

struct SuggestionHistory {
  std::vector<int> requested;
};

// Greedy rollout of the assistant from reset(alert). Repeated requests are
// dropped. `max_steps` = 0 uses the environment's step cap.
Plan one_time_plan(const AssistantPolicy& assistant, InvestigationEnv& env, const AlertRecord& alert,
                   int max_steps = 0);

// Best request action not yet in the history, at the observation reached by
// replaying the history. None when every category was used or the assistant
// prefers classifying over every remaining request.
std::optional<int> iterative_suggest(const AssistantPolicy& assistant, InvestigationEnv& env,
                                     const SuggestionHistory& history, const AlertRecord& alert);

struct AdoptionStrategy {
  enum class Kind { alone, always, random, threshold };
  Kind kind = Kind::alone;
  double p = 0.5;          // random
  std::uint64_t seed = 0;  // random
  double threshold = 0.9;  // threshold

  static AdoptionStrategy alone() { return {}; }
  static AdoptionStrategy always() { return {Kind::always}; }
  static AdoptionStrategy random(double p = 0.5, std::uint64_t seed = 0) { return {Kind::random, p, seed}; }
  static AdoptionStrategy with_threshold(double t) { return {Kind::threshold, 0.5, 0, t}; }

  // "alone", "always", "random", "random:0.3", "threshold:0.9".
  static AdoptionStrategy parse(std::string_view text);
  std::string name() const;
  void validate() const;
};

struct TeamDecision {
  std::int64_t alert_id = 0;
  int truth = 0;
  ContextMask analyst_mask;
  Prediction analyst_pred;
  ContextMask suggested;
  bool considered = false;
  std::optional<Prediction> extended_pred;
  bool adopted = false;
  Prediction final_pred;
};

// Stage 1 gates whether the suggestion is looked at; stage 2 adopts the
// extended-context decision only if its confidence is strictly higher.
TeamDecision adopt_decision(const AdoptionStrategy& strategy, const Trajectory& analyst_traj, const Plan& plan,
                            ClassifierStore& store, const AlertRecord& alert);

struct FlipCounts {
  long correct_to_wrong = 0;
  long wrong_to_correct = 0;
  // Transitions between alert outcomes (TP, TN, FP, FN, MC) as "TN->FP".
  std::map<std::string, long> transitions;
};

// TP / TN / FP / FN with attacks = classes outside `negative_classes`; MC is
// an attack predicted as a different attack class.
std::string outcome_label(int truth, int pred, std::span<const int> negative_classes);

FlipCounts count_flips(const std::vector<TeamDecision>& decisions, std::span<const int> negative_classes);

struct TeamRow {
  std::string analyst;
  std::string strategy;
  std::uint64_t seed = 0;
  int subset = 0;
  std::vector<TeamDecision> decisions;
  MetricsReport metrics;
  FlipCounts flips;
  long considered = 0;
  long adopted = 0;
};

struct TeamingReport {
  std::vector<std::string> class_names;
  std::vector<int> negative_classes;
  int num_categories = 0;
  std::vector<TeamRow> rows;

  // One line per alert decision.
  std::string decisions_csv() const;
  // Per-row metrics and flip counts; contains nothing run-dependent.
  nlohmann::json summary() const;
};

struct TeamExperimentInput {
  std::vector<TrainedAnalyst> analysts;
  const AssistantPolicy* assistant = nullptr;
  std::vector<AlertRecord> alerts;
  std::vector<AdoptionStrategy> strategies;
  std::vector<std::uint64_t> seeds = {0};  // reseed random strategies
  int subset = 0;
};

// Rows are ordered analyst-major, then strategy, then seed.
std::vector<TeamRow> run_team_experiment(const TeamExperimentInput& input, InvestigationEnv& env,
                                         std::span<const int> negative_classes);

}  // namespace cbuddy
