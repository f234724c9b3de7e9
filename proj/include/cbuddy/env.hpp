#pragma once

// Alert-investigation MDP: request context categories, then classify.

#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/catalog.hpp"
#include "cbuddy/classifier_store.hpp"

namespace cbuddy {

// Coefficients are stored as the published constants; the sign convention
// applied in the reward functions is that named penalties always reduce the
// reward and named bonuses always increase it, whatever sign they carry.
struct EnvConfig {
  double correct_reward = 10.0;
  double incorrect_penalty = -10.0;
  double phi = 10.0;      // correct and confident
  double psi = 5.0;       // correct, not confident
  double omega = -5.0;    // classified without requesting any context
  double lambda1 = -0.02; // per context request
  double lambda2 = -0.5;  // per repeated request
  double eta1 = 0.2;      // per novel request
  double eta2 = 1.0;      // per unit of confidence gained
  double high_conf_threshold = 0.9;
  int max_steps_per_episode = 0;  // 0 = 3 * number of categories
  double gamma = 0.99;

  int max_steps(int num_categories) const {
    return max_steps_per_episode > 0 ? max_steps_per_episode : 3 * num_categories;
  }
  void validate(int num_categories) const;

  nlohmann::json to_json() const;
  static EnvConfig from_json(const nlohmann::json& j);
};

// Values 0..K-1 request a category; K classifies.
struct ActionId {
  int value = 0;

  bool is_classify(int num_categories) const { return value == num_categories; }
  bool operator==(const ActionId&) const = default;
};

struct Observation {
  std::vector<double> feature_slots;  // standardized; 0 while not collected
  std::vector<int> request_counters;  // per category, capped at 2
  double confidence = 0.0;
  double repeat_ratio = 0.0;

  std::vector<double> to_vector() const;
  std::size_t size() const { return feature_slots.size() + request_counters.size() + 2; }
  bool operator==(const Observation&) const = default;

  nlohmann::json to_json() const;
  static Observation from_json(const nlohmann::json& j);
};

struct StepInfo {
  std::optional<Prediction> prediction;  // set when the episode classified
  bool novel = false;
  bool repeat = false;
  bool forced = false;  // request replaced by classify at the step cap
};

struct StepOutcome {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  ActionId action;  // the action actually taken
  StepInfo info;
};

double classify_reward(int predicted, int truth, double confidence, bool used_context, const EnvConfig& config);
double request_reward(bool novel, double confidence_gain, const EnvConfig& config);

class InvestigationEnv {
 public:
  InvestigationEnv(std::shared_ptr<ClassifierStore> store, EnvConfig config);

  Observation reset(const AlertRecord& alert);
  // Throws std::logic_error when called after the episode finished.
  StepOutcome step(ActionId action);

  int num_categories() const { return k_; }
  int num_actions() const { return k_ + 1; }
  int num_classes() const { return store_->num_classes(); }
  std::size_t observation_size() const;
  const EnvConfig& config() const { return config_; }
  ClassifierStore& store() const { return *store_; }

  bool done() const { return done_; }
  int steps_taken() const { return steps_; }
  ContextMask mask() const { return mask_; }
  const Observation& observation() const { return obs_; }
  const AlertRecord& alert() const { return alert_; }

 private:
  std::shared_ptr<ClassifierStore> store_;
  EnvConfig config_;
  int k_;
  int max_steps_;

  AlertRecord alert_;
  Observation obs_;
  ContextMask mask_;
  int steps_ = 0;
  int requests_ = 0;
  int repeats_ = 0;
  bool done_ = true;
};

}  // namespace cbuddy
