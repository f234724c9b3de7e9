#pragma once

// Simulated analysts: advantage actor-critic and deep Q-learning agents
// trained on the investigation environment, plus rollout and trace helpers.

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/env.hpp"
#include "cbuddy/nn.hpp"

namespace cbuddy {

enum class Algorithm { a2c, dqn };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(std::string_view s);

struct AnalystConfig {
  std::string id;
  Algorithm algorithm = Algorithm::a2c;
  double gamma = 0.99;
  double ent_coef = 0.001;
  std::vector<int> hidden = {64, 64};
  double learning_rate = 7e-4;
  std::int64_t max_timesteps = 60000;
  double reward_stop_threshold = 12.0;
  int stop_window = 100;
  std::uint64_t seed = 0;

  // a2c
  int n_steps = 5;
  double vf_coef = 0.5;
  double max_grad_norm = 0.5;

  // dqn
  int replay_capacity = 10000;
  int batch_size = 64;
  int target_sync_interval = 1000;
  double exploration_fraction = 0.3;
  double exploration_initial = 1.0;
  double exploration_final = 0.05;
  int learning_starts = 1000;
  int train_freq = 4;
  double dqn_max_grad_norm = 10.0;

  // Defaults for each algorithm (entropy coefficient and optimizer step).
  static AnalystConfig defaults(Algorithm algorithm);

  nlohmann::json to_json() const;
  static AnalystConfig from_json(const nlohmann::json& j);
};

struct EpisodeLog {
  std::int64_t episode = 0;
  double episode_return = 0.0;
  int length = 0;
};

struct TrainedAnalyst {
  std::string id;
  Algorithm algorithm = Algorithm::a2c;
  AnalystConfig config;
  Network policy;  // actor (softmax) for a2c, Q-values (linear) for dqn
  std::optional<Network> critic;
  std::vector<EpisodeLog> training_log;
  std::int64_t timesteps_trained = 0;

  // Action probabilities (a2c) or Q-values (dqn).
  std::vector<double> action_scores(const Observation& obs) const;
  ActionId greedy_action(const Observation& obs) const;

  nlohmann::json to_json() const;
  static TrainedAnalyst from_json(const nlohmann::json& j);
  std::string training_log_csv() const;
};

struct TrajectoryStep {
  Observation observation;
  ActionId action;
  double reward = 0.0;

  bool operator==(const TrajectoryStep&) const = default;
};

struct Trajectory {
  std::int64_t alert_id = 0;
  std::string source;  // id of the agent that produced it
  std::vector<TrajectoryStep> steps;
  Observation final_observation;
  Prediction final_prediction;
  int truth = 0;

  // Categories requested at least once, in first-request order.
  std::vector<int> requested_categories(int num_categories) const;
  ContextMask mask(int num_categories) const;
  double total_return() const;
  bool operator==(const Trajectory&) const = default;

  nlohmann::json to_json() const;
  static Trajectory from_json(const nlohmann::json& j);
};

using EnvFactory = std::function<InvestigationEnv()>;
using PolicyFn = std::function<ActionId(const Observation&)>;

// Runs one episode to termination; the environment forces classification
// at the step cap.
Trajectory run_episode(InvestigationEnv& env, const AlertRecord& alert, const PolicyFn& policy,
                       std::string source = {});

// Soft (entropy-regularized) state value of Q-values at temperature tau;
// tau = 0 gives max_a Q.
double soft_state_value(std::span<const double> q, double tau);

// One-step Bellman target r + gamma * (1 - done) * V(s').
double bellman_target(double reward, bool done, std::span<const double> next_q, double gamma, double tau);

// Synchronous n-step advantage actor-critic with separate actor and critic.
// The critic may see `critic_extra` inputs beyond the observation (for
// example elapsed time when returns depend on it).
class A2CLearner {
 public:
  A2CLearner(std::size_t obs_size, int n_actions, const AnalystConfig& config, Rng& init_rng,
             std::size_t critic_extra = 0);

  ActionId sample(const std::vector<double>& obs, Rng& rng) const;
  std::vector<double> probabilities(const std::vector<double>& obs) const;

  // Adds a transition; performs an update every n_steps transitions.
  // Returns the combined loss of the update when one happened.
  std::optional<double> record(const std::vector<double>& obs, int action, double reward, bool done,
                               const std::vector<double>& next_obs, std::span<const double> extra = {},
                               std::span<const double> next_extra = {});

  const Network& actor() const { return actor_; }
  const Network& critic() const { return critic_; }
  Network& actor() { return actor_; }

 private:
  double update(const std::vector<double>& bootstrap_critic_input, bool bootstrap_done);
  std::vector<double> critic_input(const std::vector<double>& obs, std::span<const double> extra) const;

  AnalystConfig config_;
  int n_actions_;
  std::size_t critic_extra_;
  Network actor_, critic_;
  Optimizer actor_opt_, critic_opt_;
  struct Transition {
    std::vector<double> obs;
    std::vector<double> critic_obs;
    int action;
    double reward;
    bool done;
  };
  std::vector<Transition> buffer_;
};

struct ReplayTransition {
  std::vector<double> obs;
  int action = 0;
  double reward = 0.0;
  bool done = false;
  std::vector<double> next_obs;
};

class DqnLearner {
 public:
  DqnLearner(std::size_t obs_size, int n_actions, const AnalystConfig& config, Rng& init_rng);

  ActionId act(const std::vector<double>& obs, double epsilon, Rng& rng) const;
  void store(ReplayTransition t);
  std::size_t replay_size() const { return replay_.size(); }

  // Targets for a batch from the target network.
  std::vector<double> td_targets(std::span<const ReplayTransition> batch) const;
  // Huber-loss gradient step on a batch; returns the loss.
  double update(std::span<const ReplayTransition> batch);
  double update_from_replay(Rng& rng);
  void sync_target() { target_ = q_; }

  const Network& q_network() const { return q_; }
  const Network& target_network() const { return target_; }

 private:
  AnalystConfig config_;
  int n_actions_;
  Network q_, target_;
  Optimizer opt_;
  std::vector<ReplayTransition> replay_;
  std::size_t replay_next_ = 0;
};

// Trains one analyst on episodes over randomly drawn `alerts`. Stops at
// max_timesteps or when the rolling mean return over `stop_window` episodes
// reaches reward_stop_threshold. Throws NumericError on divergence.
TrainedAnalyst train_analyst(const EnvFactory& env_factory, const std::vector<AlertRecord>& alerts,
                             const AnalystConfig& config);

enum class RolloutMode { greedy, stochastic };

Trajectory rollout(const TrainedAnalyst& analyst, InvestigationEnv& env, const AlertRecord& alert,
                   RolloutMode mode = RolloutMode::greedy, Rng* rng = nullptr);

// One greedy trajectory per (analyst, alert); extra copies per alert are
// stochastic rollouts seeded by `seed`.
std::vector<Trajectory> collect_traces(const std::vector<TrainedAnalyst>& analysts, InvestigationEnv& env,
                                       const std::vector<AlertRecord>& alerts, int per_alert = 1,
                                       std::uint64_t seed = 0);

}  // namespace cbuddy
