#pragma once

// Assistant policy learning from analyst trajectories: behavior cloning and
// adversarial imitation with a potential-shaped discriminator.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/analyst.hpp"

namespace cbuddy {

enum class Provenance { bc, gail };

std::string to_string(Provenance p);

struct AssistantPolicy {
  Network policy;  // softmax over K + 1 actions
  Provenance provenance = Provenance::bc;
  std::vector<std::string> sources;
  std::int64_t budget_consumed = 0;

  std::vector<double> probabilities(const Observation& obs) const;
  ActionId greedy_action(const Observation& obs) const;

  nlohmann::json to_json() const;
  static AssistantPolicy from_json(const nlohmann::json& j);
};

struct BCConfig {
  int epochs = 40;
  int batch_size = 64;  // <= 0 means full batch
  double learning_rate = 1e-3;
  std::vector<int> hidden = {64, 64};
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static BCConfig from_json(const nlohmann::json& j);
};

// (s, a, s', done) as seen by the discriminator. Episodes can be padded to a
// fixed horizon with an absorbing state (all-zero observation plus an
// indicator) that the discriminator scores like any other state. Without it
// a strictly positive imitation reward favours long episodes.
struct Transition {
  std::vector<double> obs;
  int action = 0;
  std::vector<double> next_obs;
  bool done = false;
  bool absorbing = false;       // s is the absorbing state
  bool next_absorbing = false;  // s' is the absorbing state
};

// With horizon > 0 each trajectory's terminal step leads to the absorbing
// state, followed by absorbing self-transitions up to `horizon` steps.
// With horizon = 0 the terminal step is marked done.
std::vector<Transition> expert_transitions(const std::vector<Trajectory>& traces, int horizon = 0);

// Minimizes action cross-entropy over all (observation, action) pairs of the
// traces, classify steps included. Samples are put in a canonical order
// before the seeded shuffle, so trace order does not affect the result.
// `epoch_losses`, when given, receives the full-dataset loss after each epoch.
AssistantPolicy behavior_clone(const std::vector<Trajectory>& traces, const BCConfig& config,
                               std::vector<double>* epoch_losses = nullptr);

// D(s, a, s') = sigmoid(g(s, a) + gamma * (1 - done) * h(s') - h(s)), the
// probability that a transition came from an expert.
class Discriminator {
 public:
  Discriminator(std::size_t obs_size, int n_actions, double gamma, Rng& rng,
                const std::vector<int>& hidden = {32, 32}, double learning_rate = 3e-4);

  double reward_term(const Transition& t) const;     // g(s, a)
  double potential(std::span<const double> s, bool absorbing = false) const;  // h(s)
  double logit(const Transition& t) const;
  double probability(const Transition& t) const;

  struct LossGradients {
    double loss = 0.0;
    Gradients g, h;
  };
  // Mean binary cross-entropy (expert label 1, generator label 0) and its
  // gradient for both networks.
  LossGradients loss_gradients(std::span<const Transition> expert, std::span<const Transition> generated) const;

  // One Adam step of binary cross-entropy, expert label 1, generator label 0.
  // Returns the loss before the step.
  double train_step(std::span<const Transition> expert, std::span<const Transition> generated);
  double accuracy(std::span<const Transition> expert, std::span<const Transition> generated) const;

  const Network& reward_net() const { return g_; }
  const Network& potential_net() const { return h_; }
  Network& reward_net() { return g_; }
  Network& potential_net() { return h_; }
  double gamma() const { return gamma_; }

 private:
  std::vector<double> g_input(const Transition& t) const;
  std::vector<double> h_input(const std::vector<double>& s, bool absorbing) const;

  int n_actions_;
  double gamma_;
  Network g_, h_;
  Optimizer g_opt_, h_opt_;
};

// -log(1 - D), clamped to [-20, 20].
double imitation_reward(double d);
double imitation_reward(const Discriminator& disc, const Transition& t);

struct GailConfig {
  int buffer_capacity = 3000;
  int disc_updates_per_round = 10;
  std::int64_t total_transition_budget = 40000;
  int round_transitions = 25;  // generator transitions per round
  int disc_batch_size = 64;  // per side
  double disc_learning_rate = 3e-4;
  std::vector<int> disc_hidden = {32, 32};
  AnalystConfig generator = AnalystConfig::defaults(Algorithm::a2c);
  // Pad generator and expert episodes to the environment's step cap with an
  // absorbing state. The generator's critic then also sees elapsed time.
  bool absorbing_states = false;
  // Subtract the previous round's mean generator reward from the reward the
  // generator learns on. A constant shift only changes how episode length is
  // valued, so this removes the survival bias of a positive reward.
  bool center_rewards = true;
  // Initialize the generator's actor by behavior cloning before adversarial
  // rounds (0 epochs = off).
  int bc_warm_start_epochs = 0;
  // Every this many rounds, replay the experts' alerts with the greedy
  // generator, score how closely its final context masks match theirs, and
  // keep the best actor seen. Adversarial training oscillates, so the last
  // round is a poor pick. 0 = return the final actor.
  int select_every_rounds = 40;
  int select_alerts = 200;  // distinct expert alerts replayed per check
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static GailConfig from_json(const nlohmann::json& j);
};

struct GailRound {
  int round = 0;
  std::int64_t transitions = 0;
  double disc_loss = 0.0;
  double disc_accuracy = 0.0;
  double expert_reward = 0.0;     // mean imitation reward on expert transitions
  double generator_reward = 0.0;  // mean imitation reward during the rollout
  double absorbing_reward = 0.0;  // imitation reward of one absorbing step
  double episode_length = 0.0;    // mean length of generator episodes finished in the round
  double mask_agreement = -1.0;   // see mask_agreement(); -1 = not scored this round
};

struct GailResult {
  AssistantPolicy assistant;
  std::vector<GailRound> rounds;
  int selected_round = -1;  // round whose actor was returned
};

// Fraction of expert (observation, action) pairs where the policy's greedy
// action matches.
double action_agreement(const Network& policy, const std::vector<Trajectory>& traces);

// Mean over expert traces of 1 - |M_policy xor M_expert| / K, where M is the
// set of categories requested before classifying and the policy replays the
// trace's alert greedily. Only traces whose alert is in `alerts` count;
// `max_alerts` > 0 keeps the lowest alert ids.
double mask_agreement(const Network& policy, const std::vector<Trajectory>& traces, InvestigationEnv& env,
                      const std::vector<AlertRecord>& alerts, int max_alerts = 0);

// Called after every round with the generator's current actor and the
// discriminator.
using GailObserver = std::function<void(const GailRound&, const Network& actor, const Discriminator& disc)>;

// Alternates generator rollouts (a2c on the imitation reward, episodes over
// `alerts`) with discriminator updates until the sampled transition count
// reaches the budget. At least one round always runs.
GailResult train_gail(const std::vector<Trajectory>& traces, const EnvFactory& env_factory,
                      const std::vector<AlertRecord>& alerts, const GailConfig& config,
                      const GailObserver& observer = {});

// Uniform subsample of per_source trajectories from each source, kept in
// their original order, concatenated in source-id order.
std::vector<Trajectory> merge_multi_source(const std::map<std::string, std::vector<Trajectory>>& traces_by_analyst,
                                           int per_source, std::uint64_t seed);

}  // namespace cbuddy
