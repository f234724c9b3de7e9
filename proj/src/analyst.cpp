#include "cbuddy/analyst.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cbuddy {

std::string to_string(Algorithm a) { return a == Algorithm::a2c ? "a2c" : "dqn"; }

Algorithm algorithm_from_string(std::string_view s) {
  if (s == "a2c" || s == "A2C") return Algorithm::a2c;
  if (s == "dqn" || s == "DQN") return Algorithm::dqn;
  throw std::invalid_argument("unknown algorithm '" + std::string(s) + "'");
}

AnalystConfig AnalystConfig::defaults(Algorithm algorithm) {
  AnalystConfig c;
  c.algorithm = algorithm;
  if (algorithm == Algorithm::dqn) {
    c.ent_coef = 0.12;
    c.learning_rate = 1e-3;
  }
  return c;
}

nlohmann::json AnalystConfig::to_json() const {
  return {{"id", id},
          {"algorithm", to_string(algorithm)},
          {"gamma", gamma},
          {"ent_coef", ent_coef},
          {"hidden", hidden},
          {"learning_rate", learning_rate},
          {"max_timesteps", max_timesteps},
          {"reward_stop_threshold", std::isfinite(reward_stop_threshold) ? nlohmann::json(reward_stop_threshold) : nlohmann::json(nullptr)},
          {"stop_window", stop_window},
          {"seed", seed},
          {"n_steps", n_steps},
          {"vf_coef", vf_coef},
          {"max_grad_norm", max_grad_norm},
          {"replay_capacity", replay_capacity},
          {"batch_size", batch_size},
          {"target_sync_interval", target_sync_interval},
          {"exploration_fraction", exploration_fraction},
          {"exploration_initial", exploration_initial},
          {"exploration_final", exploration_final},
          {"learning_starts", learning_starts},
          {"train_freq", train_freq},
          {"dqn_max_grad_norm", dqn_max_grad_norm}};
}

AnalystConfig AnalystConfig::from_json(const nlohmann::json& j) {
  auto c = defaults(algorithm_from_string(j.value("algorithm", std::string("a2c"))));
  c.id = j.value("id", c.id);
  c.gamma = j.value("gamma", c.gamma);
  c.ent_coef = j.value("ent_coef", c.ent_coef);
  c.hidden = j.value("hidden", c.hidden);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_timesteps = j.value("max_timesteps", c.max_timesteps);
  if (j.contains("reward_stop_threshold")) {
    const auto& t = j.at("reward_stop_threshold");
    c.reward_stop_threshold = t.is_null() ? std::numeric_limits<double>::infinity() : t.get<double>();
  }
  c.stop_window = j.value("stop_window", c.stop_window);
  c.seed = j.value("seed", c.seed);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.vf_coef = j.value("vf_coef", c.vf_coef);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.target_sync_interval = j.value("target_sync_interval", c.target_sync_interval);
  c.exploration_fraction = j.value("exploration_fraction", c.exploration_fraction);
  c.exploration_initial = j.value("exploration_initial", c.exploration_initial);
  c.exploration_final = j.value("exploration_final", c.exploration_final);
  c.learning_starts = j.value("learning_starts", c.learning_starts);
  c.train_freq = j.value("train_freq", c.train_freq);
  c.dqn_max_grad_norm = j.value("dqn_max_grad_norm", c.dqn_max_grad_norm);
  return c;
}

namespace {

NetworkSpec mlp_spec(std::size_t in, const std::vector<int>& hidden, int out, OutputHead head) {
  NetworkSpec s;
  s.layer_sizes.push_back(static_cast<int>(in));
  for (int h : hidden) s.layer_sizes.push_back(h);
  s.layer_sizes.push_back(out);
  s.head = head;
  s.validate();
  return s;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::MatrixXd stack_columns(const std::vector<const std::vector<double>*>& cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(cols.front()->size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    m.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const Eigen::VectorXd>(cols[c]->data(), m.rows());
  }
  return m;
}

}  // namespace

std::vector<double> TrainedAnalyst::action_scores(const Observation& obs) const {
  return to_std(policy.forward(obs.to_vector()));
}

ActionId TrainedAnalyst::greedy_action(const Observation& obs) const {
  const auto s = action_scores(obs);
  return {static_cast<int>(argmax(s))};
}

nlohmann::json TrainedAnalyst::to_json() const {
  nlohmann::json j{{"id", id},
                   {"algorithm", to_string(algorithm)},
                   {"config", config.to_json()},
                   {"policy", policy.to_json()},
                   {"timesteps_trained", timesteps_trained}};
  if (critic) j["critic"] = critic->to_json();
  auto& log = j["training_log"] = nlohmann::json::array();
  for (const auto& e : training_log) log.push_back({e.episode, e.episode_return, e.length});
  return j;
}

TrainedAnalyst TrainedAnalyst::from_json(const nlohmann::json& j) {
  TrainedAnalyst a;
  a.id = j.at("id").get<std::string>();
  a.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
  a.config = AnalystConfig::from_json(j.at("config"));
  a.policy = Network::from_json(j.at("policy"));
  if (j.contains("critic")) a.critic = Network::from_json(j.at("critic"));
  a.timesteps_trained = j.value("timesteps_trained", std::int64_t{0});
  for (const auto& e : j.value("training_log", nlohmann::json::array())) {
    a.training_log.push_back({e.at(0).get<std::int64_t>(), e.at(1).get<double>(), e.at(2).get<int>()});
  }
  return a;
}

std::string TrainedAnalyst::training_log_csv() const {
  std::ostringstream out;
  out << "episode,return,length\n";
  out.precision(10);
  for (const auto& e : training_log) out << e.episode << ',' << e.episode_return << ',' << e.length << '\n';
  return out.str();
}

std::vector<int> Trajectory::requested_categories(int num_categories) const {
  std::vector<int> out;
  for (const auto& s : steps) {
    if (s.action.is_classify(num_categories)) continue;
    if (std::find(out.begin(), out.end(), s.action.value) == out.end()) out.push_back(s.action.value);
  }
  return out;
}

ContextMask Trajectory::mask(int num_categories) const {
  ContextMask m;
  for (int k : requested_categories(num_categories)) m = m.with(k);
  return m;
}

double Trajectory::total_return() const {
  double r = 0.0;
  for (const auto& s : steps) r += s.reward;
  return r;
}

nlohmann::json Trajectory::to_json() const {
  auto steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    steps_json.push_back({{"obs", s.observation.to_json()}, {"action", s.action.value}, {"reward", s.reward}});
  }
  return {{"alert_id", alert_id},
          {"source", source},
          {"steps", std::move(steps_json)},
          {"final_observation", final_observation.to_json()},
          {"final_prediction",
           {{"probs", final_prediction.probs},
            {"class", final_prediction.predicted_class},
            {"confidence", final_prediction.confidence}}},
          {"truth", truth}};
}

Trajectory Trajectory::from_json(const nlohmann::json& j) {
  Trajectory t;
  t.alert_id = j.at("alert_id").get<std::int64_t>();
  t.source = j.value("source", std::string{});
  for (const auto& s : j.at("steps")) {
    t.steps.push_back({Observation::from_json(s.at("obs")), ActionId{s.at("action").get<int>()},
                       s.at("reward").get<double>()});
  }
  t.final_observation = Observation::from_json(j.at("final_observation"));
  const auto& p = j.at("final_prediction");
  t.final_prediction.probs = p.at("probs").get<std::vector<double>>();
  t.final_prediction.predicted_class = p.at("class").get<int>();
  t.final_prediction.confidence = p.at("confidence").get<double>();
  t.truth = j.at("truth").get<int>();
  return t;
}

Trajectory run_episode(InvestigationEnv& env, const AlertRecord& alert, const PolicyFn& policy, std::string source) {
  Trajectory t;
  t.alert_id = alert.alert_id;
  t.source = std::move(source);
  t.truth = alert.label;
  Observation obs = env.reset(alert);
  while (true) {
    const auto out = env.step(policy(obs));
    t.steps.push_back({std::move(obs), out.action, out.reward});
    obs = out.observation;
    if (out.done) {
      t.final_prediction = *out.info.prediction;
      break;
    }
  }
  t.final_observation = std::move(obs);
  return t;
}

double soft_state_value(std::span<const double> q, double tau) {
  const double m = *std::max_element(q.begin(), q.end());
  if (tau <= 0.0) return m;
  double s = 0.0;
  for (double v : q) s += std::exp((v - m) / tau);
  return m + tau * std::log(s);
}

double bellman_target(double reward, bool done, std::span<const double> next_q, double gamma, double tau) {
  return done ? reward : reward + gamma * soft_state_value(next_q, tau);
}

// ---- A2C ----

A2CLearner::A2CLearner(std::size_t obs_size, int n_actions, const AnalystConfig& config, Rng& init_rng,
                       std::size_t critic_extra)
    : config_(config),
      n_actions_(n_actions),
      critic_extra_(critic_extra),
      actor_(mlp_spec(obs_size, config.hidden, n_actions, OutputHead::softmax), init_rng),
      critic_(mlp_spec(obs_size + critic_extra, config.hidden, 1, OutputHead::linear), init_rng),
      actor_opt_(OptimizerConfig::rmsprop(config.learning_rate), actor_),
      critic_opt_(OptimizerConfig::rmsprop(config.learning_rate), critic_) {}

std::vector<double> A2CLearner::probabilities(const std::vector<double>& obs) const {
  return to_std(actor_.forward(obs));
}

ActionId A2CLearner::sample(const std::vector<double>& obs, Rng& rng) const {
  const auto p = probabilities(obs);
  return {static_cast<int>(sample_categorical(p, rng))};
}

std::vector<double> A2CLearner::critic_input(const std::vector<double>& obs, std::span<const double> extra) const {
  if (extra.size() != critic_extra_) throw std::invalid_argument("critic input has the wrong size");
  if (critic_extra_ == 0) return obs;
  std::vector<double> x = obs;
  x.insert(x.end(), extra.begin(), extra.end());
  return x;
}

std::optional<double> A2CLearner::record(const std::vector<double>& obs, int action, double reward, bool done,
                                         const std::vector<double>& next_obs, std::span<const double> extra,
                                         std::span<const double> next_extra) {
  buffer_.push_back({obs, critic_extra_ ? critic_input(obs, extra) : std::vector<double>{}, action, reward, done});
  if (static_cast<int>(buffer_.size()) < config_.n_steps) return std::nullopt;
  return update(critic_input(next_obs, next_extra), done);
}

double A2CLearner::update(const std::vector<double>& bootstrap_critic_input, bool bootstrap_done) {
  const std::size_t n = buffer_.size();
  std::vector<const std::vector<double>*> cols, critic_cols;
  cols.reserve(n);
  for (const auto& t : buffer_) {
    cols.push_back(&t.obs);
    critic_cols.push_back(critic_extra_ ? &t.critic_obs : &t.obs);
  }
  const Eigen::MatrixXd x = stack_columns(cols);
  const Eigen::MatrixXd cx = critic_extra_ ? stack_columns(critic_cols) : x;

  double next_value = bootstrap_done ? 0.0 : critic_.logits(bootstrap_critic_input)(0);
  std::vector<double> returns(n);
  for (std::size_t i = n; i-- > 0;) {
    if (buffer_[i].done) next_value = 0.0;
    next_value = buffer_[i].reward + config_.gamma * next_value;
    returns[i] = next_value;
  }

  const auto actor_acts = actor_.forward_train(x);
  const auto critic_acts = critic_.forward_train(cx);
  Eigen::MatrixXd probs = actor_acts.values.back();
  softmax_columns(probs);
  const Eigen::MatrixXd& values = critic_acts.values.back();

  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::MatrixXd d_actor(n_actions_, static_cast<Eigen::Index>(n));
  Eigen::MatrixXd d_critic(1, static_cast<Eigen::Index>(n));
  double pg_loss = 0.0, value_loss = 0.0, entropy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const double v = values(0, c);
    const double adv = returns[i] - v;
    double h = 0.0;
    for (int a = 0; a < n_actions_; ++a) {
      const double p = probs(a, c);
      if (p > 0.0) h -= p * std::log(p);
    }
    const int act = buffer_[i].action;
    pg_loss -= adv * std::log(std::max(probs(act, c), 1e-300)) * inv_n;
    value_loss += adv * adv * inv_n;
    entropy += h * inv_n;
    for (int a = 0; a < n_actions_; ++a) {
      const double p = probs(a, c);
      const double logp = p > 0.0 ? std::log(p) : 0.0;
      const double onehot = a == act ? 1.0 : 0.0;
      d_actor(a, c) = (-adv * (onehot - p) + config_.ent_coef * p * (logp + h)) * inv_n;
    }
    d_critic(0, c) = config_.vf_coef * 2.0 * (v - returns[i]) * inv_n;
  }
  const double loss = pg_loss - config_.ent_coef * entropy + config_.vf_coef * value_loss;
  if (!std::isfinite(loss)) throw NumericError("a2c loss is not finite");

  auto g_actor = actor_.backward(actor_acts, d_actor);
  auto g_critic = critic_.backward(critic_acts, d_critic);
  Gradients* both[] = {&g_actor, &g_critic};
  clip_global_norm(both, config_.max_grad_norm);
  actor_opt_.step(actor_, g_actor);
  critic_opt_.step(critic_, g_critic);
  buffer_.clear();
  return loss;
}

// ---- DQN ----

DqnLearner::DqnLearner(std::size_t obs_size, int n_actions, const AnalystConfig& config, Rng& init_rng)
    : config_(config),
      n_actions_(n_actions),
      q_(mlp_spec(obs_size, config.hidden, n_actions, OutputHead::linear), init_rng),
      target_(q_),
      opt_(OptimizerConfig::adam(config.learning_rate), q_) {
  replay_.reserve(static_cast<std::size_t>(std::max(1, config.replay_capacity)));
}

ActionId DqnLearner::act(const std::vector<double>& obs, double epsilon, Rng& rng) const {
  if (rng.uniform() < epsilon) return {static_cast<int>(rng.below(static_cast<std::size_t>(n_actions_)))};
  return {static_cast<int>(argmax(as_span(q_.logits(obs))))};
}

void DqnLearner::store(ReplayTransition t) {
  const auto cap = static_cast<std::size_t>(std::max(1, config_.replay_capacity));
  if (replay_.size() < cap) {
    replay_.push_back(std::move(t));
  } else {
    replay_[replay_next_] = std::move(t);
  }
  replay_next_ = (replay_next_ + 1) % cap;
}

std::vector<double> DqnLearner::td_targets(std::span<const ReplayTransition> batch) const {
  std::vector<const std::vector<double>*> cols;
  for (const auto& t : batch) cols.push_back(&t.next_obs);
  const Eigen::MatrixXd next_q = target_.logits_batch(stack_columns(cols));
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Eigen::VectorXd col = next_q.col(static_cast<Eigen::Index>(i));
    y[i] = bellman_target(batch[i].reward, batch[i].done, as_span(col), config_.gamma, config_.ent_coef);
  }
  return y;
}

double DqnLearner::update(std::span<const ReplayTransition> batch) {
  const auto y = td_targets(batch);
  std::vector<const std::vector<double>*> cols;
  for (const auto& t : batch) cols.push_back(&t.obs);
  const auto acts = q_.forward_train(stack_columns(cols));
  const Eigen::MatrixXd& q = acts.values.back();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(q.rows(), q.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const double diff = q(batch[i].action, c) - y[i];
    const double ad = std::abs(diff);
    loss += (ad <= 1.0 ? 0.5 * diff * diff : ad - 0.5) * inv_b;
    dq(batch[i].action, c) = std::clamp(diff, -1.0, 1.0) * inv_b;
  }
  if (!std::isfinite(loss)) throw NumericError("dqn loss is not finite");
  auto g = q_.backward(acts, dq);
  Gradients* one[] = {&g};
  clip_global_norm(one, config_.dqn_max_grad_norm);
  opt_.step(q_, g);
  return loss;
}

double DqnLearner::update_from_replay(Rng& rng) {
  const std::size_t b = std::min(replay_.size(), static_cast<std::size_t>(std::max(1, config_.batch_size)));
  std::vector<ReplayTransition> batch;
  batch.reserve(b);
  for (std::size_t i = 0; i < b; ++i) batch.push_back(replay_[rng.below(replay_.size())]);
  return update(batch);
}

// ---- training ----

namespace {

class StopMonitor {
 public:
  StopMonitor(int window, double threshold) : window_(std::max(1, window)), threshold_(threshold) {}

  // Returns true once the rolling mean reaches the threshold. A non-finite
  // threshold never stops training.
  bool add(double episode_return) {
    recent_.push_back(episode_return);
    sum_ += episode_return;
    if (static_cast<int>(recent_.size()) > window_) {
      sum_ -= recent_.front();
      recent_.pop_front();
    }
    return std::isfinite(threshold_) && static_cast<int>(recent_.size()) == window_ && sum_ / window_ >= threshold_;
  }

 private:
  int window_;
  double threshold_;
  std::deque<double> recent_;
  double sum_ = 0.0;
};

}  // namespace

TrainedAnalyst train_analyst(const EnvFactory& env_factory, const std::vector<AlertRecord>& alerts,
                             const AnalystConfig& config) {
  if (alerts.empty()) throw DataError("analyst training needs alerts");
  InvestigationEnv env = env_factory();
  Rng rng(config.seed);
  const auto obs_size = env.observation_size();
  const int n_actions = env.num_actions();

  TrainedAnalyst out;
  out.id = config.id;
  out.algorithm = config.algorithm;
  out.config = config;

  std::optional<A2CLearner> a2c;
  std::optional<DqnLearner> dqn;
  if (config.algorithm == Algorithm::a2c) {
    a2c.emplace(obs_size, n_actions, config, rng);
  } else {
    dqn.emplace(obs_size, n_actions, config, rng);
  }

  StopMonitor monitor(config.stop_window, config.reward_stop_threshold);
  std::vector<double> obs = env.reset(alerts[rng.below(alerts.size())]).to_vector();
  double ep_return = 0.0;
  int ep_len = 0;
  std::int64_t t = 0;
  try {
    while (t < config.max_timesteps) {
      ActionId action;
      if (a2c) {
        action = a2c->sample(obs, rng);
      } else {
        const double frac = config.max_timesteps > 0
                                ? static_cast<double>(t) / static_cast<double>(config.max_timesteps)
                                : 1.0;
        const double progress =
            config.exploration_fraction > 0.0 ? std::min(1.0, frac / config.exploration_fraction) : 1.0;
        const double eps =
            config.exploration_initial + (config.exploration_final - config.exploration_initial) * progress;
        action = dqn->act(obs, eps, rng);
      }
      const auto step = env.step(action);
      auto next = step.observation.to_vector();
      ++t;
      ep_return += step.reward;
      ++ep_len;
      if (a2c) {
        a2c->record(obs, step.action.value, step.reward, step.done, next);
      } else {
        dqn->store({obs, step.action.value, step.reward, step.done, next});
        if (t >= config.learning_starts && t % std::max(1, config.train_freq) == 0) dqn->update_from_replay(rng);
        if (t % std::max(1, config.target_sync_interval) == 0) dqn->sync_target();
      }
      if (step.done) {
        out.training_log.push_back({static_cast<std::int64_t>(out.training_log.size()), ep_return, ep_len});
        const bool stop = monitor.add(ep_return);
        ep_return = 0.0;
        ep_len = 0;
        if (stop) break;
        obs = env.reset(alerts[rng.below(alerts.size())]).to_vector();
      } else {
        obs = std::move(next);
      }
    }
  } catch (const NumericError& e) {
    throw NumericError("analyst '" + config.id + "' diverged at timestep " + std::to_string(t) + " (episode " +
                       std::to_string(out.training_log.size()) + "): " + e.what());
  }

  out.timesteps_trained = t;
  if (a2c) {
    out.policy = a2c->actor();
    out.critic = a2c->critic();
  } else {
    out.policy = dqn->q_network();
  }
  return out;
}

Trajectory rollout(const TrainedAnalyst& analyst, InvestigationEnv& env, const AlertRecord& alert, RolloutMode mode,
                   Rng* rng) {
  if (mode == RolloutMode::stochastic && rng == nullptr) {
    throw std::invalid_argument("stochastic rollout needs a random stream");
  }
  PolicyFn policy = [&](const Observation& obs) -> ActionId {
    if (mode == RolloutMode::greedy) return analyst.greedy_action(obs);
    const auto s = analyst.action_scores(obs);
    if (analyst.algorithm == Algorithm::a2c) return {static_cast<int>(sample_categorical(s, *rng))};
    // Boltzmann over Q-values at the entropy temperature.
    const double tau = analyst.config.ent_coef > 0.0 ? analyst.config.ent_coef : 1.0;
    Eigen::VectorXd z(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) z(static_cast<Eigen::Index>(i)) = s[i] / tau;
    const Eigen::VectorXd p = softmax(z);
    return {static_cast<int>(sample_categorical(as_span(p), *rng))};
  };
  return run_episode(env, alert, policy, analyst.id);
}

std::vector<Trajectory> collect_traces(const std::vector<TrainedAnalyst>& analysts, InvestigationEnv& env,
                                       const std::vector<AlertRecord>& alerts, int per_alert, std::uint64_t seed) {
  std::vector<Trajectory> out;
  out.reserve(analysts.size() * alerts.size() * static_cast<std::size_t>(std::max(1, per_alert)));
  for (std::size_t ai = 0; ai < analysts.size(); ++ai) {
    Rng rng(mix_seed(seed, ai));
    for (const auto& alert : alerts) {
      out.push_back(rollout(analysts[ai], env, alert, RolloutMode::greedy));
      for (int extra = 1; extra < per_alert; ++extra) {
        out.push_back(rollout(analysts[ai], env, alert, RolloutMode::stochastic, &rng));
      }
    }
  }
  return out;
}

}  // namespace cbuddy
