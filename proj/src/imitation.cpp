#include "cbuddy/imitation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>

namespace cbuddy {

std::string to_string(Provenance p) { return p == Provenance::bc ? "bc" : "gail"; }

std::vector<double> AssistantPolicy::probabilities(const Observation& obs) const {
  const auto p = policy.forward(obs.to_vector());
  return {p.data(), p.data() + p.size()};
}

ActionId AssistantPolicy::greedy_action(const Observation& obs) const {
  return {static_cast<int>(argmax(probabilities(obs)))};
}

nlohmann::json AssistantPolicy::to_json() const {
  return {{"method", to_string(provenance)},
          {"sources", sources},
          {"budget_consumed", budget_consumed},
          {"policy", policy.to_json()}};
}

AssistantPolicy AssistantPolicy::from_json(const nlohmann::json& j) {
  AssistantPolicy a;
  a.provenance = j.at("method").get<std::string>() == "gail" ? Provenance::gail : Provenance::bc;
  a.sources = j.value("sources", std::vector<std::string>{});
  a.budget_consumed = j.value("budget_consumed", std::int64_t{0});
  a.policy = Network::from_json(j.at("policy"));
  return a;
}

nlohmann::json BCConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"hidden", hidden}, {"seed", seed}};
}

BCConfig BCConfig::from_json(const nlohmann::json& j) {
  BCConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.hidden = j.value("hidden", c.hidden);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<Transition> expert_transitions(const std::vector<Trajectory>& traces, int horizon) {
  std::vector<Transition> out;
  for (const auto& tr : traces) {
    const int n = static_cast<int>(tr.steps.size());
    for (int i = 0; i < n; ++i) {
      const bool last = i + 1 == n;
      Transition t;
      t.obs = tr.steps[static_cast<std::size_t>(i)].observation.to_vector();
      t.action = tr.steps[static_cast<std::size_t>(i)].action.value;
      if (last && horizon > 0) {
        t.next_obs.assign(t.obs.size(), 0.0);
        t.next_absorbing = true;
      } else {
        t.next_obs = last ? tr.final_observation.to_vector() : tr.steps[static_cast<std::size_t>(i) + 1].observation.to_vector();
        t.done = last;
      }
      out.push_back(std::move(t));
    }
    if (horizon > 0 && n > 0) {
      const auto size = tr.steps.front().observation.size();
      for (int i = n; i < horizon; ++i) {
        out.push_back({std::vector<double>(size, 0.0), tr.steps.back().action.value, std::vector<double>(size, 0.0),
                       false, true, true});
      }
    }
  }
  return out;
}

namespace {

NetworkSpec policy_spec(std::size_t obs_size, const std::vector<int>& hidden, int n_actions) {
  NetworkSpec s;
  s.layer_sizes.push_back(static_cast<int>(obs_size));
  for (int h : hidden) s.layer_sizes.push_back(h);
  s.layer_sizes.push_back(n_actions);
  s.head = OutputHead::softmax;
  s.validate();
  return s;
}

int infer_num_actions(const std::vector<Trajectory>& traces) {
  // Classify is the terminal action and the highest action id.
  const auto& tr = traces.front();
  if (tr.steps.empty()) throw DataError("trajectory without steps");
  return tr.steps.back().action.value + 1;
}

}  // namespace

AssistantPolicy behavior_clone(const std::vector<Trajectory>& traces, const BCConfig& config,
                               std::vector<double>* epoch_losses) {
  if (traces.empty()) throw DataError("behavior cloning needs at least one trajectory");
  if (config.epochs < 1) throw std::invalid_argument("BC epochs must be at least 1");
  const int n_actions = infer_num_actions(traces);

  std::vector<Sample> samples;
  for (const auto& tr : traces) {
    for (const auto& s : tr.steps) {
      Sample smp;
      smp.input = s.observation.to_vector();
      smp.target.assign(static_cast<std::size_t>(n_actions), 0.0);
      smp.target.at(static_cast<std::size_t>(s.action.value)) = 1.0;
      samples.push_back(std::move(smp));
    }
  }
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) {
    if (a.input != b.input) return a.input < b.input;
    return a.target < b.target;
  });

  Rng rng(config.seed);
  AssistantPolicy out;
  out.provenance = Provenance::bc;
  out.policy = Network(policy_spec(samples.front().input.size(), config.hidden, n_actions), rng);
  for (const auto& tr : traces) {
    if (std::find(out.sources.begin(), out.sources.end(), tr.source) == out.sources.end()) out.sources.push_back(tr.source);
  }
  std::sort(out.sources.begin(), out.sources.end());

  Optimizer opt(OptimizerConfig::adam(config.learning_rate), out.policy);
  const std::size_t bs = config.batch_size <= 0 ? samples.size() : static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(samples[order[i]]);
      auto res = loss_gradients(out.policy, batch, Loss::cross_entropy);
      if (!std::isfinite(res.loss)) throw NumericError("BC loss is not finite at epoch " + std::to_string(epoch));
      opt.step(out.policy, res.grads);
    }
    if (epoch_losses) epoch_losses->push_back(loss_gradients(out.policy, samples, Loss::cross_entropy).loss);
  }
  return out;
}

// ---- discriminator ----

Discriminator::Discriminator(std::size_t obs_size, int n_actions, double gamma, Rng& rng,
                             const std::vector<int>& hidden, double learning_rate)
    : n_actions_(n_actions), gamma_(gamma) {
  NetworkSpec gs, hs;
  gs.layer_sizes.push_back(static_cast<int>(obs_size) + 1 + n_actions);
  hs.layer_sizes.push_back(static_cast<int>(obs_size) + 1);
  for (int h : hidden) {
    gs.layer_sizes.push_back(h);
    hs.layer_sizes.push_back(h);
  }
  gs.layer_sizes.push_back(1);
  hs.layer_sizes.push_back(1);
  g_ = Network(gs, rng);
  h_ = Network(hs, rng);
  g_opt_ = Optimizer(OptimizerConfig::adam(learning_rate), g_);
  h_opt_ = Optimizer(OptimizerConfig::adam(learning_rate), h_);
}

// Inputs carry a trailing absorbing-state indicator.
std::vector<double> Discriminator::h_input(const std::vector<double>& s, bool absorbing) const {
  std::vector<double> x = s;
  x.push_back(absorbing ? 1.0 : 0.0);
  return x;
}

std::vector<double> Discriminator::g_input(const Transition& t) const {
  std::vector<double> x = h_input(t.obs, t.absorbing);
  const auto base = x.size();
  x.resize(base + static_cast<std::size_t>(n_actions_), 0.0);
  x.at(base + static_cast<std::size_t>(t.action)) = 1.0;
  return x;
}

double Discriminator::reward_term(const Transition& t) const { return g_.logits(g_input(t))(0); }

double Discriminator::potential(std::span<const double> s, bool absorbing) const {
  return h_.logits(h_input({s.begin(), s.end()}, absorbing))(0);
}

double Discriminator::logit(const Transition& t) const {
  const double next = t.done ? 0.0 : gamma_ * potential(t.next_obs, t.next_absorbing);
  return reward_term(t) + next - potential(t.obs, t.absorbing);
}

double Discriminator::probability(const Transition& t) const { return 1.0 / (1.0 + std::exp(-logit(t))); }

Discriminator::LossGradients Discriminator::loss_gradients(std::span<const Transition> expert,
                                                           std::span<const Transition> generated) const {
  std::vector<Transition> all(expert.begin(), expert.end());
  all.insert(all.end(), generated.begin(), generated.end());
  const auto n = static_cast<Eigen::Index>(all.size());
  if (n == 0) return {0.0, g_.zero_gradients(), h_.zero_gradients()};

  Eigen::MatrixXd gx(g_.spec().input_size(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto x = g_input(all[static_cast<std::size_t>(i)]);
    gx.col(i) = Eigen::Map<const Eigen::VectorXd>(x.data(), gx.rows());
  }
  Eigen::MatrixXd hx(h_.spec().input_size(), 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = all[static_cast<std::size_t>(i)];
    const auto a = h_input(t.obs, t.absorbing);
    const auto b = h_input(t.next_obs, t.next_absorbing);
    hx.col(i) = Eigen::Map<const Eigen::VectorXd>(a.data(), hx.rows());
    hx.col(n + i) = Eigen::Map<const Eigen::VectorXd>(b.data(), hx.rows());
  }

  const auto g_acts = g_.forward_train(gx);
  const auto h_acts = h_.forward_train(hx);
  const Eigen::MatrixXd& gv = g_acts.values.back();
  const Eigen::MatrixXd& hv = h_acts.values.back();

  Eigen::MatrixXd dg(1, n), dh(1, 2 * n);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = all[static_cast<std::size_t>(i)];
    const double disc = t.done ? 0.0 : gamma_;
    const double f = gv(0, i) + disc * hv(0, n + i) - hv(0, i);
    const double y = i < static_cast<Eigen::Index>(expert.size()) ? 1.0 : 0.0;
    // log(1 + e^-|f|) form keeps the loss finite for large logits.
    loss += (std::max(f, 0.0) - f * y + std::log1p(std::exp(-std::abs(f)))) * inv_n;
    const double df = (1.0 / (1.0 + std::exp(-f)) - y) * inv_n;
    dg(0, i) = df;
    dh(0, i) = -df;
    dh(0, n + i) = disc * df;
  }
  return {loss, g_.backward(g_acts, dg), h_.backward(h_acts, dh)};
}

double Discriminator::train_step(std::span<const Transition> expert, std::span<const Transition> generated) {
  if (expert.empty() && generated.empty()) return 0.0;
  auto lg = loss_gradients(expert, generated);
  if (!std::isfinite(lg.loss)) throw NumericError("discriminator loss is not finite");
  g_opt_.step(g_, lg.g);
  h_opt_.step(h_, lg.h);
  return lg.loss;
}

double Discriminator::accuracy(std::span<const Transition> expert, std::span<const Transition> generated) const {
  std::size_t ok = 0;
  for (const auto& t : expert) ok += logit(t) > 0.0;
  for (const auto& t : generated) ok += logit(t) <= 0.0;
  const auto n = expert.size() + generated.size();
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

double imitation_reward(double d) {
  if (!(d < 1.0)) return 20.0;
  return std::clamp(-std::log1p(-d), -20.0, 20.0);
}

double imitation_reward(const Discriminator& disc, const Transition& t) {
  // -log(1 - sigmoid(f)) = softplus(f), evaluated without forming D.
  const double f = disc.logit(t);
  const double sp = std::max(f, 0.0) + std::log1p(std::exp(-std::abs(f)));
  return std::clamp(sp, -20.0, 20.0);
}

// ---- GAIL ----

nlohmann::json GailConfig::to_json() const {
  return {{"buffer_capacity", buffer_capacity},
          {"disc_updates_per_round", disc_updates_per_round},
          {"total_transition_budget", total_transition_budget},
          {"round_transitions", round_transitions},
          {"disc_batch_size", disc_batch_size},
          {"disc_learning_rate", disc_learning_rate},
          {"disc_hidden", disc_hidden},
          {"generator", generator.to_json()},
          {"absorbing_states", absorbing_states},
          {"center_rewards", center_rewards},
          {"bc_warm_start_epochs", bc_warm_start_epochs},
          {"select_every_rounds", select_every_rounds},
          {"select_alerts", select_alerts},
          {"seed", seed}};
}

GailConfig GailConfig::from_json(const nlohmann::json& j) {
  GailConfig c;
  c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
  c.disc_updates_per_round = j.value("disc_updates_per_round", c.disc_updates_per_round);
  c.total_transition_budget = j.value("total_transition_budget", c.total_transition_budget);
  c.round_transitions = j.value("round_transitions", c.round_transitions);
  c.disc_batch_size = j.value("disc_batch_size", c.disc_batch_size);
  c.disc_learning_rate = j.value("disc_learning_rate", c.disc_learning_rate);
  c.disc_hidden = j.value("disc_hidden", c.disc_hidden);
  if (j.contains("generator")) {
    auto g = j.at("generator");
    if (!g.contains("algorithm")) g["algorithm"] = "a2c";
    c.generator = AnalystConfig::from_json(g);
  }
  c.absorbing_states = j.value("absorbing_states", c.absorbing_states);
  c.center_rewards = j.value("center_rewards", c.center_rewards);
  c.bc_warm_start_epochs = j.value("bc_warm_start_epochs", c.bc_warm_start_epochs);
  c.select_every_rounds = j.value("select_every_rounds", c.select_every_rounds);
  c.select_alerts = j.value("select_alerts", c.select_alerts);
  c.seed = j.value("seed", c.seed);
  return c;
}

double action_agreement(const Network& policy, const std::vector<Trajectory>& traces) {
  std::size_t hits = 0, n = 0;
  for (const auto& tr : traces) {
    for (const auto& st : tr.steps) {
      const auto probs = policy.forward(st.observation.to_vector());
      hits += static_cast<int>(argmax(std::span<const double>(probs.data(), probs.size()))) == st.action.value;
      ++n;
    }
  }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

namespace {

struct MaskTargets {
  std::vector<const AlertRecord*> alerts;
  std::vector<std::vector<ContextMask>> masks;  // expert masks per alert
};

MaskTargets mask_targets(const std::vector<Trajectory>& traces, const std::vector<AlertRecord>& alerts, int k,
                         int max_alerts) {
  std::map<std::int64_t, std::vector<ContextMask>> by_alert;
  for (const auto& tr : traces) by_alert[tr.alert_id].push_back(tr.mask(k));
  std::map<std::int64_t, const AlertRecord*> lookup;
  for (const auto& a : alerts) lookup.emplace(a.alert_id, &a);
  MaskTargets out;
  for (auto& [id, masks] : by_alert) {
    if (max_alerts > 0 && static_cast<int>(out.alerts.size()) >= max_alerts) break;
    const auto it = lookup.find(id);
    if (it == lookup.end()) continue;
    out.alerts.push_back(it->second);
    out.masks.push_back(std::move(masks));
  }
  return out;
}

double mask_score(const Network& policy, const MaskTargets& targets, InvestigationEnv& env) {
  const int k = env.num_categories();
  double total = 0.0;
  std::size_t n = 0;
  const PolicyFn greedy = [&](const Observation& o) {
    const auto probs = policy.forward(o.to_vector());
    return ActionId{static_cast<int>(argmax(std::span<const double>(probs.data(), probs.size())))};
  };
  for (std::size_t i = 0; i < targets.alerts.size(); ++i) {
    const auto mine = run_episode(env, *targets.alerts[i], greedy).mask(k);
    for (const auto& m : targets.masks[i]) {
      total += 1.0 - static_cast<double>(std::popcount(mine.bits ^ m.bits)) / k;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

double mask_agreement(const Network& policy, const std::vector<Trajectory>& traces, InvestigationEnv& env,
                      const std::vector<AlertRecord>& alerts, int max_alerts) {
  return mask_score(policy, mask_targets(traces, alerts, env.num_categories(), max_alerts), env);
}

GailResult train_gail(const std::vector<Trajectory>& traces, const EnvFactory& env_factory,
                      const std::vector<AlertRecord>& alerts, const GailConfig& config, const GailObserver& observer) {
  if (traces.empty()) throw DataError("GAIL needs at least one expert trajectory");
  if (alerts.empty()) throw DataError("GAIL needs alerts for generator rollouts");
  if (config.buffer_capacity < 1 || config.round_transitions < 1) throw std::invalid_argument("invalid GAIL sizes");
  if (config.generator.algorithm != Algorithm::a2c) throw std::invalid_argument("GAIL generator must be a2c");

  InvestigationEnv env = env_factory();
  const bool use_absorbing = config.absorbing_states;
  const int horizon = use_absorbing ? env.config().max_steps(env.num_categories()) : 0;
  const auto expert = expert_transitions(traces, horizon);
  const double gamma = config.generator.gamma;
  Rng rng(config.seed);
  Discriminator disc(env.observation_size(), env.num_actions(), config.generator.gamma, rng, config.disc_hidden,
                     config.disc_learning_rate);
  A2CLearner learner(env.observation_size(), env.num_actions(), config.generator, rng, use_absorbing ? 1 : 0);
  const auto elapsed = [&](int steps) {
    return use_absorbing ? std::vector<double>{static_cast<double>(steps) / horizon} : std::vector<double>{};
  };
  if (config.bc_warm_start_epochs > 0) {
    BCConfig bc;
    bc.epochs = config.bc_warm_start_epochs;
    bc.hidden = config.generator.hidden;
    bc.seed = mix_seed(config.seed, 1);
    learner.actor() = behavior_clone(traces, bc).policy;
  }

  GailResult result;
  InvestigationEnv eval_env = env_factory();
  const auto targets = config.select_every_rounds > 0
                           ? mask_targets(traces, alerts, env.num_categories(), config.select_alerts)
                           : MaskTargets{};
  Network best_actor = learner.actor();
  double best_agreement = -1.0;
  std::vector<Transition> buffer;
  std::size_t buffer_next = 0;
  const auto cap = static_cast<std::size_t>(config.buffer_capacity);
  std::int64_t sampled = 0;
  int round = 0;
  double baseline = config.center_rewards ? std::log(2.0) : 0.0;  // D = 1/2
  std::vector<double> obs = env.reset(alerts[rng.below(alerts.size())]).to_vector();
  try {
    do {
      GailRound log;
      log.round = round;
      double gen_reward = 0.0;
      const auto push = [&](Transition t) {
        if (buffer.size() < cap) {
          buffer.push_back(std::move(t));
        } else {
          buffer[buffer_next] = std::move(t);
        }
        buffer_next = (buffer_next + 1) % cap;
      };
      const std::vector<double> zeros(obs.size(), 0.0);
      const Transition absorbing{zeros, env.num_categories(), zeros, false, true, true};
      const double absorbing_reward = use_absorbing ? imitation_reward(disc, absorbing) : 0.0;
      int episodes = 0;
      double lengths = 0.0;
      for (int i = 0; i < config.round_transitions; ++i) {
        const auto action = learner.sample(obs, rng);
        const auto t_before = elapsed(env.steps_taken());
        const auto step = env.step(action);
        Transition t{obs, step.action.value, step.observation.to_vector(), step.done};
        const bool ends_absorbing = step.done && use_absorbing;
        if (ends_absorbing) {
          t.done = false;
          t.next_obs = zeros;
          t.next_absorbing = true;
        }
        double r = imitation_reward(disc, t);
        gen_reward += r;
        r -= baseline;
        // The absorbing tail up to the horizon, folded into the terminal reward.
        const int pad = ends_absorbing ? horizon - env.steps_taken() : 0;
        double discount = 1.0;
        for (int j = 0; j < pad; ++j) {
          discount *= gamma;
          r += discount * (absorbing_reward - baseline);
        }
        learner.record(t.obs, action.value, r, step.done, step.observation.to_vector(), t_before,
                       elapsed(env.steps_taken()));
        if (step.done) {
          ++episodes;
          lengths += env.steps_taken();
        }
        obs = step.done ? env.reset(alerts[rng.below(alerts.size())]).to_vector() : step.observation.to_vector();
        push(std::move(t));
        for (int j = 0; j < pad; ++j) push(absorbing);
      }
      sampled += config.round_transitions;
      log.generator_reward = gen_reward / config.round_transitions;
      if (config.center_rewards) baseline = log.generator_reward;
      log.episode_length = episodes ? lengths / episodes : 0.0;
      log.absorbing_reward = absorbing_reward;

      const auto bs = static_cast<std::size_t>(std::max(1, config.disc_batch_size));
      std::vector<Transition> eb, gb;
      for (int u = 0; u < config.disc_updates_per_round; ++u) {
        eb.clear();
        gb.clear();
        for (std::size_t i = 0; i < bs; ++i) {
          eb.push_back(expert[rng.below(expert.size())]);
          gb.push_back(buffer[rng.below(buffer.size())]);
        }
        log.disc_loss = disc.train_step(eb, gb);
      }
      log.disc_accuracy = disc.accuracy(eb, gb);
      double er = 0.0;
      for (const auto& t : eb) er += imitation_reward(disc, t);
      log.expert_reward = eb.empty() ? 0.0 : er / static_cast<double>(eb.size());
      log.transitions = sampled;
      const bool last = sampled >= config.total_transition_budget;
      if (config.select_every_rounds > 0 && ((round + 1) % config.select_every_rounds == 0 || last)) {
        log.mask_agreement = mask_score(learner.actor(), targets, eval_env);
        // Ties go to the later actor.
        if (log.mask_agreement >= best_agreement) {
          best_agreement = log.mask_agreement;
          best_actor = learner.actor();
          result.selected_round = round;
        }
      }
      if (observer) observer(log, learner.actor(), disc);
      result.rounds.push_back(log);
      ++round;
    } while (sampled < config.total_transition_budget);
  } catch (const NumericError& e) {
    throw NumericError("GAIL diverged in round " + std::to_string(round) + ": " + e.what());
  }

  if (config.select_every_rounds > 0) {
    result.assistant.policy = best_actor;
  } else {
    result.assistant.policy = learner.actor();
    result.selected_round = round - 1;
  }
  result.assistant.provenance = Provenance::gail;
  result.assistant.budget_consumed = sampled;
  for (const auto& tr : traces) {
    auto& s = result.assistant.sources;
    if (std::find(s.begin(), s.end(), tr.source) == s.end()) s.push_back(tr.source);
  }
  std::sort(result.assistant.sources.begin(), result.assistant.sources.end());
  return result;
}

std::vector<Trajectory> merge_multi_source(const std::map<std::string, std::vector<Trajectory>>& traces_by_analyst,
                                           int per_source, std::uint64_t seed) {
  if (per_source < 0) throw std::invalid_argument("per_source must be non-negative");
  std::vector<Trajectory> out;
  std::uint64_t source_index = 0;
  for (const auto& [source, traces] : traces_by_analyst) {
    if (traces.size() < static_cast<std::size_t>(per_source)) {
      throw DataError("source '" + source + "' has " + std::to_string(traces.size()) + " trajectories, " +
                      std::to_string(per_source) + " requested");
    }
    std::vector<std::size_t> idx(traces.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(mix_seed(seed, source_index++));
    // Partial Fisher-Yates: the first per_source entries are a uniform sample.
    for (std::size_t i = 0; i < static_cast<std::size_t>(per_source); ++i) {
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    }
    idx.resize(static_cast<std::size_t>(per_source));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.push_back(traces[i]);
  }
  return out;
}

}  // namespace cbuddy
