#include "cbuddy/env.hpp"

#include <cmath>
#include <stdexcept>

namespace cbuddy {

void EnvConfig::validate(int num_categories) const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
  if (max_steps(num_categories) < num_categories + 1) {
    throw std::invalid_argument("max_steps_per_episode must be at least K + 1");
  }
  if (!(high_conf_threshold > 0.0 && high_conf_threshold <= 1.0)) {
    throw std::invalid_argument("high_conf_threshold must be in (0, 1]");
  }
}

nlohmann::json EnvConfig::to_json() const {
  return {{"correct_reward", correct_reward},
          {"incorrect_penalty", incorrect_penalty},
          {"phi", phi},
          {"psi", psi},
          {"omega", omega},
          {"lambda1", lambda1},
          {"lambda2", lambda2},
          {"eta1", eta1},
          {"eta2", eta2},
          {"high_conf_threshold", high_conf_threshold},
          {"max_steps_per_episode", max_steps_per_episode},
          {"gamma", gamma}};
}

EnvConfig EnvConfig::from_json(const nlohmann::json& j) {
  EnvConfig c;
  c.correct_reward = j.value("correct_reward", c.correct_reward);
  c.incorrect_penalty = j.value("incorrect_penalty", c.incorrect_penalty);
  c.phi = j.value("phi", c.phi);
  c.psi = j.value("psi", c.psi);
  c.omega = j.value("omega", c.omega);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.eta1 = j.value("eta1", c.eta1);
  c.eta2 = j.value("eta2", c.eta2);
  c.high_conf_threshold = j.value("high_conf_threshold", c.high_conf_threshold);
  c.max_steps_per_episode = j.value("max_steps_per_episode", c.max_steps_per_episode);
  c.gamma = j.value("gamma", c.gamma);
  return c;
}

std::vector<double> Observation::to_vector() const {
  std::vector<double> v;
  v.reserve(size());
  v.insert(v.end(), feature_slots.begin(), feature_slots.end());
  for (int c : request_counters) v.push_back(static_cast<double>(c));
  v.push_back(confidence);
  v.push_back(repeat_ratio);
  return v;
}

nlohmann::json Observation::to_json() const {
  return {{"features", feature_slots},
          {"counters", request_counters},
          {"confidence", confidence},
          {"repeat_ratio", repeat_ratio}};
}

Observation Observation::from_json(const nlohmann::json& j) {
  Observation o;
  o.feature_slots = j.at("features").get<std::vector<double>>();
  o.request_counters = j.at("counters").get<std::vector<int>>();
  o.confidence = j.at("confidence").get<double>();
  o.repeat_ratio = j.at("repeat_ratio").get<double>();
  return o;
}

double classify_reward(int predicted, int truth, double confidence, bool used_context, const EnvConfig& c) {
  double r;
  if (predicted == truth) {
    r = c.correct_reward + confidence;
    r += confidence >= c.high_conf_threshold ? std::abs(c.phi) : std::abs(c.psi);
  } else {
    r = c.incorrect_penalty - confidence;
  }
  if (!used_context) r -= std::abs(c.omega);
  return r;
}

double request_reward(bool novel, double confidence_gain, const EnvConfig& c) {
  double r = -std::abs(c.lambda1);
  if (novel) {
    r += std::abs(c.eta1);
  } else {
    r -= std::abs(c.lambda2);
  }
  return r + c.eta2 * std::max(0.0, confidence_gain);
}

InvestigationEnv::InvestigationEnv(std::shared_ptr<ClassifierStore> store, EnvConfig config)
    : store_(std::move(store)), config_(config) {
  if (!store_) throw std::invalid_argument("environment needs a classifier store");
  k_ = store_->catalog().num_categories();
  config_.validate(k_);
  max_steps_ = config_.max_steps(k_);
}

std::size_t InvestigationEnv::observation_size() const {
  return store_->standardizer().mean.size() + static_cast<std::size_t>(k_) + 2;
}

Observation InvestigationEnv::reset(const AlertRecord& alert) {
  const auto& std_ = store_->standardizer();
  if (alert.values.size() != std_.mean.size()) throw DataError("alert does not match the schema");
  alert_ = alert;
  mask_ = {};
  steps_ = requests_ = repeats_ = 0;
  done_ = false;
  obs_ = Observation{};
  obs_.feature_slots.assign(alert.values.size(), 0.0);
  for (auto f : store_->catalog().initial_indices) obs_.feature_slots[f] = std_.apply(f, alert.values[f]);
  obs_.request_counters.assign(static_cast<std::size_t>(k_), 0);
  obs_.confidence = 1.0 / store_->num_classes();
  obs_.repeat_ratio = 0.0;
  return obs_;
}

StepOutcome InvestigationEnv::step(ActionId action) {
  if (done_) throw std::logic_error("step() called on a finished episode");
  if (action.value < 0 || action.value > k_) throw std::invalid_argument("action out of range");

  StepOutcome out;
  if (!action.is_classify(k_) && steps_ + 1 >= max_steps_) {
    action = ActionId{k_};
    out.info.forced = true;
  }
  ++steps_;
  out.action = action;

  if (action.is_classify(k_)) {
    auto pred = store_->predict(mask_, alert_);
    out.reward = classify_reward(pred.predicted_class, alert_.label, pred.confidence, requests_ > 0, config_);
    obs_.confidence = pred.confidence;
    out.info.prediction = std::move(pred);
    out.done = done_ = true;
    out.observation = obs_;
    return out;
  }

  const int k = action.value;
  auto& counter = obs_.request_counters[static_cast<std::size_t>(k)];
  const bool novel = counter == 0;
  ++requests_;
  double gain = 0.0;
  if (novel) {
    mask_ = mask_.with(k);
    const auto& std_ = store_->standardizer();
    for (auto f : store_->catalog().categories[static_cast<std::size_t>(k)].feature_indices) {
      obs_.feature_slots[f] = std_.apply(f, alert_.values[f]);
    }
    const double conf = store_->predict(mask_, alert_).confidence;
    gain = conf - obs_.confidence;
    obs_.confidence = conf;
  } else {
    ++repeats_;
  }
  counter = std::min(counter + 1, 2);
  obs_.repeat_ratio = static_cast<double>(repeats_) / requests_;
  out.reward = request_reward(novel, gain, config_);
  out.info.novel = novel;
  out.info.repeat = !novel;
  out.observation = obs_;
  return out;
}

}  // namespace cbuddy
