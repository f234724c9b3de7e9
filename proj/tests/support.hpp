#pragma once

// Shared fixtures and independent oracles for the unit tests and the
// acceptance runner. Oracles here deliberately avoid the library's own
// algorithms: brute-force enumeration, naive loops, finite differences.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cbuddy/analyst.hpp"
#include "cbuddy/catalog.hpp"
#include "cbuddy/classifier_store.hpp"
#include "cbuddy/env.hpp"
#include "cbuddy/nn.hpp"

namespace cbtest {

using namespace cbuddy;

// ---- toy environment: category "c2" alone reveals the label ----

struct Toy {
  SyntheticDataset ds;
  std::vector<AlertRecord> train, test;
  std::shared_ptr<ClassifierStore> store;
  EnvConfig env;

  InvestigationEnv make_env() const { return InvestigationEnv(store, env); }
  EnvFactory factory() const {
    return [this] { return make_env(); };
  }
  int label_category() const { return 2; }
};

inline SyntheticConfig toy_config() {
  SyntheticConfig c;
  c.classes = {"a", "b", "c"};
  c.categories = {"c0", "c1", "c2", "c3"};
  c.signatures = {{"c2"}, {"c2"}, {"c2"}};
  c.n_alerts = 900;
  c.n_initial = 2;
  c.features_per_category = 2;
  c.signal_scale = 4.0;
  c.noise_scale = 1.0;
  c.initial_signal = 0.0;
  return c;
}

inline std::unique_ptr<Toy> make_toy(std::uint64_t seed = 1, int classifier_epochs = 30) {
  auto t = std::make_unique<Toy>();
  t->ds = generate_synthetic_alerts(toy_config(), seed);
  t->train.assign(t->ds.alerts.begin(), t->ds.alerts.begin() + 600);
  t->test.assign(t->ds.alerts.begin() + 600, t->ds.alerts.end());
  ClassifierConfig cc;
  cc.epochs = classifier_epochs;
  cc.seed = seed;
  const auto bal = balance_oversample(t->train, 3, 600, seed);
  t->store = std::make_shared<ClassifierStore>(t->ds.catalog, 3, bal, Standardizer::fit(t->train), cc);
  return t;
}

// A2C expert trained once per process on the toy environment, with its greedy
// traces on the first 200 training alerts.
struct ToyExpert {
  std::unique_ptr<Toy> toy;
  TrainedAnalyst expert;
  std::vector<AlertRecord> alerts;
  std::vector<Trajectory> traces;
};

inline AnalystConfig toy_analyst_config(std::uint64_t seed, Algorithm algorithm = Algorithm::a2c) {
  auto cfg = AnalystConfig::defaults(algorithm);
  cfg.id = to_string(algorithm) + "-" + std::to_string(seed);
  cfg.seed = seed;
  cfg.max_timesteps = 30000;
  cfg.reward_stop_threshold = 20.0;
  return cfg;
}

inline const ToyExpert& toy_expert() {
  static const ToyExpert e = [] {
    ToyExpert x;
    x.toy = make_toy(1);
    x.expert = train_analyst(x.toy->factory(), x.toy->train, toy_analyst_config(1));
    x.alerts.assign(x.toy->train.begin(), x.toy->train.begin() + 200);
    auto env = x.toy->make_env();
    x.traces = collect_traces({x.expert}, env, x.alerts);
    return x;
  }();
  return e;
}

// Temporary directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("cbuddy_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

// ---- networks ----

// Layer-by-layer loops, no Eigen products.
inline std::vector<double> naive_forward(const Network& net, const std::vector<double>& input) {
  std::vector<double> x = input;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l].weights;
    std::vector<double> y(static_cast<std::size_t>(w.rows()), 0.0);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      double s = layers[l].bias(i);
      for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * x[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = (l + 1 < layers.size()) ? std::max(0.0, s) : s;
    }
    x = std::move(y);
  }
  if (net.spec().head == OutputHead::softmax) {
    const double m = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double& v : x) z += (v = std::exp(v - m));
    for (double& v : x) v /= z;
  }
  return x;
}

// Visits every parameter of `nets` in a fixed order together with the
// matching entry of `grads`.
inline void for_each_param(std::vector<Network*> nets, std::vector<const Gradients*> grads,
                           const std::function<void(double& param, double analytic)>& fn) {
  for (std::size_t n = 0; n < nets.size(); ++n) {
    auto& layers = nets[n]->layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& w = layers[l].weights;
      const auto& gw = grads[n]->layers[l].weights;
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) fn(w(i, j), gw(i, j));
      }
      auto& b = layers[l].bias;
      const auto& gb = grads[n]->layers[l].bias;
      for (Eigen::Index i = 0; i < b.size(); ++i) fn(b(i), gb(i));
    }
  }
}

// Max relative error between analytic gradients and central differences
// (step h) of `loss` over every parameter. Entries where both are below
// `floor` in magnitude are compared absolutely against the floor.
inline double max_gradient_error(std::vector<Network*> nets, std::vector<const Gradients*> grads,
                                 const std::function<double()>& loss, double h = 1e-5, double floor = 1e-7) {
  double worst = 0.0;
  for_each_param(nets, grads, [&](double& p, double analytic) {
    const double saved = p;
    p = saved + h;
    const double up = loss();
    p = saved - h;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  });
  return worst;
}

// ---- statistics ----

// Two-sided exact McNemar p by enumerating all 2^n assignments of the n
// discordant pairs: outcomes at least as far from n/2 as b.
inline double brute_mcnemar_p(long b, long c) {
  const long n = b + c;
  const double obs = std::abs(static_cast<double>(b) - n / 2.0);
  long hits = 0;
  for (std::uint64_t s = 0; s < (1ULL << n); ++s) {
    const long k = std::popcount(s);
    if (std::abs(static_cast<double>(k) - n / 2.0) >= obs - 1e-12) ++hits;
  }
  return std::min(1.0, static_cast<double>(hits) / std::ldexp(1.0, static_cast<int>(n)));
}

// Mid-ranks of |d| by counting, 1-based.
inline std::vector<double> mid_ranks(const std::vector<double>& d) {
  std::vector<double> r(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : d) {
      if (std::abs(x) < std::abs(d[i])) ++less;
      if (std::abs(x) == std::abs(d[i])) ++equal;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

// Two-sided signed-rank p by enumerating all sign assignments of the
// non-zero deltas: W+ at least as far from its mean as observed.
inline double brute_wilcoxon_p(const std::vector<double>& deltas) {
  std::vector<double> d;
  for (double x : deltas) {
    if (x != 0.0) d.push_back(x);
  }
  const auto r = mid_ranks(d);
  const double total = std::accumulate(r.begin(), r.end(), 0.0);
  double obs = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) obs += r[i];
  }
  const double dev = std::abs(obs - total / 2.0);
  long hits = 0;
  const std::size_t n = d.size();
  for (std::uint64_t s = 0; s < (1ULL << n); ++s) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if ((s >> i) & 1ULL) w += r[i];
    }
    if (std::abs(w - total / 2.0) >= dev - 1e-9) ++hits;
  }
  return std::min(1.0, static_cast<double>(hits) / std::ldexp(1.0, static_cast<int>(n)));
}

// ---- Shapley ----

// Average marginal contribution over all k! orderings.
inline std::vector<double> brute_shapley(int k, const std::function<double(std::uint32_t)>& v) {
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(static_cast<std::size_t>(k), 0.0);
  long count = 0;
  do {
    std::uint32_t s = 0;
    for (int p : order) {
      const std::uint32_t t = s | (1U << p);
      phi[static_cast<std::size_t>(p)] += v(t) - v(s);
      s = t;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  for (double& x : phi) x /= static_cast<double>(count);
  return phi;
}

}  // namespace cbtest
