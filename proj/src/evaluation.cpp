#include "cbuddy/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cbuddy {

namespace {

// Two-sided normal tail probability of |Z| >= z.
double normal_two_sided(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

// P(X <= k) for X ~ Binomial(n, 1/2), summed in log space.
double binomial_half_cdf(long k, long n) {
  double total = 0.0;
  for (long i = 0; i <= k; ++i) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0);
    total += std::exp(log_term);
  }
  return total;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int n_classes) : n_(n_classes) {
  if (n_classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(n_) * n_, 0);
}

ConfusionMatrix::ConfusionMatrix(std::span<const int> truths, std::span<const int> preds, int n_classes)
    : ConfusionMatrix(n_classes) {
  if (truths.size() != preds.size()) throw std::invalid_argument("truths and predictions differ in length");
  for (std::size_t i = 0; i < truths.size(); ++i) add(truths[i], preds[i]);
}

std::size_t ConfusionMatrix::index(int truth, int pred) const {
  if (truth < 0 || truth >= n_ || pred < 0 || pred >= n_) throw std::out_of_range("class id out of range");
  return static_cast<std::size_t>(truth) * n_ + pred;
}

void ConfusionMatrix::add(int truth, int pred) {
  ++counts_[index(truth, pred)];
  ++total_;
}

long ConfusionMatrix::fp(int c) const {
  long s = 0;
  for (int t = 0; t < n_; ++t) {
    if (t != c) s += count(t, c);
  }
  return s;
}

long ConfusionMatrix::fn(int c) const {
  long s = 0;
  for (int p = 0; p < n_; ++p) {
    if (p != c) s += count(c, p);
  }
  return s;
}

std::vector<long> ConfusionMatrix::truth_histogram() const {
  std::vector<long> h(static_cast<std::size_t>(n_), 0);
  for (int t = 0; t < n_; ++t) {
    for (int p = 0; p < n_; ++p) h[t] += count(t, p);
  }
  return h;
}

std::vector<long> ConfusionMatrix::prediction_histogram() const {
  std::vector<long> h(static_cast<std::size_t>(n_), 0);
  for (int t = 0; t < n_; ++t) {
    for (int p = 0; p < n_; ++p) h[p] += count(t, p);
  }
  return h;
}

nlohmann::json ConfusionMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 0; t < n_; ++t) {
    std::vector<long> row;
    for (int p = 0; p < n_; ++p) row.push_back(count(t, p));
    rows.push_back(row);
  }
  return rows;
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  std::vector<double> f1;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const double denom = 2.0 * cm.tp(c) + cm.fp(c) + cm.fn(c);
    f1.push_back(denom > 0 ? 2.0 * cm.tp(c) / denom : 0.0);
  }
  return f1;
}

double weighted_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("weighted F1 of an empty set");
  const auto f1 = per_class_f1(cm);
  double s = 0.0;
  for (int c = 0; c < cm.num_classes(); ++c) s += f1[c] * cm.support(c);
  return s / static_cast<double>(cm.total());
}

double weighted_f1(std::span<const int> preds, std::span<const int> truths) {
  if (preds.size() != truths.size()) throw std::invalid_argument("predictions and truths differ in length");
  if (preds.empty()) throw std::invalid_argument("weighted F1 of an empty set");
  int n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) n = std::max({n, preds[i] + 1, truths[i] + 1});
  return weighted_f1(ConfusionMatrix(truths, preds, n));
}

BinaryErrors binary_errors(const ConfusionMatrix& cm, std::span<const int> negative_classes) {
  auto negative = [&](int c) { return std::find(negative_classes.begin(), negative_classes.end(), c) != negative_classes.end(); };
  BinaryErrors e;
  for (int t = 0; t < cm.num_classes(); ++t) {
    for (int p = 0; p < cm.num_classes(); ++p) {
      const long n = cm.count(t, p);
      if (negative(t)) {
        e.negatives += n;
        if (!negative(p)) e.false_positives += n;
      } else {
        e.positives += n;
        if (negative(p)) e.false_negatives += n;
      }
    }
  }
  return e;
}

nlohmann::json TestResult::to_json() const {
  return {{"statistic", statistic}, {"p_value", p_value}, {"effect_size", effect_size}, {"method", method}, {"n", n}};
}

TestResult mcnemar(long b, long c) {
  if (b < 0 || c < 0) throw std::invalid_argument("discordant counts must be non-negative");
  if (b + c == 0) throw std::invalid_argument("McNemar test needs at least one discordant pair");
  TestResult r;
  r.n = b + c;
  const double n = static_cast<double>(b + c);
  r.statistic = std::pow(std::abs(static_cast<double>(b - c)) - 1.0, 2) / n;
  r.effect_size = std::abs(static_cast<double>(b) / n - 0.5);
  if (b + c < 25) {
    r.method = "mcnemar-exact";
    r.p_value = std::min(1.0, 2.0 * binomial_half_cdf(std::min(b, c), b + c));
  } else {
    r.method = "mcnemar-chi2-cc";
    r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));
  }
  return r;
}

TestResult wilcoxon_signed_rank(std::span<const double> deltas) {
  std::vector<double> d;
  for (double x : deltas) {
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite delta");
    if (x != 0.0) d.push_back(x);
  }
  if (d.empty()) throw std::invalid_argument("all deltas are zero");
  if (d.size() < 5) throw std::invalid_argument("signed-rank test needs at least 5 non-zero deltas");
  const long n = static_cast<long>(d.size());

  // Mid-ranks of |d|, kept doubled so they stay integers.
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<long> rank2(d.size());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const long mid2 = static_cast<long>(i + j + 2);  // 2 * mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = mid2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long w_plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  const double w_plus = w_plus2 / 2.0;
  const double w_minus = (total2 - w_plus2) / 2.0;
  const double mean_w = n * (n + 1) / 4.0;
  const double var_w = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_term / 48.0;

  TestResult r;
  r.n = n;
  r.statistic = std::min(w_plus, w_minus);
  const double z = var_w > 0 ? (w_plus - mean_w) / std::sqrt(var_w) : 0.0;
  r.effect_size = z / std::sqrt(static_cast<double>(n));
  if (n <= 25) {
    r.method = "wilcoxon-exact";
    // Distribution of doubled W+ over all 2^n sign assignments.
    std::vector<double> ways(static_cast<std::size_t>(total2 + 1), 0.0);
    ways[0] = 1.0;
    long reach = 0;
    for (long rk : rank2) {
      for (long s = reach; s >= 0; --s) {
        if (ways[s] != 0.0) ways[s + rk] += ways[s];
      }
      reach += rk;
    }
    // |2W - 2E[W]| compared in integers: 2E[W] = total2 / 2, so scale by 2 again.
    const long obs_dev = std::abs(2 * w_plus2 - total2);
    double tail = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (ways[s] != 0.0 && std::abs(2 * s - total2) >= obs_dev) tail += ways[s];
    }
    r.p_value = std::min(1.0, tail / std::ldexp(1.0, static_cast<int>(n)));
  } else {
    r.method = "wilcoxon-normal";
    const double dev = std::max(0.0, std::abs(w_plus - mean_w) - 0.5);
    r.p_value = var_w > 0 ? normal_two_sided(dev / std::sqrt(var_w)) : 1.0;
  }
  return r;
}

std::vector<double> bonferroni(std::span<const double> p_values, int m) {
  if (m < static_cast<int>(p_values.size())) throw std::invalid_argument("Bonferroni m is smaller than the number of tests");
  std::vector<double> out;
  for (double p : p_values) out.push_back(std::min(1.0, p * m));
  return out;
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

double cohen_d(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) throw std::invalid_argument("Cohen's d needs at least two values per sample");
  const double mx = mean(x), my = mean(y);
  double sx = 0.0, sy = 0.0;
  for (double v : x) sx += (v - mx) * (v - mx);
  for (double v : y) sy += (v - my) * (v - my);
  const double pooled = std::sqrt((sx + sy) / static_cast<double>(x.size() + y.size() - 2));
  if (pooled == 0.0) throw std::invalid_argument("zero pooled variance");
  return (mx - my) / pooled;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"weighted_f1", weighted_f1},
          {"per_class_f1", per_class_f1},
          {"false_positives", errors.false_positives},
          {"false_negatives", errors.false_negatives},
          {"fp_rate", errors.fp_rate()},
          {"fn_rate", errors.fn_rate()},
          {"mean_confidence", mean_confidence},
          {"median_confidence", median_confidence},
          {"n", n}};
}

MetricsReport metrics_report(std::span<const int> preds, std::span<const int> truths,
                             std::span<const double> confidences, int n_classes,
                             std::span<const int> negative_classes) {
  if (confidences.size() != preds.size()) throw std::invalid_argument("confidences and predictions differ in length");
  const ConfusionMatrix cm(truths, preds, n_classes);
  MetricsReport r;
  r.n = cm.total();
  r.weighted_f1 = weighted_f1(cm);
  r.per_class_f1 = per_class_f1(cm);
  r.errors = binary_errors(cm, negative_classes);
  r.mean_confidence = mean(confidences);
  r.median_confidence = median({confidences.begin(), confidences.end()});
  return r;
}

}  // namespace cbuddy
