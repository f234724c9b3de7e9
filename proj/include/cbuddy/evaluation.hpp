#pragma once

// Classification metrics and the paired tests used to compare strategies.

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cbuddy {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_classes);
  ConfusionMatrix(std::span<const int> truths, std::span<const int> preds, int n_classes);

  void add(int truth, int pred);
  long count(int truth, int pred) const { return counts_[index(truth, pred)]; }
  int num_classes() const { return n_; }
  long total() const { return total_; }

  long tp(int c) const { return count(c, c); }
  long fp(int c) const;  // predicted c, truth differs
  long fn(int c) const;  // truth c, predicted otherwise
  long tn(int c) const { return total_ - tp(c) - fp(c) - fn(c); }
  long support(int c) const { return tp(c) + fn(c); }

  std::vector<long> truth_histogram() const;
  std::vector<long> prediction_histogram() const;
  bool operator==(const ConfusionMatrix&) const = default;

  nlohmann::json to_json() const;

 private:
  std::size_t index(int truth, int pred) const;
  int n_;
  std::vector<long> counts_;
  long total_ = 0;
};

// F1 per class; 0 when the class has neither predictions nor support.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);

// Support-weighted mean of per-class F1 over classes present in `truths`.
double weighted_f1(std::span<const int> preds, std::span<const int> truths);
double weighted_f1(const ConfusionMatrix& cm);

// Alert-level error counts where every class outside `negative_classes` is an
// attack: FP = negative truth predicted as an attack, FN = attack predicted
// as a negative class.
struct BinaryErrors {
  long false_positives = 0;
  long false_negatives = 0;
  long negatives = 0;
  long positives = 0;

  double fp_rate() const { return negatives ? static_cast<double>(false_positives) / negatives : 0.0; }
  double fn_rate() const { return positives ? static_cast<double>(false_negatives) / positives : 0.0; }
};

BinaryErrors binary_errors(const ConfusionMatrix& cm, std::span<const int> negative_classes);

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double effect_size = 0.0;
  std::string method;
  long n = 0;

  nlohmann::json to_json() const;
};

// Paired test on discordant counts. Exact two-sided binomial when b + c < 25,
// otherwise continuity-corrected chi-square. The statistic is always the
// corrected chi-square; effect size is Cohen's g.
TestResult mcnemar(long b, long c);

// Two-sided signed-rank test. Zero deltas are dropped and ties get mid-ranks.
// Exact null distribution for n <= 25, else normal approximation with tie
// correction. Statistic is min(W+, W-); effect size is r = Z / sqrt(n).
TestResult wilcoxon_signed_rank(std::span<const double> deltas);

std::vector<double> bonferroni(std::span<const double> p_values, int m);

// Pooled-standard-deviation effect size of x relative to y.
double cohen_d(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> v);
double median(std::vector<double> v);

struct MetricsReport {
  double weighted_f1 = 0.0;
  std::vector<double> per_class_f1;
  BinaryErrors errors;
  double mean_confidence = 0.0;
  double median_confidence = 0.0;
  long n = 0;

  nlohmann::json to_json() const;
};

MetricsReport metrics_report(std::span<const int> preds, std::span<const int> truths,
                             std::span<const double> confidences, int n_classes,
                             std::span<const int> negative_classes);

}  // namespace cbuddy
