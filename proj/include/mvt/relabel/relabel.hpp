#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvt/core/error.hpp"

namespace mvt {

enum class ThresholdKind { constant, linear, quadratic, sigmoid };

inline std::string_view to_string(ThresholdKind k) {
  switch (k) {
    case ThresholdKind::constant: return "constant";
    case ThresholdKind::linear: return "linear";
    case ThresholdKind::quadratic: return "quadratic";
    case ThresholdKind::sigmoid: return "sigmoid";
  }
  return "?";
}

inline ThresholdKind parse_threshold_kind(std::string_view s) {
  if (s == "constant") return ThresholdKind::constant;
  if (s == "linear") return ThresholdKind::linear;
  if (s == "quadratic") return ThresholdKind::quadratic;
  if (s == "sigmoid") return ThresholdKind::sigmoid;
  throw ConfigError("unknown threshold function '" + std::string(s) + "'");
}

/// Extra margin f(P_gt) added on top of delta. Every variant is
/// nonnegative, non-decreasing on [0, 1] and has f(0) = 0.
///
///   constant   f(p) = 0
///   linear     f(p) = a p
///   quadratic  f(p) = a p^2
///   sigmoid    f(p) = c (s(k (p - p0)) - s(-k p0)),  s the logistic function
class ThresholdFn {
 public:
  struct Params {
    double slope = 0.5;      // linear a
    double quadratic = 1.0;  // quadratic a
    double amplitude = 0.5;  // sigmoid c
    double steepness = 10.0; // sigmoid k
    double midpoint = 0.5;   // sigmoid p0
  };

  ThresholdFn() = default;
  explicit ThresholdFn(ThresholdKind kind) : ThresholdFn(kind, Params{}) {}
  ThresholdFn(ThresholdKind kind, Params params) : kind_(kind), params_(params) {
    const bool ok = [&] {
      switch (kind_) {
        case ThresholdKind::constant: return true;
        case ThresholdKind::linear: return params_.slope >= 0.0;
        case ThresholdKind::quadratic: return params_.quadratic >= 0.0;
        case ThresholdKind::sigmoid: return params_.amplitude >= 0.0 && params_.steepness >= 0.0;
      }
      return false;
    }();
    if (!ok || !std::isfinite(params_.slope) || !std::isfinite(params_.quadratic) ||
        !std::isfinite(params_.amplitude) || !std::isfinite(params_.steepness) ||
        !std::isfinite(params_.midpoint)) {
      throw ConfigError("threshold function parameters must be finite and nonnegative");
    }
  }

  static ThresholdFn constant() { return ThresholdFn(ThresholdKind::constant); }

  [[nodiscard]] ThresholdKind kind() const noexcept { return kind_; }
  [[nodiscard]] const Params& params() const noexcept { return params_; }

  [[nodiscard]] double operator()(double p) const {
    switch (kind_) {
      case ThresholdKind::constant: return 0.0;
      case ThresholdKind::linear: return params_.slope * p;
      case ThresholdKind::quadratic: return params_.quadratic * p * p;
      case ThresholdKind::sigmoid: {
        const auto s = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
        const double k = params_.steepness, p0 = params_.midpoint;
        return params_.amplitude * (s(k * (p - p0)) - s(-k * p0));
      }
    }
    return 0.0;
  }

 private:
  ThresholdKind kind_ = ThresholdKind::constant;
  Params params_{};
};

struct RelabelPolicy {
  ThresholdFn fn;
  double delta = 0.2;     // lower limit of the threshold
  double gate = 0.9;      // minimum training accuracy before passes run
  std::size_t start_epoch = 0;  // first epoch (0-based) eligible for a pass

  void validate() const {
    if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("relabel: delta must lie in [0, 1)");
    if (!(gate >= 0.0 && gate <= 1.0)) throw ConfigError("relabel: gate must lie in [0, 1]");
  }
};

struct RelabelDecision {
  std::size_t sample = 0;
  double p_max = 0.0;
  double p_given = 0.0;
  double threshold = 0.0;
  int old_label = 0;
  int new_label = 0;
  bool changed = false;
};

/// Relabel margin f(P_gt) + delta.
inline double threshold(const ThresholdFn& fn, double p_given, double delta) {
  if (!(p_given >= 0.0 && p_given <= 1.0)) {
    throw DomainError("threshold: P_gt must lie in [0, 1]");
  }
  return fn(p_given) + delta;
}

/// Keeps `given` unless P_max - P_gt exceeds the policy threshold, in which
/// case the argmax label is taken. Ties for the maximum resolve to the
/// lowest index.
inline RelabelDecision decide(std::span<const double> probs, int given,
                              const RelabelPolicy& policy, std::size_t sample = 0) {
  if (probs.size() < 2) {
    throw ShapeError("decide: need at least two class probabilities");
  }
  if (given < 0 || static_cast<std::size_t>(given) >= probs.size()) {
    throw IndexError("decide: given label out of range");
  }
  double total = 0.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0) || !std::isfinite(probs[i])) {
      throw DomainError("decide: probabilities must be finite and nonnegative");
    }
    total += probs[i];
    if (probs[i] > probs[arg]) arg = i;
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw DomainError("decide: probabilities sum to " + std::to_string(total));
  }
  RelabelDecision d;
  d.sample = sample;
  d.p_max = probs[arg];
  d.p_given = probs[static_cast<std::size_t>(given)];
  d.threshold = threshold(policy.fn, d.p_given, policy.delta);
  d.old_label = given;
  d.changed = static_cast<int>(arg) != given && (d.p_max - d.p_given > d.threshold);
  d.new_label = d.changed ? static_cast<int>(arg) : given;
  return d;
}

struct RelabelAudit {
  bool ran = false;
  std::string note;
  std::size_t changed = 0;
  std::optional<std::size_t> changed_to_true;  // with hidden truth only
  std::optional<std::size_t> wrong_before;     // labels disagreeing with truth before the pass
  std::optional<double> precision;             // changed_to_true / changed
  std::optional<double> recall;                // changed_to_true / wrong_before
  std::vector<RelabelDecision> decisions;
};

/// One relabel pass over a label table.
///
/// `probs_of(i)` returns the classifier's probability vector for sample i.
/// When `train_accuracy` is below the gate the pass is a no-op with a note.
/// `truth` is for auditing only and never influences a decision.
template <class ProbFn>
RelabelAudit relabel_pass(std::span<int> labels, ProbFn&& probs_of, const RelabelPolicy& policy,
                          double train_accuracy,
                          std::optional<std::span<const int>> truth = std::nullopt) {
  policy.validate();
  RelabelAudit audit;
  if (train_accuracy < policy.gate) {
    audit.note = "gate closed: training accuracy " + std::to_string(train_accuracy) +
                 " below " + std::to_string(policy.gate);
    return audit;
  }
  if (truth && truth->size() != labels.size()) {
    throw ShapeError("relabel_pass: truth table size mismatch");
  }
  audit.ran = true;
  std::size_t wrong = 0, fixed = 0;
  audit.decisions.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::vector<double> p = probs_of(i);
    auto d = decide(p, labels[i], policy, i);
    if (truth) {
      if (labels[i] != (*truth)[i]) ++wrong;
      if (d.changed && d.new_label == (*truth)[i]) ++fixed;
    }
    if (d.changed) {
      ++audit.changed;
      labels[i] = d.new_label;
    }
    audit.decisions.push_back(d);
  }
  if (truth) {
    audit.changed_to_true = fixed;
    audit.wrong_before = wrong;
    if (audit.changed > 0) audit.precision = static_cast<double>(fixed) / audit.changed;
    if (wrong > 0) audit.recall = static_cast<double>(fixed) / wrong;
  }
  return audit;
}

}  // namespace mvt
