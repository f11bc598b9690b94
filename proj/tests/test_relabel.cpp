#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "mvt/core/rng.hpp"
#include "mvt/relabel/relabel.hpp"

using namespace mvt;

namespace {

const ThresholdKind kAll[] = {ThresholdKind::constant, ThresholdKind::linear,
                              ThresholdKind::quadratic, ThresholdKind::sigmoid};
const ThresholdKind kDynamic[] = {ThresholdKind::linear, ThresholdKind::quadratic,
                                  ThresholdKind::sigmoid};

std::vector<double> random_probs(std::size_t k, Rng& rng) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> p(k);
  double s = 0;
  for (auto& v : p) s += (v = g(rng) + 1e-12);
  for (auto& v : p) v /= s;
  return p;
}

// The constant-threshold rule written out directly: switch to the most
// probable class iff its margin over the given label exceeds delta.
int reference_rule(const std::vector<double>& p, int given, double delta) {
  const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  return p[best] - p[given] > delta ? best : given;
}

RelabelPolicy policy_of(ThresholdKind k, double delta, ThresholdFn::Params params = {}) {
  RelabelPolicy pol;
  pol.fn = ThresholdFn(k, params);
  pol.delta = delta;
  pol.gate = 0.0;
  return pol;
}

}  // namespace

TEST(ThresholdFn, NonnegativeMonotoneAndZeroAtOrigin) {
  for (auto k : kAll) {
    const ThresholdFn f(k);
    EXPECT_NEAR(f(0.0), 0.0, 1e-15) << to_string(k);
    double prev = f(0.0);
    for (int i = 1; i <= 1000; ++i) {
      const double v = f(i / 1000.0);
      EXPECT_GE(v, 0.0);
      EXPECT_GE(v, prev - 1e-15) << to_string(k) << " at " << i;
      prev = v;
    }
  }
}

TEST(ThresholdFn, ClosedForms) {
  ThresholdFn::Params p;
  p.slope = 0.4;
  p.quadratic = 0.7;
  p.amplitude = 0.6;
  p.steepness = 8.0;
  p.midpoint = 0.3;
  EXPECT_DOUBLE_EQ(ThresholdFn(ThresholdKind::constant, p)(0.8), 0.0);
  EXPECT_NEAR(ThresholdFn(ThresholdKind::linear, p)(0.5), 0.2, 1e-15);
  EXPECT_NEAR(ThresholdFn(ThresholdKind::quadratic, p)(0.5), 0.175, 1e-15);
  // 0.6 * (s(8 * 0.2) - s(-8 * 0.3)) with s the logistic function
  EXPECT_NEAR(ThresholdFn(ThresholdKind::sigmoid, p)(0.5), 0.6 * (0.8320183851339245 - 0.0831726964939224), 1e-12);
}

TEST(ThresholdFn, NamesRoundTrip) {
  for (auto k : kAll) EXPECT_EQ(parse_threshold_kind(to_string(k)), k);
  EXPECT_THROW(parse_threshold_kind("cubic"), ConfigError);
}

TEST(ThresholdFn, RejectsNegativeCoefficients) {
  ThresholdFn::Params p;
  p.slope = -0.1;
  EXPECT_THROW(ThresholdFn(ThresholdKind::linear, p), ConfigError);
}

TEST(Decide, ZeroFunctionMatchesReferenceRule) {
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> kdist(2, 8);
  std::uniform_real_distribution<double> ddist(0.0, 0.6);
  ThresholdFn::Params zero;
  zero.slope = zero.quadratic = zero.amplitude = 0.0;
  std::size_t disagreements = 0, changed = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_probs(kdist(rng), rng);
    const int given = std::uniform_int_distribution<int>(0, static_cast<int>(p.size()) - 1)(rng);
    const double delta = ddist(rng);
    const int expected = reference_rule(p, given, delta);
    for (auto k : kAll) {
      const auto d = decide(p, given, policy_of(k, delta, zero));
      disagreements += d.new_label != expected;
      EXPECT_EQ(d.changed, d.new_label != given);
    }
    changed += expected != given;
  }
  EXPECT_EQ(disagreements, 0u);
  EXPECT_GT(changed, 1000u);  // the sample exercises both branches
}

TEST(Decide, DynamicChangesAreSubsetOfConstant) {
  Rng rng(12);
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_probs(5, rng);
    const int given = static_cast<int>(i % 5);
    const double delta = 0.05 * (i % 7);
    const bool constant = decide(p, given, policy_of(ThresholdKind::constant, delta)).changed;
    for (auto k : kDynamic) {
      const auto d = decide(p, given, policy_of(k, delta));
      if (d.changed) {
        EXPECT_TRUE(constant);
      }
      EXPECT_GE(d.threshold, delta);
    }
  }
}

TEST(Decide, TieKeepsLowestIndexAndNeverSwitchesToItself) {
  const std::vector<double> p{0.4, 0.4, 0.2};
  const auto d = decide(p, 2, policy_of(ThresholdKind::constant, 0.1));
  EXPECT_TRUE(d.changed);
  EXPECT_EQ(d.new_label, 0);
  const auto same = decide(p, 0, policy_of(ThresholdKind::constant, 0.0));
  EXPECT_FALSE(same.changed);
}

TEST(Decide, StrictInequalityAtThreshold) {
  const std::vector<double> p{0.75, 0.25};
  EXPECT_FALSE(decide(p, 1, policy_of(ThresholdKind::constant, 0.5)).changed);
  EXPECT_TRUE(decide(p, 1, policy_of(ThresholdKind::constant, 0.49)).changed);
}

TEST(Decide, InputValidation) {
  const auto pol = policy_of(ThresholdKind::constant, 0.2);
  EXPECT_THROW(decide(std::vector<double>{1.0}, 0, pol), ShapeError);
  EXPECT_THROW(decide(std::vector<double>{0.5, 0.5}, 2, pol), IndexError);
  EXPECT_THROW(decide(std::vector<double>{0.5, 0.6}, 0, pol), DomainError);
  EXPECT_THROW(decide(std::vector<double>{-0.5, 1.5}, 0, pol), DomainError);
}

TEST(RelabelPass, GateClosedIsNoop) {
  std::vector<int> labels{0, 1, 0};
  auto pol = policy_of(ThresholdKind::constant, 0.0);
  pol.gate = 0.9;
  const auto audit = relabel_pass(
      std::span<int>(labels), [](std::size_t) { return std::vector<double>{0.0, 1.0}; }, pol,
      0.5);
  EXPECT_FALSE(audit.ran);
  EXPECT_FALSE(audit.note.empty());
  EXPECT_EQ(labels, (std::vector<int>{0, 1, 0}));
}

TEST(RelabelPass, AuditCountsAgainstTruth) {
  // Samples 0 and 2 carry wrong labels. The model confidently predicts class
  // 1 everywhere, fixing sample 0 and breaking sample 3.
  std::vector<int> labels{0, 1, 2, 0};
  const std::vector<int> truth{1, 1, 0, 0};
  const auto pol = policy_of(ThresholdKind::constant, 0.2);
  const auto probs = [](std::size_t) { return std::vector<double>{0.05, 0.9, 0.05}; };
  const auto audit =
      relabel_pass(std::span<int>(labels), probs, pol, 1.0, std::span<const int>(truth));
  EXPECT_TRUE(audit.ran);
  EXPECT_EQ(labels, (std::vector<int>{1, 1, 1, 1}));
  EXPECT_EQ(audit.changed, 3u);
  EXPECT_EQ(*audit.changed_to_true, 1u);
  EXPECT_EQ(*audit.wrong_before, 2u);
  EXPECT_NEAR(*audit.precision, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(*audit.recall, 0.5, 1e-15);
  EXPECT_EQ(audit.decisions.size(), 4u);
}

TEST(RelabelPass, TruthNeverInfluencesDecisions) {
  Rng rng(13);
  std::vector<std::vector<double>> probs;
  std::vector<int> labels, truth;
  for (int i = 0; i < 500; ++i) {
    probs.push_back(random_probs(4, rng));
    labels.push_back(i % 4);
    truth.push_back((i * 7) % 4);
  }
  auto a = labels, b = labels;
  const auto pol = policy_of(ThresholdKind::sigmoid, 0.1);
  const auto get = [&](std::size_t i) { return probs[i]; };
  relabel_pass(std::span<int>(a), get, pol, 1.0);
  relabel_pass(std::span<int>(b), get, pol, 1.0, std::span<const int>(truth));
  EXPECT_EQ(a, b);
}

TEST(RelabelPass, NothingChangedLeavesPrecisionUndefined) {
  std::vector<int> labels{0, 1};
  const std::vector<int> truth{0, 1};
  const auto audit = relabel_pass(
      std::span<int>(labels), [](std::size_t i) {
        return i == 0 ? std::vector<double>{0.9, 0.1} : std::vector<double>{0.1, 0.9};
      },
      policy_of(ThresholdKind::constant, 0.2), 1.0, std::span<const int>(truth));
  EXPECT_EQ(audit.changed, 0u);
  EXPECT_FALSE(audit.precision.has_value());
  EXPECT_FALSE(audit.recall.has_value());  // nothing was wrong either
}
