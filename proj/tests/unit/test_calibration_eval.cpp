#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "rcs/calibration_eval.hpp"
#include "rcs/errors.hpp"
#include "rcs/random.hpp"
#include "rcs/synthetic_oracle.hpp"

using namespace rcs;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ScoreSet random_set(Rng& rng, std::size_t n, bool ties) {
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(2));
    double v = rng.normal() + 0.8 * y;
    if (ties) v = std::round(v * 3.0) / 3.0;
    s.scores.push_back(v);
    s.labels.push_back(y);
  }
  s.labels[0] = 0;
  s.labels[1] = 1;
  return s;
}

template <typename Fn>
void expect_code(ErrorCode code, Fn fn) {
  try {
    fn();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Classify, StrictInequality) {
  EXPECT_EQ(classify(0.3, 0.3), 0);
  EXPECT_EQ(classify(std::nextafter(0.3, 1.0), 0.3), 1);
  EXPECT_EQ(classify(-1e308, -kInf), 1);
  EXPECT_EQ(classify(1e308, kInf), 0);
}

TEST(Calibrate, SeparatedMidpoint) {
  const auto r = calibrate_threshold({{0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}});
  EXPECT_DOUBLE_EQ(r.theta, 0.5);
  EXPECT_EQ(r.objective, 1.0);
  EXPECT_EQ(r.candidates_evaluated, 5u);
  EXPECT_FALSE(r.weak);
}

TEST(Calibrate, InvertedScoresAreFlaggedWeak) {
  // The lone malicious sample scores lowest. Flagging everything gives
  // balanced accuracy 0.5 and F1 0.2/1.1, the best any threshold does.
  const auto r = calibrate_threshold({{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, -1.0}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 1}});
  EXPECT_EQ(r.theta, -kInf);
  EXPECT_NEAR(r.objective, 0.25 + 0.5 * (0.2 / 1.1), 1e-12);
  EXPECT_TRUE(r.weak);
}

TEST(Calibrate, ConstantScoresFallToSentinel) {
  const ScoreSet s{{0.4, 0.4, 0.4, 0.4}, {0, 1, 0, 0}};
  const auto r = calibrate_threshold(s);
  EXPECT_TRUE(std::isinf(r.theta));
  // all-positive: balacc 0.5, F1 2/5; all-negative: balacc 0.5, F1 0
  EXPECT_DOUBLE_EQ(r.objective, 0.5 * 0.5 + 0.5 * 0.4);
  EXPECT_LT(r.theta, 0.0);
}

TEST(Calibrate, ObjectiveMatchesReturnedThreshold) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto s = random_set(rng, 5 + rng.below(100), t % 2 == 0);
    const double w = rng.uniform();
    const auto r = calibrate_threshold(s, w, 1.0 - w);
    std::vector<int> preds;
    for (double v : s.scores) preds.push_back(classify(v, r.theta));
    const auto m = confusion_metrics(preds, s.labels);
    EXPECT_NEAR(r.objective, w * m.balanced_accuracy + (1.0 - w) * m.f1, 1e-12);
    EXPECT_DOUBLE_EQ(r.w_balacc + r.w_f1, 1.0);
  }
}

TEST(Calibrate, TiesGoToLargerTheta) {
  // theta in (0.2, 0.6) and theta in (0.6, 0.9) score the same; the larger wins
  const ScoreSet s{{0.2, 0.6, 0.9, 0.6}, {0, 1, 1, 0}};
  const auto r = calibrate_threshold(s, 1.0, 0.0);
  EXPECT_DOUBLE_EQ(r.theta, 0.75);
}

TEST(Calibrate, MonotoneTransformKeepsDecisions) {
  Rng rng(4);
  const auto s = random_set(rng, 80, false);
  ScoreSet t = s;
  for (auto& v : t.scores) v = std::exp(v) * 3.0 + 1.0;
  const auto a = calibrate_threshold(s), b = calibrate_threshold(t);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(classify(s.scores[i], a.theta), classify(t.scores[i], b.theta));
}

TEST(Calibrate, Errors) {
  expect_code(ErrorCode::DegenerateLabels, [] { calibrate_threshold({{0.1, 0.2}, {1, 1}}); });
  expect_code(ErrorCode::InvalidConfig, [] { calibrate_threshold({{0.1, 0.2}, {0, 1}}, 0.7, 0.7); });
  expect_code(ErrorCode::InvalidConfig, [] { calibrate_threshold({{0.1, 0.2}, {0, 1}}, -0.5, 1.5); });
  expect_code(ErrorCode::LengthMismatch, [] { calibrate_threshold({{0.1, 0.2}, {0}}); });
  expect_code(ErrorCode::InvalidArgument, [] { calibrate_threshold({{0.1, NAN}, {0, 1}}); });
  expect_code(ErrorCode::InvalidArgument, [] { calibrate_threshold({{0.1, 0.2}, {0, 2}}); });
}

TEST(Calibrate, JsonRoundTripKeepsSentinels) {
  auto r = calibrate_threshold({{0.4, 0.4}, {0, 1}});
  const auto back = CalibrationResult::from_json(r.to_json());
  EXPECT_EQ(back.theta, r.theta);
  EXPECT_EQ(back.objective, r.objective);
  EXPECT_EQ(back.candidates_evaluated, r.candidates_evaluated);
}

TEST(Confusion, HandCounts) {
  const auto perfect = confusion_metrics({0, 0, 1, 1}, {0, 0, 1, 1});
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.tpr, 1.0);
  EXPECT_EQ(perfect.fpr, 0.0);
  EXPECT_EQ(perfect.f1, 1.0);

  const auto all_pos = confusion_metrics({1, 1, 1, 1}, {0, 0, 1, 1});
  EXPECT_EQ(all_pos.accuracy, 0.5);
  EXPECT_EQ(all_pos.tpr, 1.0);
  EXPECT_EQ(all_pos.fpr, 1.0);
  EXPECT_DOUBLE_EQ(all_pos.f1, 2.0 / 3.0);

  const auto all_neg = confusion_metrics({0, 0}, {1, 1});
  EXPECT_EQ(all_neg.tpr, 0.0);
  EXPECT_EQ(all_neg.f1, 0.0);
  EXPECT_TRUE(all_neg.precision_undefined);
  EXPECT_TRUE(all_neg.fpr_undefined);
  expect_code(ErrorCode::LengthMismatch, [] { confusion_metrics({0, 1}, {0}); });
}

TEST(Confusion, RatesFollowCounts) {
  Rng rng(5);
  std::vector<int> p, y;
  for (int i = 0; i < 300; ++i) {
    p.push_back(static_cast<int>(rng.below(2)));
    y.push_back(static_cast<int>(rng.below(2)));
  }
  const auto r = confusion_metrics(p, y);
  EXPECT_NEAR(r.tpr, double(r.tp) / double(r.tp + r.fn), 1e-12);
  EXPECT_NEAR(r.fpr, double(r.fp) / double(r.fp + r.tn), 1e-12);
  EXPECT_NEAR(r.f1, 2.0 * r.tp / double(2 * r.tp + r.fp + r.fn), 1e-12);
  EXPECT_NEAR(r.accuracy, double(r.tp + r.tn) / 300.0, 1e-12);
}

TEST(Auroc, HandValues) {
  EXPECT_EQ(auroc({{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}}), 0.75);
  EXPECT_EQ(auroc({{0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}}), 1.0);
  EXPECT_EQ(auroc({{0.3, 0.3, 0.3}, {0, 1, 1}}), 0.5);
  expect_code(ErrorCode::DegenerateLabels, [] { auroc({{0.1, 0.2}, {0, 0}}); });
}

TEST(Auroc, EqualsPairwiseCountingExactly) {
  Rng rng(6);
  for (int t = 0; t < 40; ++t) {
    const auto s = random_set(rng, 2 + rng.below(499), t % 2 == 0);
    EXPECT_EQ(auroc(s), pairwise_auroc(s));
  }
}

TEST(Auroc, ComplementAndMonotoneInvariance) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const auto s = random_set(rng, 60, t % 2 == 0);
    ScoreSet flipped = s, warped = s;
    for (std::size_t i = 0; i < s.size(); ++i) {
      flipped.scores[i] = -s.scores[i];
      flipped.labels[i] = 1 - s.labels[i];
      warped.scores[i] = std::atan(s.scores[i]) * 7.0 - 2.0;
    }
    ScoreSet negated = s;
    for (auto& v : negated.scores) v = -v;
    EXPECT_NEAR(auroc(s) + auroc(negated), 1.0, 1e-12);
    EXPECT_EQ(auroc(flipped), auroc(s));
    EXPECT_EQ(auroc(warped), auroc(s));
    EXPECT_EQ(auprc(warped), auprc(s));
  }
}

TEST(Auprc, HandValues) {
  EXPECT_EQ(auprc({{0.9, 0.1}, {1, 0}}), 1.0);
  EXPECT_NEAR(auprc({{0.8, 0.6, 0.4}, {1, 0, 1}}), 0.8333, 1e-4);
  EXPECT_EQ(auprc({{0.2, 0.7, 0.1}, {1, 1, 1}}), 1.0);
  expect_code(ErrorCode::NoPositives, [] { auprc({{0.2, 0.7}, {0, 0}}); });
}

TEST(Auprc, TiedBlockCountsOnce) {
  // one block holding 1 positive and 1 negative: precision 1/2 at recall 1
  EXPECT_DOUBLE_EQ(auprc({{0.5, 0.5}, {1, 0}}), 0.5);
}

TEST(Evaluate, ReportCarriesBothGroups) {
  const auto r = evaluate({{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}}, 0.375);
  EXPECT_TRUE(r.has_ranking);
  EXPECT_EQ(r.auroc, 0.75);
  EXPECT_EQ(r.tp, 1u);
  EXPECT_EQ(r.fp, 1u);
  EXPECT_EQ(r.theta, 0.375);
  EXPECT_EQ(EvalReport::csv_header(), "detector,layer,acc,tpr,fpr,f1,balacc,auroc,auprc");
  EXPECT_EQ(r.csv_row("mcd", 16).rfind("mcd,16,", 0), 0u);
  EXPECT_NE(r.to_json("mcd", 16).find("\"auroc\""), std::string::npos);
}

TEST(Evaluate, SingleClassTestSkipsRanking) {
  const auto r = evaluate({{0.1, 0.9}, {0, 0}}, 0.5);
  EXPECT_FALSE(r.has_ranking);
  EXPECT_EQ(r.fp, 1u);
}
