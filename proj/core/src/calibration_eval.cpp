#include "rcs/calibration_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rcs/errors.hpp"

namespace rcs {
namespace {

using nlohmann::json;

struct Counts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

double ratio_or_zero(double num, double den) { return den > 0.0 ? num / den : 0.0; }

double balanced_accuracy_of(const Counts& c) {
  const double tpr = ratio_or_zero(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
  const double tnr = ratio_or_zero(static_cast<double>(c.tn), static_cast<double>(c.tn + c.fp));
  return 0.5 * (tpr + tnr);
}

double f1_of(const Counts& c) {
  return ratio_or_zero(2.0 * static_cast<double>(c.tp), static_cast<double>(2 * c.tp + c.fp + c.fn));
}

void require_both_classes(const ScoreSet& set) {
  validate(set);
  if (set.positives() == 0 || set.negatives() == 0) {
    fail(ErrorCode::DegenerateLabels, "both classes must be present");
  }
}

std::vector<std::size_t> order_by_score(const ScoreSet& set, bool descending) {
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? set.scores[a] > set.scores[b] : set.scores[a] < set.scores[b];
  });
  return idx;
}

}  // namespace

std::size_t ScoreSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

void validate(const ScoreSet& set) {
  if (set.scores.size() != set.labels.size()) {
    fail(ErrorCode::LengthMismatch, std::to_string(set.scores.size()) + " scores but " +
                                        std::to_string(set.labels.size()) + " labels");
  }
  if (set.scores.empty()) fail(ErrorCode::EmptySet, "score set is empty");
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] != 0 && set.labels[i] != 1) fail(ErrorCode::InvalidArgument, "labels must be 0 or 1");
    if (!std::isfinite(set.scores[i])) fail(ErrorCode::InvalidArgument, "score " + std::to_string(i) + " is not finite");
  }
}

CalibrationResult calibrate_threshold(const ScoreSet& val, double w_balacc, double w_f1) {
  if (!(w_balacc >= 0.0 && w_f1 >= 0.0) || std::abs(w_balacc + w_f1 - 1.0) > 1e-12) {
    fail(ErrorCode::InvalidConfig, "calibration weights must be nonnegative and sum to 1");
  }
  require_both_classes(val);
  const auto idx = order_by_score(val, false);
  const double inf = std::numeric_limits<double>::infinity();

  // Start at theta = -inf (everything flagged) and move each distinct score
  // block to the negative side in ascending order.
  Counts c;
  c.tp = val.positives();
  c.fp = val.negatives();
  CalibrationResult best;
  best.w_balacc = w_balacc;
  best.w_f1 = w_f1;
  auto consider = [&](double theta) {
    const double ba = balanced_accuracy_of(c), f1 = f1_of(c);
    const double objective = w_balacc * ba + w_f1 * f1;
    ++best.candidates_evaluated;
    if (best.candidates_evaluated == 1 || objective >= best.objective) {
      best.theta = theta;
      best.objective = objective;
      best.balanced_accuracy = ba;
      best.f1 = f1;
    }
  };
  consider(-inf);
  std::size_t i = 0;
  while (i < idx.size()) {
    const double value = val.scores[idx[i]];
    while (i < idx.size() && val.scores[idx[i]] == value) {
      if (val.labels[idx[i]] == 1) {
        --c.tp;
        ++c.fn;
      } else {
        --c.fp;
        ++c.tn;
      }
      ++i;
    }
    if (i == idx.size()) {
      consider(inf);
    } else {
      const double next = val.scores[idx[i]];
      double mid = 0.5 * value + 0.5 * next;
      if (!(mid >= value && mid < next)) mid = value;  // adjacent doubles
      consider(mid);
    }
  }
  best.weak = best.objective < 0.5;
  return best;
}

std::string CalibrationResult::to_json() const {
  json j = {{"theta", std::isfinite(theta) ? json(theta) : json(theta > 0 ? "inf" : "-inf")},
            {"objective", objective},
            {"w_balacc", w_balacc},
            {"w_f1", w_f1},
            {"candidates_evaluated", candidates_evaluated},
            {"balanced_accuracy", balanced_accuracy},
            {"f1", f1},
            {"weak", weak}};
  return j.dump(1);
}

CalibrationResult CalibrationResult::from_json(const std::string& text) {
  CalibrationResult r;
  try {
    const json j = json::parse(text);
    const auto& t = j.at("theta");
    if (t.is_string()) {
      const auto s = t.get<std::string>();
      if (s != "inf" && s != "-inf") fail(ErrorCode::MalformedRecord, "theta must be a number or +-inf");
      r.theta = s == "inf" ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    } else {
      r.theta = t.get<double>();
    }
    r.objective = j.at("objective").get<double>();
    r.w_balacc = j.at("w_balacc").get<double>();
    r.w_f1 = j.at("w_f1").get<double>();
    r.candidates_evaluated = j.at("candidates_evaluated").get<std::size_t>();
    r.balanced_accuracy = j.value("balanced_accuracy", 0.0);
    r.f1 = j.value("f1", 0.0);
    r.weak = j.value("weak", false);
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord, std::string("calibration: ") + e.what());
  }
  return r;
}

EvalReport confusion_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) fail(ErrorCode::LengthMismatch, "predictions and labels differ in length");
  if (preds.empty()) fail(ErrorCode::EmptySet, "no predictions");
  EvalReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (labels[i] != 0 && labels[i] != 1)) {
      fail(ErrorCode::InvalidArgument, "predictions and labels must be 0 or 1");
    }
    if (labels[i] == 1) {
      preds[i] == 1 ? ++r.tp : ++r.fn;
    } else {
      preds[i] == 1 ? ++r.fp : ++r.tn;
    }
  }
  const auto d = [](std::size_t v) { return static_cast<double>(v); };
  r.accuracy = d(r.tp + r.tn) / d(preds.size());
  r.tpr_undefined = r.tp + r.fn == 0;
  r.fpr_undefined = r.fp + r.tn == 0;
  r.precision_undefined = r.tp + r.fp == 0;
  r.f1_undefined = 2 * r.tp + r.fp + r.fn == 0;
  r.tpr = ratio_or_zero(d(r.tp), d(r.tp + r.fn));
  r.fpr = ratio_or_zero(d(r.fp), d(r.fp + r.tn));
  r.precision = ratio_or_zero(d(r.tp), d(r.tp + r.fp));
  r.f1 = ratio_or_zero(2.0 * d(r.tp), d(2 * r.tp + r.fp + r.fn));
  const double tnr = ratio_or_zero(d(r.tn), d(r.tn + r.fp));
  r.balanced_accuracy = 0.5 * (r.tpr + tnr);
  return r;
}

double auroc(const ScoreSet& set) {
  require_both_classes(set);
  const auto idx = order_by_score(set, false);
  // Doubled credit: 2 per correctly ordered pair, 1 per tie, kept integral.
  std::uint64_t credit2 = 0, negatives_below = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < idx.size() && set.scores[idx[j]] == set.scores[idx[i]]) {
      set.labels[idx[j]] == 1 ? ++pos : ++neg;
      ++j;
    }
    credit2 += pos * (2 * negatives_below + neg);
    negatives_below += neg;
    i = j;
  }
  const double pairs = static_cast<double>(set.positives()) * static_cast<double>(set.negatives());
  return (static_cast<double>(credit2) / 2.0) / pairs;
}

double auprc(const ScoreSet& set) {
  validate(set);
  const std::size_t total_pos = set.positives();
  if (total_pos == 0) fail(ErrorCode::NoPositives, "average precision needs at least one positive");
  const auto idx = order_by_score(set, true);
  std::size_t tp = 0, seen = 0, i = 0;
  double prev_recall = 0.0, area = 0.0;
  while (i < idx.size()) {
    const double value = set.scores[idx[i]];
    while (i < idx.size() && set.scores[idx[i]] == value) {
      tp += set.labels[idx[i]] == 1 ? 1 : 0;
      ++seen;
      ++i;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    area += (recall - prev_recall) * (static_cast<double>(tp) / static_cast<double>(seen));
    prev_recall = recall;
  }
  return area;
}

EvalReport evaluate(const ScoreSet& test, double theta) {
  validate(test);
  std::vector<int> preds(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) preds[i] = classify(test.scores[i], theta);
  EvalReport r = confusion_metrics(preds, test.labels);
  r.theta = theta;
  if (test.positives() > 0 && test.negatives() > 0) {
    r.has_ranking = true;
    r.auroc = auroc(test);
    r.auprc = auprc(test);
  }
  return r;
}

std::string EvalReport::to_json(const std::string& detector, int layer) const {
  json j = {{"tp", tp}, {"fp", fp}, {"tn", tn}, {"fn", fn},
            {"accuracy", accuracy}, {"tpr", tpr}, {"fpr", fpr}, {"precision", precision}, {"f1", f1},
            {"balanced_accuracy", balanced_accuracy},
            {"theta", std::isfinite(theta) ? json(theta) : json(theta > 0 ? "inf" : "-inf")},
            {"zero_division", {{"tpr", tpr_undefined}, {"fpr", fpr_undefined},
                               {"precision", precision_undefined}, {"f1", f1_undefined}}}};
  if (has_ranking) {
    j["auroc"] = auroc;
    j["auprc"] = auprc;
  }
  if (!detector.empty()) j["detector"] = detector;
  if (layer >= 0) j["layer"] = layer;
  return j.dump(1);
}

std::string EvalReport::csv_header() { return "detector,layer,acc,tpr,fpr,f1,balacc,auroc,auprc"; }

std::string EvalReport::csv_row(const std::string& detector, int layer) const {
  std::ostringstream out;
  out.precision(17);
  out << detector << ',' << (layer >= 0 ? std::to_string(layer) : std::string()) << ',' << accuracy << ',' << tpr
      << ',' << fpr << ',' << f1 << ',' << balanced_accuracy << ',';
  if (has_ranking) out << auroc << ',' << auprc;
  else out << ',';
  return out.str();
}

}  // namespace rcs
