#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rcs {

/// Detector scores with aligned 0/1 labels (1 = malicious).
struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t size() const noexcept { return scores.size(); }
  std::size_t positives() const;
  std::size_t negatives() const { return size() - positives(); }
};

/// Throws LengthMismatch, EmptySet, InvalidArgument (labels outside {0,1} or non-finite scores).
void validate(const ScoreSet& set);

struct CalibrationResult {
  double theta = 0.0;
  double objective = 0.0;
  double w_balacc = 0.5;
  double w_f1 = 0.5;
  std::size_t candidates_evaluated = 0;
  double balanced_accuracy = 0.0;
  double f1 = 0.0;
  bool weak = false;  // objective below 0.5: the scores barely rank the classes

  std::string to_json() const;
  static CalibrationResult from_json(const std::string& text);
};

/// Picks theta among midpoints of consecutive distinct scores plus +-inf,
/// maximizing w_balacc * balanced accuracy + w_f1 * F1. Ties go to the
/// larger theta. Takes validation scores only.
CalibrationResult calibrate_threshold(const ScoreSet& validation, double w_balacc = 0.5, double w_f1 = 0.5);

/// 1 iff score > theta.
inline int classify(double score, double theta) { return score > theta ? 1 : 0; }

struct EvalReport {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0, tpr = 0.0, fpr = 0.0, f1 = 0.0, balanced_accuracy = 0.0;
  double precision = 0.0;
  bool has_ranking = false;
  double auroc = 0.0, auprc = 0.0;
  // Rates whose denominator was zero are stored as 0 and flagged here.
  bool tpr_undefined = false, fpr_undefined = false, precision_undefined = false, f1_undefined = false;
  double theta = 0.0;

  std::string to_json(const std::string& detector = "", int layer = -1) const;
  static std::string csv_header();
  std::string csv_row(const std::string& detector, int layer) const;
};

EvalReport confusion_metrics(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Mann-Whitney AUROC; tied positive/negative pairs count one half.
double auroc(const ScoreSet& set);

/// Step-wise average precision over descending thresholds, ties as one block.
double auprc(const ScoreSet& set);

/// Thresholded metrics at theta plus both ranking metrics.
EvalReport evaluate(const ScoreSet& test, double theta);

}  // namespace rcs
