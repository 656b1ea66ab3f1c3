#include "rcs/layer_probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rcs/errors.hpp"

namespace rcs {
namespace {

void require_same_dim(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) {
    fail(ErrorCode::DimensionMismatch,
         "class dimensions differ: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
}

void require_min_rows(const Eigen::MatrixXd& m, Eigen::Index n, const char* what) {
  if (m.rows() < n) {
    fail(ErrorCode::TooFewSamples, std::string(what) + " needs at least " + std::to_string(n) + " samples per class");
  }
}

double mean_pairwise_distance(const Eigen::MatrixXd& rows) {
  const Eigen::Index n = rows.rows();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) sum += (rows.row(i) - rows.row(j)).norm();
  }
  return 2.0 * sum / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

MarginResult svm_margin(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious, const SvmOptions& options) {
  require_same_dim(benign, malicious);
  if (benign.rows() == 0 || malicious.rows() == 0) fail(ErrorCode::TooFewSamples, "svm_margin needs both classes");
  if (!(options.C > 0.0)) fail(ErrorCode::InvalidArgument, "SVM C must be positive");

  const Eigen::Index n = benign.rows() + malicious.rows();
  const Eigen::Index d = benign.cols();
  Eigen::MatrixXd x(n, d);
  x << benign, malicious;
  Eigen::VectorXd y(n);
  y.head(benign.rows()).setConstant(-1.0);
  y.tail(malicious.rows()).setConstant(1.0);
  const double C = options.C;

  // Precomputed Gram matrix for desk-scale probes; column-on-demand beyond.
  constexpr Eigen::Index kGramLimit = 4000;
  Eigen::MatrixXd gram;
  if (n <= kGramLimit) gram = x * x.transpose();
  Eigen::VectorXd col_i(n), col_j(n);
  auto kernel_column = [&](Eigen::Index i, Eigen::VectorXd& out) {
    if (n <= kGramLimit) {
      out = gram.col(i);
    } else {
      out = x * x.row(i).transpose();
    }
  };
  Eigen::VectorXd diag(n);
  for (Eigen::Index i = 0; i < n; ++i) diag(i) = x.row(i).squaredNorm();

  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0);  // Q alpha - e

  auto in_up = [&](Eigen::Index t) { return (y(t) > 0 && alpha(t) < C) || (y(t) < 0 && alpha(t) > 0); };
  auto in_low = [&](Eigen::Index t) { return (y(t) < 0 && alpha(t) < C) || (y(t) > 0 && alpha(t) > 0); };
  auto dual_objective = [&] { return 0.5 * alpha.dot(grad) - 0.5 * alpha.sum(); };

  MarginResult result;
  const std::size_t max_iterations = options.max_epochs * static_cast<std::size_t>(n);
  constexpr double kTau = 1e-12;
  std::size_t iter = 0;
  bool converged = false;
  while (iter < max_iterations) {
    // Second-order working set selection.
    double gmax = -std::numeric_limits<double>::infinity();
    Eigen::Index i = -1;
    for (Eigen::Index t = 0; t < n; ++t) {
      if (in_up(t) && -y(t) * grad(t) >= gmax) {
        gmax = -y(t) * grad(t);
        i = t;
      }
    }
    double gmin = std::numeric_limits<double>::infinity();
    Eigen::Index j = -1;
    double best = std::numeric_limits<double>::infinity();
    if (i >= 0) kernel_column(i, col_i);
    for (Eigen::Index t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double v = -y(t) * grad(t);
      gmin = std::min(gmin, v);
      const double b = gmax - v;
      if (b > 0) {
        double a = diag(i) + diag(t) - 2.0 * col_i(t);
        if (a <= 0) a = kTau;
        if (-(b * b) / a <= best) {
          best = -(b * b) / a;
          j = t;
        }
      }
    }
    if (i < 0 || j < 0 || gmax - gmin < options.tolerance) {
      converged = true;
      break;
    }
    kernel_column(j, col_j);

    const double old_ai = alpha(i), old_aj = alpha(j);
    double quad = diag(i) + diag(j) - 2.0 * col_i(j);
    if (quad <= 0) quad = kTau;
    if (y(i) != y(j)) {
      const double delta = (-grad(i) - grad(j)) / quad;
      const double diff = alpha(i) - alpha(j);
      alpha(i) += delta;
      alpha(j) += delta;
      if (diff > 0) {
        if (alpha(j) < 0) { alpha(j) = 0; alpha(i) = diff; }
      } else {
        if (alpha(i) < 0) { alpha(i) = 0; alpha(j) = -diff; }
      }
      if (diff > 0) {
        if (alpha(i) > C) { alpha(i) = C; alpha(j) = C - diff; }
      } else {
        if (alpha(j) > C) { alpha(j) = C; alpha(i) = C + diff; }
      }
    } else {
      const double delta = (grad(i) - grad(j)) / quad;
      const double sum = alpha(i) + alpha(j);
      alpha(i) -= delta;
      alpha(j) += delta;
      if (sum > C) {
        if (alpha(i) > C) { alpha(i) = C; alpha(j) = sum - C; }
      } else {
        if (alpha(j) < 0) { alpha(j) = 0; alpha(i) = sum; }
      }
      if (sum > C) {
        if (alpha(j) > C) { alpha(j) = C; alpha(i) = sum - C; }
      } else {
        if (alpha(i) < 0) { alpha(i) = 0; alpha(j) = sum; }
      }
    }
    const double dai = alpha(i) - old_ai, daj = alpha(j) - old_aj;
    // grad_t += Q_ti dai + Q_tj daj, with Q_ts = y_t y_s K_ts
    grad.array() += y.array() * (col_i.array() * (y(i) * dai) + col_j.array() * (y(j) * daj));

    ++iter;
    if (iter % static_cast<std::size_t>(n) == 0) result.dual_checkpoints.push_back(dual_objective());
  }
  result.dual_checkpoints.push_back(dual_objective());

  // Offset from free support vectors; midpoint of the feasible interval otherwise.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  int n_free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yg = y(t) * grad(t);
    if (alpha(t) >= C) {
      if (y(t) < 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (alpha(t) <= 0) {
      if (y(t) > 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / n_free : 0.5 * (ub + lb);

  result.weight = x.transpose() * (alpha.array() * y.array()).matrix();
  result.bias = -rho;
  const double wnorm = result.weight.norm();
  result.margin = wnorm > 0 ? 2.0 / wnorm : std::numeric_limits<double>::infinity();
  const Eigen::VectorXd decision = (x * result.weight).array() + result.bias;
  const double hinge = (1.0 - y.array() * decision.array()).max(0.0).sum();
  result.objective = 0.5 * wnorm * wnorm + C * hinge;
  result.converged = converged;
  result.iterations = iter;
  return result;
}

double silhouette_score(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious) {
  require_same_dim(benign, malicious);
  require_min_rows(benign, 2, "silhouette");
  require_min_rows(malicious, 2, "silhouette");
  const Eigen::Index nb = benign.rows(), nm = malicious.rows();

  // Row sums of the within- and cross-class distance blocks.
  Eigen::VectorXd within_b = Eigen::VectorXd::Zero(nb), within_m = Eigen::VectorXd::Zero(nm);
  Eigen::VectorXd cross_b = Eigen::VectorXd::Zero(nb), cross_m = Eigen::VectorXd::Zero(nm);
  for (Eigen::Index i = 0; i < nb; ++i) {
    for (Eigen::Index j = i + 1; j < nb; ++j) {
      const double dist = (benign.row(i) - benign.row(j)).norm();
      within_b(i) += dist;
      within_b(j) += dist;
    }
    for (Eigen::Index j = 0; j < nm; ++j) {
      const double dist = (benign.row(i) - malicious.row(j)).norm();
      cross_b(i) += dist;
      cross_m(j) += dist;
    }
  }
  for (Eigen::Index i = 0; i < nm; ++i) {
    for (Eigen::Index j = i + 1; j < nm; ++j) {
      const double dist = (malicious.row(i) - malicious.row(j)).norm();
      within_m(i) += dist;
      within_m(j) += dist;
    }
  }

  auto s = [](double a, double b) {
    const double denom = std::max(a, b);
    return denom > 0 ? (b - a) / denom : 0.0;
  };
  double total = 0.0;
  for (Eigen::Index i = 0; i < nb; ++i) total += s(within_b(i) / (nb - 1), cross_b(i) / nm);
  for (Eigen::Index i = 0; i < nm; ++i) total += s(within_m(i) / (nm - 1), cross_m(i) / nb);
  return total / static_cast<double>(nb + nm);
}

RatioResult discriminative_ratio(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious) {
  require_same_dim(benign, malicious);
  require_min_rows(benign, 2, "discriminative ratio");
  require_min_rows(malicious, 2, "discriminative ratio");
  RatioResult r;
  r.inter = (benign.colwise().mean() - malicious.colwise().mean()).norm();
  r.intra_benign = mean_pairwise_distance(benign);
  r.intra_malicious = mean_pairwise_distance(malicious);
  const double denom = 0.5 * (r.intra_benign + r.intra_malicious);
  if (r.intra_benign < 1e-12 && r.intra_malicious < 1e-12) {
    r.degenerate_intra = true;
    r.ratio = r.inter > 0 ? std::numeric_limits<double>::infinity() : 0.0;
  } else {
    r.ratio = r.inter / denom;
  }
  return r;
}

double quantile_type7(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorCode::EmptySet, "quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

LayerScoreReport composite_layer_scores(const std::vector<LayerMetrics>& raw) {
  if (raw.size() < 2) fail(ErrorCode::TooFewLayers, "composite scoring needs at least two layers");
  std::vector<LayerMetrics> sorted = raw;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].layer == sorted[i - 1].layer) {
      fail(ErrorCode::InvalidArgument, "layer " + std::to_string(sorted[i].layer) + " listed twice");
    }
  }

  LayerScoreReport report;
  report.layers.resize(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) report.layers[i].raw = sorted[i];

  // Robust-normalizes one metric in place; returns true when the spread is flat.
  auto normalize = [&](auto get_raw, auto set_tilde, auto set_hat) {
    std::vector<double> finite;
    for (const auto& m : sorted) {
      const double v = get_raw(m);
      if (std::isnan(v)) fail(ErrorCode::NonFiniteValue, "layer metric is NaN");
      if (std::isfinite(v)) finite.push_back(v);
    }
    double median = 0.0, iqr = 0.0;
    if (!finite.empty()) {
      median = quantile_type7(finite, 0.5);
      iqr = quantile_type7(finite, 0.75) - quantile_type7(finite, 0.25);
    }
    const bool flat = !(iqr > 1e-15 * std::max(1.0, std::abs(median)));
    for (auto& layer : report.layers) {
      const double v = get_raw(layer.raw);
      double tilde = 0.0;
      if (!std::isfinite(v)) {
        tilde = v;  // +/-inf saturates the sigmoid
      } else if (!flat) {
        tilde = (v - median) / iqr;
      }
      set_tilde(layer, tilde);
      set_hat(layer, sigmoid(2.0 * tilde));
    }
    return flat;
  };

  report.gamma_flat = normalize([](const LayerMetrics& m) { return m.gamma; },
                                [](LayerScore& s, double v) { s.gamma_tilde = v; },
                                [](LayerScore& s, double v) { s.gamma_hat = v; });
  report.sil_flat = normalize([](const LayerMetrics& m) { return m.silhouette; },
                              [](LayerScore& s, double v) { s.sil_tilde = v; },
                              [](LayerScore& s, double v) { s.sil_hat = v; });
  report.ratio_flat = normalize([](const LayerMetrics& m) { return m.ratio; },
                                [](LayerScore& s, double v) { s.ratio_tilde = v; },
                                [](LayerScore& s, double v) { s.ratio_hat = v; });

  for (auto& layer : report.layers) layer.composite = (layer.gamma_hat + layer.sil_hat + layer.ratio_hat) / 3.0;

  std::vector<std::size_t> order(report.layers.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.layers[a].composite > report.layers[b].composite;
  });
  for (auto idx : order) report.ranking.push_back(report.layers[idx].raw.layer);
  return report;
}

std::string LayerScoreReport::to_json(const std::string& config_json) const {
  nlohmann::json doc;
  doc["layers"] = nlohmann::json::array();
  for (const auto& l : layers) {
    doc["layers"].push_back({{"layer", l.raw.layer},
                             {"gamma", l.raw.gamma},
                             {"silhouette", l.raw.silhouette},
                             {"ratio", l.raw.ratio},
                             {"gamma_hat", l.gamma_hat},
                             {"sil_hat", l.sil_hat},
                             {"ratio_hat", l.ratio_hat},
                             {"composite", l.composite}});
  }
  doc["ranking"] = ranking;
  doc["config"] = nlohmann::json::parse(config_json);
  doc["flat_metrics"] = {{"gamma", gamma_flat}, {"silhouette", sil_flat}, {"ratio", ratio_flat}};
  return doc.dump(2);
}

std::string LayerScoreReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,gamma,silhouette,ratio,gamma_hat,sil_hat,ratio_hat,composite\n";
  for (const auto& l : layers) {
    out << l.raw.layer << ',' << l.raw.gamma << ',' << l.raw.silhouette << ',' << l.raw.ratio << ',' << l.gamma_hat
        << ',' << l.sil_hat << ',' << l.ratio_hat << ',' << l.composite << '\n';
  }
  return out.str();
}

LayerMetrics probe_layer(int layer, const FeatureSet& features, const ProbeOptions& options) {
  const FeatureSet input = options.normalize ? l2_normalize(features) : features;
  const Eigen::MatrixXd benign = input.matrix(Label::Benign);
  const Eigen::MatrixXd malicious = input.matrix(Label::Malicious);
  LayerMetrics m;
  m.layer = layer;
  m.gamma = svm_margin(benign, malicious, options.svm).margin;
  m.silhouette = silhouette_score(benign, malicious);
  m.ratio = discriminative_ratio(benign, malicious).ratio;
  return m;
}

}  // namespace rcs
