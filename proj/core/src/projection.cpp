#include "rcs/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rcs/errors.hpp"

namespace rcs {
namespace {

using RowVec = Eigen::RowVectorXd;

void require_training(const ProjectionModel& model) {
  if (model.mode != Mode::Training) fail(ErrorCode::ModeError, "gradients require a training-mode model");
}

void require_input_dim(const ProjectionModel& model, Eigen::Index cols) {
  if (static_cast<std::size_t>(cols) != model.in_dim()) {
    fail(ErrorCode::DimensionMismatch, "projection expects dimension " + std::to_string(model.in_dim()) + ", got " +
                                           std::to_string(cols));
  }
}

Eigen::MatrixXd uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Eigen::MatrixXd m(rows, cols);
  // Fill row-major so the draw order does not depend on the storage order.
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return m;
}

struct HiddenCache {
  Eigen::MatrixXd input;   // layer input
  Eigen::MatrixXd xhat;    // normalized pre-activation
  RowVec inv_std;
  Eigen::MatrixXd y;       // post batch-norm, pre-ReLU
  Eigen::MatrixXd mask;    // dropout multiplier (empty when disabled)
};

struct ForwardCache {
  std::array<HiddenCache, 2> hidden;
  Eigen::MatrixXd last;  // input of the output layer
  Eigen::MatrixXd z;
  BatchStats stats;
};

ForwardCache forward_training(const ProjectionModel& model, const Eigen::MatrixXd& inputs, Rng* dropout_rng) {
  const double eps = model.config.bn_epsilon;
  const double p = model.config.dropout_rate;
  const auto batch = static_cast<double>(inputs.rows());
  ForwardCache cache;
  Eigen::MatrixXd h = inputs;
  for (int l = 0; l < 2; ++l) {
    auto& c = cache.hidden[l];
    const auto& bn = model.norm[l];
    c.input = h;
    const Eigen::MatrixXd pre = h * model.dense[l].weight.transpose();
    const RowVec mean = pre.colwise().sum() / batch;
    const Eigen::MatrixXd centered = pre.rowwise() - mean;
    const RowVec var = centered.array().square().colwise().sum() / batch;
    c.inv_std = (var.array() + eps).rsqrt();
    c.xhat = centered.array().rowwise() * c.inv_std.array();
    c.y = (c.xhat.array().rowwise() * bn.scale.transpose().array()).rowwise() + bn.shift.transpose().array();
    h = c.y.cwiseMax(0.0);
    if (dropout_rng != nullptr && p > 0.0) {
      c.mask.resize(h.rows(), h.cols());
      const double keep = 1.0 / (1.0 - p);
      for (Eigen::Index i = 0; i < h.rows(); ++i) {
        for (Eigen::Index j = 0; j < h.cols(); ++j) c.mask(i, j) = dropout_rng->uniform() < p ? 0.0 : keep;
      }
      h = h.cwiseProduct(c.mask);
    }
    cache.stats.mean[l] = mean.transpose();
    cache.stats.var[l] = var.transpose();
  }
  cache.last = h;
  cache.z = (h * model.dense[2].weight.transpose()).rowwise() + model.dense[2].bias.transpose();
  return cache;
}

}  // namespace

void validate(const ProjectionConfig& c) {
  auto bad = [](const std::string& why) { fail(ErrorCode::InvalidConfig, why); };
  if (c.in_dim == 0 || c.out_dim == 0 || c.hidden_dims[0] == 0 || c.hidden_dims[1] == 0) bad("dimensions must be positive");
  if (c.out_dim >= c.in_dim) bad("out_dim must be smaller than in_dim");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) bad("dropout_rate must lie in [0,1)");
  if (!(c.margin_dataset > 0.0) || !(c.margin_safety > 0.0)) bad("margins must be positive");
  if (c.alpha < 0.0 || c.beta < 0.0 || !(c.alpha + c.beta > 0.0)) bad("alpha, beta must be nonnegative with positive sum");
  if (!(c.learning_rate > 0.0)) bad("learning_rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0) bad("momentum must lie in [0,1)");
  if (c.batch_size < 2) bad("batch_size must be at least 2");
  if (!(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0)) bad("bn_momentum must lie in (0,1]");
  if (!(c.bn_epsilon > 0.0)) bad("bn_epsilon must be positive");
}

std::size_t ProjectionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& d : dense) n += static_cast<std::size_t>(d.weight.size() + d.bias.size());
  for (const auto& b : norm) n += static_cast<std::size_t>(b.scale.size() + b.shift.size());
  return n;
}

bool ProjectionModel::operator==(const ProjectionModel& other) const {
  if (!(config == other.config) || mode != other.mode) return false;
  for (int l = 0; l < 3; ++l) {
    if (dense[l].weight != other.dense[l].weight || dense[l].bias != other.dense[l].bias) return false;
  }
  for (int l = 0; l < 2; ++l) {
    const auto &a = norm[l], &b = other.norm[l];
    if (a.scale != b.scale || a.shift != b.shift || a.running_mean != b.running_mean ||
        a.running_var != b.running_var) {
      return false;
    }
  }
  return true;
}

ProjectionModel init_projection(const ProjectionConfig& config) {
  validate(config);
  ProjectionModel model;
  model.config = config;
  const std::array<std::size_t, 4> dims{config.in_dim, config.hidden_dims[0], config.hidden_dims[1], config.out_dim};
  const Rng root(config.seed, 0x1417);
  for (int l = 0; l < 3; ++l) {
    Rng rng = root.fork(static_cast<std::uint64_t>(l));
    const auto fan_in = static_cast<Eigen::Index>(dims[l]);
    const auto fan_out = static_cast<Eigen::Index>(dims[l + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    model.dense[l].weight = uniform_matrix(rng, fan_out, fan_in, bound);
    if (l == 2) model.dense[l].bias = uniform_matrix(rng, fan_out, 1, bound).col(0);
  }
  for (int l = 0; l < 2; ++l) {
    const auto width = static_cast<Eigen::Index>(dims[l + 1]);
    model.norm[l].scale = Eigen::VectorXd::Ones(width);
    model.norm[l].shift = Eigen::VectorXd::Zero(width);
    model.norm[l].running_mean = Eigen::VectorXd::Zero(width);
    model.norm[l].running_var = Eigen::VectorXd::Ones(width);
  }
  model.mode = Mode::Inference;
  return model;
}

void for_each_parameter(ProjectionModel& m, const std::function<void(double*, Eigen::Index)>& fn) {
  for (int l = 0; l < 2; ++l) {
    fn(m.dense[l].weight.data(), m.dense[l].weight.size());
    fn(m.norm[l].scale.data(), m.norm[l].scale.size());
    fn(m.norm[l].shift.data(), m.norm[l].shift.size());
  }
  fn(m.dense[2].weight.data(), m.dense[2].weight.size());
  fn(m.dense[2].bias.data(), m.dense[2].bias.size());
}

void for_each_parameter(ParameterGrads& g, const std::function<void(double*, Eigen::Index)>& fn) {
  for (int l = 0; l < 2; ++l) {
    fn(g.weight[l].data(), g.weight[l].size());
    fn(g.scale[l].data(), g.scale[l].size());
    fn(g.shift[l].data(), g.shift[l].size());
  }
  fn(g.weight[2].data(), g.weight[2].size());
  fn(g.out_bias.data(), g.out_bias.size());
}

LossParts contrastive_loss(const Eigen::MatrixXd& z, std::span<const BatchItem> items, double margin_dataset,
                           double margin_safety, double alpha, double beta, Eigen::MatrixXd* grad_z) {
  const Eigen::Index n = z.rows();
  if (static_cast<std::size_t>(n) != items.size()) fail(ErrorCode::LengthMismatch, "batch tags do not match rows");
  if (n < 2) fail(ErrorCode::EmptyBatch, "contrastive loss needs at least two samples");
  if (grad_z != nullptr) grad_z->setZero(n, z.cols());

  LossParts loss;
  Eigen::RowVectorXd diff(z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      diff = z.row(i) - z.row(j);
      const double dist = diff.norm();
      const bool same = items[i].dataset_id == items[j].dataset_id;
      double sign = 0.0;  // d(term)/d(dist)
      if (same) {
        loss.dataset += dist;
        sign = 1.0;
      } else if (dist < margin_dataset) {
        loss.dataset += margin_dataset - dist;
        sign = -1.0;
      }
      if (grad_z != nullptr && sign != 0.0 && dist > 0.0) {
        const double coeff = alpha * sign / dist;
        grad_z->row(i) += coeff * diff;
        grad_z->row(j) -= coeff * diff;
      }
    }
  }

  Eigen::RowVectorXd mu_b = Eigen::RowVectorXd::Zero(z.cols()), mu_m = Eigen::RowVectorXd::Zero(z.cols());
  Eigen::Index nb = 0, nm = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (items[i].label == Label::Benign) {
      mu_b += z.row(i);
      ++nb;
    } else {
      mu_m += z.row(i);
      ++nm;
    }
  }
  if (nb == 0 || nm == 0) {
    loss.single_class = true;
  } else {
    mu_b /= static_cast<double>(nb);
    mu_m /= static_cast<double>(nm);
    const Eigen::RowVectorXd delta = mu_b - mu_m;
    const double gap = delta.norm();
    if (gap < margin_safety) {
      loss.separation = margin_safety - gap;
      if (grad_z != nullptr && gap > 0.0) {
        const Eigen::RowVectorXd unit = delta / gap;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (items[i].label == Label::Benign) {
            grad_z->row(i) -= (beta / static_cast<double>(nb)) * unit;
          } else {
            grad_z->row(i) += (beta / static_cast<double>(nm)) * unit;
          }
        }
      }
    }
  }
  loss.total = alpha * loss.dataset + beta * loss.separation;
  return loss;
}

GradientResult loss_gradients(const ProjectionModel& model, const Eigen::MatrixXd& inputs,
                              std::span<const BatchItem> items, Rng* dropout_rng) {
  require_training(model);
  require_input_dim(model, inputs.cols());
  if (inputs.rows() < 2) fail(ErrorCode::EmptyBatch, "training batches need at least two samples");
  const auto& cfg = model.config;

  ForwardCache cache = forward_training(model, inputs, dropout_rng);
  GradientResult out;
  Eigen::MatrixXd dz;
  out.loss = contrastive_loss(cache.z, items, cfg.margin_dataset, cfg.margin_safety, cfg.alpha, cfg.beta, &dz);
  out.stats = cache.stats;

  auto& g = out.grads;
  g.weight[2] = dz.transpose() * cache.last;
  g.out_bias = dz.colwise().sum().transpose();
  Eigen::MatrixXd dh = dz * model.dense[2].weight;

  const auto batch = static_cast<double>(inputs.rows());
  for (int l = 1; l >= 0; --l) {
    const auto& c = cache.hidden[l];
    if (c.mask.size() > 0) dh = dh.cwiseProduct(c.mask);
    const Eigen::MatrixXd dy = (c.y.array() > 0.0).select(dh, 0.0);
    g.scale[l] = dy.cwiseProduct(c.xhat).colwise().sum().transpose();
    g.shift[l] = dy.colwise().sum().transpose();
    const Eigen::MatrixXd dxhat = dy.array().rowwise() * model.norm[l].scale.transpose().array();
    const RowVec sum_dxhat = dxhat.colwise().sum();
    const RowVec sum_dxhat_xhat = dxhat.cwiseProduct(c.xhat).colwise().sum();
    const Eigen::MatrixXd dpre =
        ((batch * dxhat.array()).rowwise() - sum_dxhat.array() - c.xhat.array().rowwise() * sum_dxhat_xhat.array())
            .rowwise() *
        (c.inv_std.array() / batch);
    g.weight[l] = dpre.transpose() * c.input;
    if (l > 0) dh = dpre * model.dense[l].weight;
  }
  return out;
}

LossParts training_loss(const ProjectionModel& model, const Eigen::MatrixXd& inputs, std::span<const BatchItem> items) {
  require_training(model);
  require_input_dim(model, inputs.cols());
  const auto cache = forward_training(model, inputs, nullptr);
  const auto& cfg = model.config;
  return contrastive_loss(cache.z, items, cfg.margin_dataset, cfg.margin_safety, cfg.alpha, cfg.beta);
}

Eigen::MatrixXd project_rows(const ProjectionModel& model, const Eigen::MatrixXd& inputs) {
  if (model.mode != Mode::Inference) fail(ErrorCode::ModeError, "projection requires an inference-mode model");
  require_input_dim(model, inputs.cols());
  const double eps = model.config.bn_epsilon;
  Eigen::MatrixXd h = inputs;
  for (int l = 0; l < 2; ++l) {
    const auto& bn = model.norm[l];
    const Eigen::RowVectorXd gain = (bn.scale.array() * (bn.running_var.array() + eps).rsqrt()).transpose();
    const Eigen::RowVectorXd offset = (bn.shift.array() - bn.running_mean.array() * gain.transpose().array()).transpose();
    Eigen::MatrixXd pre = h * model.dense[l].weight.transpose();
    h = ((pre.array().rowwise() * gain.array()).rowwise() + offset.array()).cwiseMax(0.0);
  }
  return (h * model.dense[2].weight.transpose()).rowwise() + model.dense[2].bias.transpose();
}

FeatureSet project(const ProjectionModel& model, const FeatureSet& set) {
  require_input_dim(model, static_cast<Eigen::Index>(set.dim));
  if (set.empty()) return set.empty_like(model.out_dim());
  return replace_vectors(set, project_rows(model, set.matrix()));
}

namespace {

std::vector<BatchItem> tags_of(const FeatureSet& set, const std::vector<std::size_t>& indices) {
  std::vector<BatchItem> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back({set.records[i].dataset_id, set.records[i].label});
  return items;
}

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& all, const std::vector<std::size_t>& indices) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(indices.size()), all.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = all.row(static_cast<Eigen::Index>(indices[r]));
  return out;
}

/// Label-stratified batches: each batch takes a proportional slice of the
/// benign and malicious index lists.
std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& benign,
                                                         const std::vector<std::size_t>& malicious,
                                                         std::size_t batch_size) {
  const std::size_t n = benign.size() + malicious.size();
  std::size_t count = std::max<std::size_t>(1, (n + batch_size - 1) / batch_size);
  while (count > 1 && n / count < 2) --count;
  std::vector<std::vector<std::size_t>> batches(count);
  for (std::size_t b = 0; b < count; ++b) {
    const auto take = [&](const std::vector<std::size_t>& src) {
      const std::size_t lo = src.size() * b / count, hi = src.size() * (b + 1) / count;
      batches[b].insert(batches[b].end(), src.begin() + static_cast<long>(lo), src.begin() + static_cast<long>(hi));
    };
    take(benign);
    take(malicious);
  }
  std::erase_if(batches, [](const auto& batch) { return batch.size() < 2; });
  return batches;
}

void split_by_label(const FeatureSet& set, std::vector<std::size_t>& benign, std::vector<std::size_t>& malicious) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    (set.records[i].label == Label::Benign ? benign : malicious).push_back(i);
  }
}

}  // namespace

LossParts evaluation_loss(const ProjectionModel& model, const FeatureSet& set) {
  std::vector<std::size_t> benign, malicious;
  split_by_label(set, benign, malicious);
  const Eigen::MatrixXd z = project_rows(model, set.matrix());
  const auto& cfg = model.config;
  LossParts mean;
  const auto batches = stratified_batches(benign, malicious, cfg.batch_size);
  for (const auto& batch : batches) {
    const auto items = tags_of(set, batch);
    const auto part = contrastive_loss(rows_of(z, batch), items, cfg.margin_dataset, cfg.margin_safety, cfg.alpha,
                                       cfg.beta);
    mean.dataset += part.dataset;
    mean.separation += part.separation;
    mean.single_class = mean.single_class || part.single_class;
  }
  if (!batches.empty()) {
    mean.dataset /= static_cast<double>(batches.size());
    mean.separation /= static_cast<double>(batches.size());
  }
  mean.total = cfg.alpha * mean.dataset + cfg.beta * mean.separation;
  return mean;
}

TrainingResult train_projection(const FeatureSet& train, const ProjectionConfig& config, const FeatureSet* validation) {
  validate(config);
  require_input_dim(init_projection(config), static_cast<Eigen::Index>(train.dim));
  if (train.count(Label::Benign) == 0 || train.count(Label::Malicious) == 0) {
    fail(ErrorCode::SingleClassData, "projection training needs benign and malicious samples");
  }
  if (validation != nullptr) require_input_dim(init_projection(config), static_cast<Eigen::Index>(validation->dim));

  TrainingResult result{init_projection(config), {}};
  result.trace.single_dataset = train.dataset_ids().size() < 2;
  if (config.epochs == 0) return result;

  ProjectionModel model = result.model;
  const FeatureSet& monitor = validation != nullptr && !validation->empty() ? *validation : train;
  const Eigen::MatrixXd x = train.matrix();
  std::vector<std::size_t> benign, malicious;
  split_by_label(train, benign, malicious);

  const Rng root(config.seed, 0x7a41);
  Rng dropout_rng = root.fork(1);

  // Optimizer state, one flat buffer per parameter tensor.
  std::vector<Eigen::VectorXd> first, second;
  for_each_parameter(model, [&](double*, Eigen::Index size) {
    first.emplace_back(Eigen::VectorXd::Zero(size));
    second.emplace_back(Eigen::VectorXd::Zero(size));
  });
  std::size_t step = 0;

  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(1000 + epoch);
    shuffle_rng.shuffle(benign);
    shuffle_rng.shuffle(malicious);
    const auto batches = stratified_batches(benign, malicious, config.batch_size);

    EpochRecord record;
    model.mode = Mode::Training;
    for (const auto& batch : batches) {
      const auto items = tags_of(train, batch);
      GradientResult gr = loss_gradients(model, rows_of(x, batch), items, &dropout_rng);
      record.dataset_loss += gr.loss.dataset;
      record.separation_loss += gr.loss.separation;
      if (gr.loss.single_class) ++result.trace.single_class_batches;

      const double nb = static_cast<double>(batch.size());
      for (int l = 0; l < 2; ++l) {
        auto& bn = model.norm[l];
        const double m = config.bn_momentum;
        bn.running_mean = (1.0 - m) * bn.running_mean + m * gr.stats.mean[l];
        bn.running_var = (1.0 - m) * bn.running_var + m * gr.stats.var[l] * (nb / (nb - 1.0));
      }

      ++step;
      std::vector<std::pair<double*, Eigen::Index>> grads;
      for_each_parameter(gr.grads, [&](double* data, Eigen::Index size) { grads.emplace_back(data, size); });
      std::size_t t = 0;
      for_each_parameter(model, [&](double* data, Eigen::Index size) {
        Eigen::Map<Eigen::VectorXd> p(data, size);
        const Eigen::Map<const Eigen::VectorXd> g(grads[t].first, size);
        if (config.optimizer == OptimizerKind::SgdMomentum) {
          first[t] = config.momentum * first[t] + g;
          p -= config.learning_rate * first[t];
        } else {
          constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
          first[t] = b1 * first[t] + (1.0 - b1) * g;
          second[t] = b2 * second[t] + (1.0 - b2) * g.cwiseAbs2();
          const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
          const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
          p.array() -= config.learning_rate * (first[t].array() / c1) / ((second[t].array() / c2).sqrt() + eps);
        }
        ++t;
      });
    }
    const auto count = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    record.dataset_loss /= count;
    record.separation_loss /= count;
    record.total_loss = config.alpha * record.dataset_loss + config.beta * record.separation_loss;

    model.mode = Mode::Inference;
    record.validation_loss = evaluation_loss(model, monitor).total;
    result.trace.epochs.push_back(record);
    result.trace.final_epoch = epoch;

    if (record.validation_loss < best - config.min_improvement) {
      best = record.validation_loss;
      result.model = model;
      result.trace.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.trace.early_stopped = true;
      break;
    }
  }
  result.model.mode = Mode::Inference;
  return result;
}

}  // namespace rcs
