#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rcs/feature_store.hpp"
#include "rcs/random.hpp"

namespace rcs {

enum class OptimizerKind { SgdMomentum, Adam };

struct ProjectionConfig {
  std::size_t in_dim = 4096;
  std::array<std::size_t, 2> hidden_dims{1024, 512};
  std::size_t out_dim = 256;
  double dropout_rate = 0.3;
  double margin_dataset = 1.0;  // m_d
  double margin_safety = 5.0;   // m_s
  double alpha = 1.0;
  double beta = 5.0;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::size_t patience = 10;
  double min_improvement = 1e-5;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 0;

  bool operator==(const ProjectionConfig&) const = default;
};

/// Throws InvalidConfig on the first broken constraint.
void validate(const ProjectionConfig& config);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // empty when the layer feeds a batch norm
};

struct BatchNorm {
  Eigen::VectorXd scale, shift;
  Eigen::VectorXd running_mean, running_var;
};

enum class Mode { Training, Inference };

/// Linear -> BN -> ReLU -> Dropout, twice, then a linear output layer.
/// Batch normalization is applied to the pre-activations.
struct ProjectionModel {
  ProjectionConfig config;
  std::array<DenseLayer, 3> dense;
  std::array<BatchNorm, 2> norm;
  Mode mode = Mode::Inference;

  std::size_t in_dim() const { return static_cast<std::size_t>(dense[0].weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(dense[2].weight.rows()); }
  std::size_t parameter_count() const;

  bool operator==(const ProjectionModel& other) const;
};

ProjectionModel init_projection(const ProjectionConfig& config);

/// Same layout as the trainable parameters of ProjectionModel.
struct ParameterGrads {
  std::array<Eigen::MatrixXd, 3> weight;
  Eigen::VectorXd out_bias;
  std::array<Eigen::VectorXd, 2> scale, shift;
};

/// Visits every trainable tensor as (data, size) in a fixed order.
void for_each_parameter(ProjectionModel& model, const std::function<void(double*, Eigen::Index)>& fn);
void for_each_parameter(ParameterGrads& grads, const std::function<void(double*, Eigen::Index)>& fn);

struct LossParts {
  double dataset = 0.0;  // L_dataset
  double separation = 0.0;  // L_sep
  double total = 0.0;
  /// Set when the batch lacks one of the labels (L_sep contributes 0).
  bool single_class = false;
};

/// One projected sample with its tags.
struct BatchItem {
  std::uint32_t dataset_id;
  Label label;
};

/// Pairwise dataset-clustering hinge plus centroid-separation hinge over the
/// rows of `z`. `grad_z`, when given, receives dTotal/dz with subgradient 0
/// at hinge kinks and coincident points.
LossParts contrastive_loss(const Eigen::MatrixXd& z, std::span<const BatchItem> items, double margin_dataset,
                           double margin_safety, double alpha, double beta, Eigen::MatrixXd* grad_z = nullptr);

struct BatchStats {
  std::array<Eigen::VectorXd, 2> mean, var;  // biased batch statistics
};

struct GradientResult {
  ParameterGrads grads;
  LossParts loss;
  BatchStats stats;
};

/// Training-mode forward pass and exact backward pass of the combined loss
/// over one batch (rows of `inputs`). Dropout masks come from `dropout_rng`;
/// pass nullptr to disable dropout. Throws ModeError in inference mode.
GradientResult loss_gradients(const ProjectionModel& model, const Eigen::MatrixXd& inputs,
                              std::span<const BatchItem> items, Rng* dropout_rng = nullptr);

/// Training-mode forward + loss only (no dropout). Used for finite differences.
LossParts training_loss(const ProjectionModel& model, const Eigen::MatrixXd& inputs, std::span<const BatchItem> items);

/// Inference-mode forward pass on rows.
Eigen::MatrixXd project_rows(const ProjectionModel& model, const Eigen::MatrixXd& inputs);

struct EpochRecord {
  double dataset_loss = 0.0;
  double separation_loss = 0.0;
  double total_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
  std::size_t final_epoch = 0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  bool single_dataset = false;
  std::size_t single_class_batches = 0;
};

struct TrainingResult {
  ProjectionModel model;
  TrainingTrace trace;
};

/// Mini-batch training of the projection. Batches are stratified by label.
/// The validation loss (inference mode) drives early stopping and the
/// returned model is the best-validation checkpoint; without a validation
/// set the training set is used for that role.
TrainingResult train_projection(const FeatureSet& train, const ProjectionConfig& config,
                                const FeatureSet* validation = nullptr);

/// Inference-mode projection of a whole feature set.
FeatureSet project(const ProjectionModel& model, const FeatureSet& set);

/// Mean per-chunk loss of the model in inference mode over `set`.
LossParts evaluation_loss(const ProjectionModel& model, const FeatureSet& set);

// Bundle: projection.json (architecture, config, running stats) + weights.rcsw.
inline constexpr char kWeightsMagic[8] = {'R', 'C', 'S', 'W', 'G', 'T', '0', '1'};
void save_projection_bundle(const ProjectionModel& model, const std::filesystem::path& dir);
ProjectionModel load_projection_bundle(const std::filesystem::path& dir);

std::string config_to_json(const ProjectionConfig& config);
ProjectionConfig config_from_json(const std::string& text);

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // out x d, rows orthonormal
  Eigen::VectorXd explained_variance;
  bool rank_deficient = false;
  std::size_t requested = 0;

  Eigen::MatrixXd transform(const Eigen::MatrixXd& rows) const;
};

/// Top principal components of the mean-centered training rows (sample
/// covariance, 1/(n-1)); each component's largest-magnitude entry is made
/// positive. Fewer usable components than requested sets rank_deficient.
PcaModel pca_fit(const Eigen::MatrixXd& train, std::size_t out_dim);

struct PcaProjection {
  FeatureSet features;
  PcaModel model;
};

PcaProjection pca_fit_project(const FeatureSet& train, const FeatureSet& apply, std::size_t out_dim);

}  // namespace rcs
