#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rcs {

enum class Label : std::uint8_t { Benign = 0, Malicious = 1 };
enum class Modality : std::uint8_t { Text = 0, Multimodal = 1 };

/// One last-token hidden state, tagged with its source dataset.
struct FeatureRecord {
  std::vector<float> vector;
  std::uint32_t dataset_id = 0;
  Label label = Label::Benign;
  Modality modality = Modality::Text;

  bool operator==(const FeatureRecord& other) const;
};

using Catalog = std::map<std::uint32_t, std::string>;

/// Labeled, dataset-tagged set of d-dimensional feature vectors. Vectors are
/// stored as f32 (the on-disk precision); numerical code converts to f64 via
/// matrix().
struct FeatureSet {
  std::size_t dim = 0;
  std::vector<FeatureRecord> records;
  Catalog catalog;
  std::optional<int> layer;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }

  /// n x dim matrix in f64, rows in record order.
  Eigen::MatrixXd matrix() const;
  /// Rows of the given label only.
  Eigen::MatrixXd matrix(Label label) const;
  std::vector<std::uint8_t> labels() const;

  /// Same dim/catalog/layer, records picked by index (in the given order).
  FeatureSet subset(const std::vector<std::size_t>& indices) const;
  FeatureSet with_label(Label label) const;
  std::size_t count(Label label) const;
  /// Dataset ids present in the records, ascending.
  std::vector<std::uint32_t> dataset_ids() const;

  /// Copy of the metadata with no records and a new dimension.
  FeatureSet empty_like(std::size_t new_dim) const;

  bool operator==(const FeatureSet& other) const;
};

/// Throws InvariantViolation describing the first broken invariant.
void check_invariants(const FeatureSet& set);

/// Builds a record from an f64 row (rounded to f32).
FeatureRecord make_record(const Eigen::Ref<const Eigen::VectorXd>& values, std::uint32_t dataset_id,
                          Label label, Modality modality = Modality::Text);

/// Same records and tags with vectors replaced by the rows of `values`.
FeatureSet replace_vectors(const FeatureSet& set, const Eigen::MatrixXd& values);

// RCSF1 binary container plus ".catalog.json" sidecar.
inline constexpr char kFeatureMagic[8] = {'R', 'C', 'S', 'F', 'E', 'A', 'T', '1'};
inline constexpr std::size_t kFeatureHeaderBytes = 16;

std::filesystem::path catalog_path_for(const std::filesystem::path& path);

FeatureSet read_feature_file(const std::filesystem::path& path);
void write_feature_file(const FeatureSet& set, const std::filesystem::path& path);

/// Scales every vector to unit Euclidean norm.
FeatureSet l2_normalize(const FeatureSet& set);
/// Row-wise normalization of a dense matrix; throws ZeroVector.
Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixXd& rows);

struct SplitPair {
  FeatureSet train;
  FeatureSet validation;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;
  std::uint64_t seed = 0;
  double fraction = 0.0;
};

/// Deterministic split stratified by (dataset_id, label). `fraction` is the
/// share of records that go to train.
SplitPair stratified_split(const FeatureSet& set, double fraction, std::uint64_t seed);

}  // namespace rcs
