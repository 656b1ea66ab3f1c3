#include <fstream>

#include <json.hpp>

#include "rcs/detectors.hpp"
#include "rcs/errors.hpp"

namespace rcs {
namespace {

using nlohmann::json;

constexpr int kDetectorFormatVersion = 1;

json cluster_json(const GaussianCluster& c) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < c.chol.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(i + 1));
    for (Eigen::Index j = 0; j <= i; ++j) row[static_cast<std::size_t>(j)] = c.chol(i, j);
    rows.push_back(std::move(row));
  }
  return {{"id", c.id},
          {"count", c.count},
          {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())},
          {"lambda", c.shrinkage},
          {"jitter", c.jitter},
          {"chol", std::move(rows)}};
}

GaussianCluster cluster_from(const json& j, std::size_t dim) {
  GaussianCluster c;
  c.id = j.at("id").get<std::uint32_t>();
  c.count = j.at("count").get<std::size_t>();
  c.shrinkage = j.at("lambda").get<double>();
  c.jitter = j.at("jitter").get<double>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  if (mean.size() != dim) fail(ErrorCode::DimensionMismatch, "cluster mean has the wrong length");
  c.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(dim));
  const auto& rows = j.at("chol");
  if (rows.size() != dim) fail(ErrorCode::DimensionMismatch, "cholesky factor has the wrong number of rows");
  const auto d = static_cast<Eigen::Index>(dim);
  c.chol = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const auto row = rows[static_cast<std::size_t>(i)].get<std::vector<double>>();
    if (row.size() != static_cast<std::size_t>(i + 1)) fail(ErrorCode::MalformedRecord, "cholesky row has the wrong length");
    for (Eigen::Index k = 0; k <= i; ++k) c.chol(i, k) = row[static_cast<std::size_t>(k)];
    if (!(c.chol(i, i) > 0.0)) fail(ErrorCode::MalformedRecord, "cholesky diagonal must be positive");
  }
  if (!c.mean.allFinite() || !c.chol.allFinite()) fail(ErrorCode::NonFiniteValue, "cluster holds non-finite values");
  c.covariance = c.chol * c.chol.transpose();
  c.covariance.diagonal().array() -= c.jitter;
  return c;
}

std::filesystem::path bank_path_for(const std::filesystem::path& json_path) {
  auto p = json_path;
  p.replace_extension(".bank.rcsf");
  return p;
}

FeatureSet bank_as_set(const NeighborBank& bank, std::size_t dim) {
  FeatureSet set;
  set.dim = dim;
  auto add = [&](const RowMatrix& rows, const std::vector<std::uint32_t>& groups, Label label) {
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const auto id = groups[static_cast<std::size_t>(r)];
      set.records.push_back(make_record(rows.row(r).transpose(), id, label, Modality::Text));
      set.catalog.emplace(id, "dataset_" + std::to_string(id));
    }
  };
  add(bank.benign, bank.benign_groups, Label::Benign);
  add(bank.malicious, bank.malicious_groups, Label::Malicious);
  return set;
}

const char* mode_name(KcdMode m) { return m == KcdMode::Pooled ? "pooled" : "per-dataset"; }

KcdMode mode_from(const std::string& s) {
  if (s == "pooled") return KcdMode::Pooled;
  if (s == "per-dataset") return KcdMode::PerDataset;
  fail(ErrorCode::InvalidConfig, "unknown kcd mode '" + s + "'");
}

const char* strategy_name(ClusterStrategy s) { return s == ClusterStrategy::KMeans ? "kmeans" : "dataset"; }

ClusterStrategy strategy_from(const std::string& s) {
  if (s == "dataset") return ClusterStrategy::DatasetPerCluster;
  if (s == "kmeans") return ClusterStrategy::KMeans;
  fail(ErrorCode::InvalidConfig, "unknown cluster strategy '" + s + "'");
}

}  // namespace

void save_detector_bundle(const Detector& det, const std::filesystem::path& json_path,
                          const std::string& projection_path) {
  const auto& o = det.options;
  json j = {{"format", "rcs-detector"},
            {"version", kDetectorFormatVersion},
            {"variant", variant_name(o.variant)},
            {"dim", det.dim},
            {"k", o.k},
            {"normalize", o.normalize},
            {"kcd_mode", mode_name(o.kcd_mode)},
            {"strategy", strategy_name(o.strategy)},
            {"benign_clusters", o.benign_clusters},
            {"malicious_clusters", o.malicious_clusters},
            {"seed", o.seed},
            {"skipped_groups", det.skipped_groups},
            {"projection", projection_path}};
  j["clusters"] = {{"benign", json::array()}, {"malicious", json::array()}};
  for (const auto& c : det.clusters.benign) j["clusters"]["benign"].push_back(cluster_json(c));
  for (const auto& c : det.clusters.malicious) j["clusters"]["malicious"].push_back(cluster_json(c));

  const bool knn = o.variant == Variant::Kcd || o.variant == Variant::OneClassKnn;
  if (knn) {
    const auto bank = bank_path_for(json_path);
    write_feature_file(bank_as_set(det.neighbors, det.dim), bank);
    j["bank"] = bank.filename().string();
  }
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + json_path.string());
  out << j.dump(1) << '\n';
  if (!out) fail(ErrorCode::IoFailure, "failed writing " + json_path.string());
}

Detector load_detector_bundle(const std::filesystem::path& json_path, std::string* projection_path) {
  std::ifstream in(json_path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + json_path.string());
  json j;
  Detector det;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != "rcs-detector") fail(ErrorCode::BadMagic, "not a detector bundle");
    auto& o = det.options;
    o.variant = variant_from_name(j.at("variant").get<std::string>());
    det.dim = j.at("dim").get<std::size_t>();
    o.k = j.at("k").get<std::size_t>();
    o.normalize = j.at("normalize").get<bool>();
    o.kcd_mode = mode_from(j.at("kcd_mode").get<std::string>());
    o.strategy = strategy_from(j.at("strategy").get<std::string>());
    o.benign_clusters = j.at("benign_clusters").get<std::size_t>();
    o.malicious_clusters = j.at("malicious_clusters").get<std::size_t>();
    o.seed = j.at("seed").get<std::uint64_t>();
    det.skipped_groups = j.value("skipped_groups", std::size_t{0});
    if (projection_path) *projection_path = j.value("projection", std::string{});
    for (const auto& c : j.at("clusters").at("benign")) det.clusters.benign.push_back(cluster_from(c, det.dim));
    for (const auto& c : j.at("clusters").at("malicious")) det.clusters.malicious.push_back(cluster_from(c, det.dim));
    if (j.contains("bank")) {
      const FeatureSet bank = read_feature_file(json_path.parent_path() / j.at("bank").get<std::string>());
      if (bank.dim != det.dim) fail(ErrorCode::DimensionMismatch, "neighbour bank dimension differs from bundle");
      det.neighbors = make_neighbor_bank(bank, o.k, o.kcd_mode);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord, json_path.string() + ": " + e.what());
  }
  return det;
}

}  // namespace rcs
