#include "rcs/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <tuple>

#include <json.hpp>

#include "rcs/errors.hpp"
#include "rcs/random.hpp"

namespace rcs {
namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

constexpr std::size_t kRecordPrefixBytes = 8;

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<unsigned char>((v >> shift) & 0xff));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (static_cast<unsigned>(p[1]) << 8));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::size_t record_bytes(std::size_t dim) { return kRecordPrefixBytes + 4 * dim; }

Catalog read_catalog(const std::filesystem::path& path, std::optional<int>& layer) {
  Catalog catalog;
  const auto sidecar = catalog_path_for(path);
  if (!std::filesystem::exists(sidecar)) return catalog;
  std::ifstream in(sidecar);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + sidecar.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedRecord, "catalog " + sidecar.string() + ": " + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::MalformedRecord, "catalog must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "layer") {
      if (!value.is_number_integer()) fail(ErrorCode::MalformedRecord, "catalog 'layer' must be an integer");
      layer = value.get<int>();
      continue;
    }
    if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
        !value.is_string()) {
      fail(ErrorCode::MalformedRecord, "catalog entry '" + key + "' is not <decimal id>: <name>");
    }
    catalog.emplace(static_cast<std::uint32_t>(std::stoul(key)), value.get<std::string>());
  }
  return catalog;
}

}  // namespace

bool FeatureRecord::operator==(const FeatureRecord& other) const {
  if (dataset_id != other.dataset_id || label != other.label || modality != other.modality ||
      vector.size() != other.vector.size()) {
    return false;
  }
  // Bit-level comparison so that -0.0f vs 0.0f counts as a difference.
  return std::memcmp(vector.data(), other.vector.data(), vector.size() * sizeof(float)) == 0;
}

bool FeatureSet::operator==(const FeatureSet& other) const {
  return dim == other.dim && records == other.records && catalog == other.catalog && layer == other.layer;
}

Eigen::MatrixXd FeatureSet::matrix() const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) out(i, j) = records[i].vector[j];
  }
  return out;
}

Eigen::MatrixXd FeatureSet::matrix(Label label) const { return with_label(label).matrix(); }

std::vector<std::uint8_t> FeatureSet::labels() const {
  std::vector<std::uint8_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(static_cast<std::uint8_t>(r.label));
  return out;
}

FeatureSet FeatureSet::subset(const std::vector<std::size_t>& indices) const {
  FeatureSet out = empty_like(dim);
  out.records.reserve(indices.size());
  for (auto i : indices) out.records.push_back(records.at(i));
  return out;
}

FeatureSet FeatureSet::with_label(Label wanted) const {
  FeatureSet out = empty_like(dim);
  for (const auto& r : records) {
    if (r.label == wanted) out.records.push_back(r);
  }
  return out;
}

std::size_t FeatureSet::count(Label wanted) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const FeatureRecord& r) { return r.label == wanted; }));
}

std::vector<std::uint32_t> FeatureSet::dataset_ids() const {
  std::set<std::uint32_t> ids;
  for (const auto& r : records) ids.insert(r.dataset_id);
  return {ids.begin(), ids.end()};
}

FeatureSet FeatureSet::empty_like(std::size_t new_dim) const {
  FeatureSet out;
  out.dim = new_dim;
  out.catalog = catalog;
  out.layer = layer;
  return out;
}

void check_invariants(const FeatureSet& set) {
  if (set.dim == 0) fail(ErrorCode::InvariantViolation, "feature set dimension must be positive");
  if (set.dim > 0xffffffffULL) fail(ErrorCode::InvariantViolation, "dimension exceeds 32 bits");
  std::set<std::string> names;
  for (const auto& [id, name] : set.catalog) {
    if (!names.insert(name).second) fail(ErrorCode::InvariantViolation, "duplicate catalog name '" + name + "'");
  }
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    const std::string where = "record " + std::to_string(i);
    if (r.vector.size() != set.dim) fail(ErrorCode::InvariantViolation, where + " has wrong length");
    if (!set.catalog.contains(r.dataset_id)) {
      fail(ErrorCode::InvariantViolation, where + " references unknown dataset id " + std::to_string(r.dataset_id));
    }
    if (static_cast<unsigned>(r.label) > 1 || static_cast<unsigned>(r.modality) > 1) {
      fail(ErrorCode::InvariantViolation, where + " has out-of-range label or modality");
    }
    for (float v : r.vector) {
      if (!std::isfinite(v)) fail(ErrorCode::InvariantViolation, where + " has a non-finite entry");
    }
  }
}

FeatureRecord make_record(const Eigen::Ref<const Eigen::VectorXd>& values, std::uint32_t dataset_id, Label label,
                          Modality modality) {
  FeatureRecord r;
  r.vector.resize(static_cast<std::size_t>(values.size()));
  for (Eigen::Index j = 0; j < values.size(); ++j) r.vector[static_cast<std::size_t>(j)] = static_cast<float>(values(j));
  r.dataset_id = dataset_id;
  r.label = label;
  r.modality = modality;
  return r;
}

FeatureSet replace_vectors(const FeatureSet& set, const Eigen::MatrixXd& values) {
  if (static_cast<std::size_t>(values.rows()) != set.size()) {
    fail(ErrorCode::LengthMismatch, "row count does not match record count");
  }
  FeatureSet out = set.empty_like(static_cast<std::size_t>(values.cols()));
  out.records.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& src = set.records[i];
    out.records.push_back(make_record(values.row(static_cast<Eigen::Index>(i)).transpose(), src.dataset_id,
                                      src.label, src.modality));
  }
  return out;
}

std::filesystem::path catalog_path_for(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".catalog.json");
}

FeatureSet read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < kFeatureHeaderBytes || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0) {
    fail(ErrorCode::BadMagic, path.string() + " is not an RCSF1 feature file");
  }
  const std::uint32_t count = get_u32(bytes.data() + 8);
  const std::size_t dim = static_cast<std::size_t>(get_u16(bytes.data() + 12)) +
                          65536 * static_cast<std::size_t>(get_u16(bytes.data() + 14));
  if (dim == 0) fail(ErrorCode::MalformedRecord, "header declares dimension 0");
  const std::size_t expected = kFeatureHeaderBytes + static_cast<std::size_t>(count) * record_bytes(dim);
  if (bytes.size() != expected) {
    fail(ErrorCode::TruncatedPayload, path.string() + ": header implies " + std::to_string(expected) +
                                          " bytes, file has " + std::to_string(bytes.size()));
  }

  FeatureSet set;
  set.dim = dim;
  set.catalog = read_catalog(path, set.layer);
  set.records.resize(count);
  const unsigned char* p = bytes.data() + kFeatureHeaderBytes;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& r = set.records[i];
    r.dataset_id = get_u32(p);
    const unsigned label = p[4];
    const unsigned modality = p[5];
    const std::uint16_t reserved = get_u16(p + 6);
    if (label > 1 || modality > 1 || reserved != 0) {
      fail(ErrorCode::MalformedRecord, "record " + std::to_string(i) + " has invalid label/modality/reserved bytes");
    }
    r.label = static_cast<Label>(label);
    r.modality = static_cast<Modality>(modality);
    if (!set.catalog.contains(r.dataset_id)) {
      fail(ErrorCode::UnknownDatasetId,
           "record " + std::to_string(i) + " uses dataset id " + std::to_string(r.dataset_id) + " absent from catalog");
    }
    p += kRecordPrefixBytes;
    r.vector.resize(dim);
    for (std::size_t j = 0; j < dim; ++j, p += 4) {
      const float v = std::bit_cast<float>(get_u32(p));
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, "record " + std::to_string(i) + " holds NaN/Inf");
      r.vector[j] = v;
    }
  }
  return set;
}

void write_feature_file(const FeatureSet& set, const std::filesystem::path& path) {
  check_invariants(set);
  if (set.records.size() > 0xffffffffULL) fail(ErrorCode::InvariantViolation, "too many records for RCSF1");

  std::vector<unsigned char> bytes;
  bytes.reserve(kFeatureHeaderBytes + set.records.size() * record_bytes(set.dim));
  bytes.insert(bytes.end(), kFeatureMagic, kFeatureMagic + 8);
  put_u32(bytes, static_cast<std::uint32_t>(set.records.size()));
  put_u16(bytes, static_cast<std::uint16_t>(set.dim & 0xffff));
  put_u16(bytes, static_cast<std::uint16_t>(set.dim >> 16));
  for (const auto& r : set.records) {
    put_u32(bytes, r.dataset_id);
    bytes.push_back(static_cast<unsigned char>(r.label));
    bytes.push_back(static_cast<unsigned char>(r.modality));
    put_u16(bytes, 0);
    for (float v : r.vector) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  }

  nlohmann::json catalog = nlohmann::json::object();
  for (const auto& [id, name] : set.catalog) catalog[std::to_string(id)] = name;
  if (set.layer) catalog["layer"] = *set.layer;

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::IoFailure, "short write to " + path.string());
  }
  std::ofstream side(catalog_path_for(path), std::ios::trunc);
  if (!side) fail(ErrorCode::IoFailure, "cannot write catalog for " + path.string());
  side << catalog.dump(2) << '\n';
}

Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixXd& rows) {
  Eigen::MatrixXd out = rows;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double norm = rows.row(i).norm();
    if (norm < 1e-12) fail(ErrorCode::ZeroVector, "row " + std::to_string(i) + " has (near-)zero norm");
    out.row(i) /= norm;
  }
  return out;
}

FeatureSet l2_normalize(const FeatureSet& set) {
  FeatureSet out = set;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    auto& v = out.records[i].vector;
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) fail(ErrorCode::ZeroVector, "record " + std::to_string(i) + " has (near-)zero norm");
    for (float& x : v) x = static_cast<float>(x / norm);
  }
  return out;
}

SplitPair stratified_split(const FeatureSet& set, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) fail(ErrorCode::InvalidArgument, "split fraction must lie in (0,1)");
  if (set.empty()) fail(ErrorCode::EmptySet, "cannot split an empty feature set");

  using Key = std::pair<std::uint32_t, std::uint8_t>;
  std::map<Key, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < set.size(); ++i) {
    strata[{set.records[i].dataset_id, static_cast<std::uint8_t>(set.records[i].label)}].push_back(i);
  }

  // Floor per stratum, then hand the leftover records (so that the total is
  // round(fraction * n)) to the largest fractional parts, ties by ascending key.
  struct Share {
    Key key;
    std::size_t take;
    double remainder;
  };
  std::vector<Share> shares;
  std::size_t assigned = 0;
  for (const auto& [key, members] : strata) {
    const double exact = fraction * static_cast<double>(members.size());
    auto base = static_cast<std::size_t>(std::floor(exact + 1e-9));
    base = std::min(base, members.size());
    shares.push_back({key, base, std::max(0.0, exact - static_cast<double>(base))});
    assigned += base;
  }
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(set.size())));
  std::vector<std::size_t> order(shares.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return shares[a].remainder > shares[b].remainder; });
  for (std::size_t idx : order) {
    if (assigned >= target) break;
    auto& s = shares[idx];
    if (s.remainder > 1e-9 && s.take < strata[s.key].size()) {
      ++s.take;
      ++assigned;
    }
  }

  SplitPair out;
  out.seed = seed;
  out.fraction = fraction;
  const Rng base(seed);
  for (const auto& s : shares) {
    auto members = strata[s.key];
    Rng rng = base.fork((static_cast<std::uint64_t>(s.key.first) << 8) | s.key.second);
    rng.shuffle(members);
    out.train_indices.insert(out.train_indices.end(), members.begin(), members.begin() + static_cast<long>(s.take));
    out.validation_indices.insert(out.validation_indices.end(), members.begin() + static_cast<long>(s.take),
                                  members.end());
  }
  std::sort(out.train_indices.begin(), out.train_indices.end());
  std::sort(out.validation_indices.begin(), out.validation_indices.end());
  out.train = set.subset(out.train_indices);
  out.validation = set.subset(out.validation_indices);
  return out;
}

}  // namespace rcs
