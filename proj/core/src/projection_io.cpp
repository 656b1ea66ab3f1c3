#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "rcs/errors.hpp"
#include "rcs/projection.hpp"

namespace rcs {
namespace {

using nlohmann::json;

const char* const kTensorNames[] = {"dense0.weight", "norm0.scale", "norm0.shift", "dense1.weight", "norm1.scale",
                                    "norm1.shift",   "dense2.weight", "dense2.bias"};

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j, std::size_t expected, const char* what) {
  const auto values = j.get<std::vector<double>>();
  if (values.size() != expected) fail(ErrorCode::MalformedRecord, std::string(what) + " has the wrong length");
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) fail(ErrorCode::TruncatedPayload, "weights file ends inside a tensor header");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + k])) << (8 * k);
  pos += 4;
  return v;
}

// Tensor views in bundle order; matrices are written row-major.
struct TensorRef {
  double* data;
  Eigen::Index rows, cols;  // cols == 0 marks a rank-1 tensor
};

std::vector<TensorRef> tensors_of(ProjectionModel& m) {
  std::vector<TensorRef> t;
  for (int l = 0; l < 2; ++l) {
    t.push_back({m.dense[l].weight.data(), m.dense[l].weight.rows(), m.dense[l].weight.cols()});
    t.push_back({m.norm[l].scale.data(), m.norm[l].scale.size(), 0});
    t.push_back({m.norm[l].shift.data(), m.norm[l].shift.size(), 0});
  }
  t.push_back({m.dense[2].weight.data(), m.dense[2].weight.rows(), m.dense[2].weight.cols()});
  t.push_back({m.dense[2].bias.data(), m.dense[2].bias.size(), 0});
  return t;
}

}  // namespace

std::string config_to_json(const ProjectionConfig& c) {
  json j = {{"in_dim", c.in_dim},
            {"hidden_dims", {c.hidden_dims[0], c.hidden_dims[1]}},
            {"out_dim", c.out_dim},
            {"dropout_rate", c.dropout_rate},
            {"margin_dataset", c.margin_dataset},
            {"margin_safety", c.margin_safety},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd_momentum"},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"patience", c.patience},
            {"min_improvement", c.min_improvement},
            {"bn_momentum", c.bn_momentum},
            {"bn_epsilon", c.bn_epsilon},
            {"seed", c.seed}};
  return j.dump();
}

ProjectionConfig config_from_json(const std::string& text) {
  ProjectionConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("projection config is not JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, "projection config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "in_dim") c.in_dim = v.get<std::size_t>();
      else if (key == "hidden_dims") {
        const auto dims = v.get<std::vector<std::size_t>>();
        if (dims.size() != 2) fail(ErrorCode::InvalidConfig, "hidden_dims must have two entries");
        c.hidden_dims = {dims[0], dims[1]};
      } else if (key == "out_dim") c.out_dim = v.get<std::size_t>();
      else if (key == "dropout_rate") c.dropout_rate = v.get<double>();
      else if (key == "margin_dataset") c.margin_dataset = v.get<double>();
      else if (key == "margin_safety") c.margin_safety = v.get<double>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "beta") c.beta = v.get<double>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "optimizer") {
        const auto name = v.get<std::string>();
        if (name == "adam") c.optimizer = OptimizerKind::Adam;
        else if (name == "sgd_momentum" || name == "sgd") c.optimizer = OptimizerKind::SgdMomentum;
        else fail(ErrorCode::InvalidConfig, "unknown optimizer '" + name + "'");
      } else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "patience") c.patience = v.get<std::size_t>();
      else if (key == "min_improvement") c.min_improvement = v.get<double>();
      else if (key == "bn_momentum") c.bn_momentum = v.get<double>();
      else if (key == "bn_epsilon") c.bn_epsilon = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else fail(ErrorCode::InvalidConfig, "unknown projection config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("projection config: ") + e.what());
  }
  return c;
}

void save_projection_bundle(const ProjectionModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ProjectionModel copy = model;

  json meta;
  meta["format"] = "rcs-projection";
  meta["version"] = 1;
  meta["architecture"] = {{"in_dim", model.in_dim()},
                          {"hidden_dims", {model.dense[0].weight.rows(), model.dense[1].weight.rows()}},
                          {"out_dim", model.out_dim()},
                          {"activation", "relu"},
                          {"batch_norm", "pre-activation"},
                          {"tensors", kTensorNames},
                          {"parameter_count", model.parameter_count()}};
  meta["config"] = json::parse(config_to_json(model.config));
  meta["normalization"] = json::array();
  for (const auto& bn : model.norm) {
    meta["normalization"].push_back(
        {{"running_mean", vector_json(bn.running_mean)}, {"running_var", vector_json(bn.running_var)}});
  }
  meta["weights"] = "weights.rcsw";

  std::string blob(kWeightsMagic, kWeightsMagic + 8);
  for (const auto& t : tensors_of(copy)) {
    if (t.cols == 0) {
      put_u32(blob, 1);
      put_u32(blob, static_cast<std::uint32_t>(t.rows));
      for (Eigen::Index i = 0; i < t.rows; ++i) put_u32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(t.data[i])));
    } else {
      put_u32(blob, 2);
      put_u32(blob, static_cast<std::uint32_t>(t.rows));
      put_u32(blob, static_cast<std::uint32_t>(t.cols));
      const Eigen::Map<const Eigen::MatrixXd> m(t.data, t.rows, t.cols);
      for (Eigen::Index i = 0; i < t.rows; ++i) {
        for (Eigen::Index j = 0; j < t.cols; ++j) put_u32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j))));
      }
    }
  }

  std::ofstream w(dir / "weights.rcsw", std::ios::binary | std::ios::trunc);
  if (!w) fail(ErrorCode::IoFailure, "cannot write " + (dir / "weights.rcsw").string());
  w.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream j(dir / "projection.json", std::ios::trunc);
  if (!j) fail(ErrorCode::IoFailure, "cannot write " + (dir / "projection.json").string());
  j << meta.dump(2) << '\n';
}

ProjectionModel load_projection_bundle(const std::filesystem::path& dir) {
  std::ifstream jin(dir / "projection.json");
  if (!jin) fail(ErrorCode::IoFailure, "cannot open " + (dir / "projection.json").string());
  json meta;
  try {
    jin >> meta;
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord, std::string("projection.json: ") + e.what());
  }

  ProjectionModel model;
  try {
    ProjectionConfig config = config_from_json(meta.at("config").dump());
    model = init_projection(config);
    for (int l = 0; l < 2; ++l) {
      const auto& n = meta.at("normalization").at(static_cast<std::size_t>(l));
      const auto width = static_cast<std::size_t>(model.norm[l].scale.size());
      model.norm[l].running_mean = vector_from(n.at("running_mean"), width, "running_mean");
      model.norm[l].running_var = vector_from(n.at("running_var"), width, "running_var");
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord, std::string("projection.json: ") + e.what());
  }

  std::ifstream win(dir / "weights.rcsw", std::ios::binary);
  if (!win) fail(ErrorCode::IoFailure, "cannot open " + (dir / "weights.rcsw").string());
  const std::string blob((std::istreambuf_iterator<char>(win)), std::istreambuf_iterator<char>());
  if (blob.size() < 8 || blob.compare(0, 8, std::string(kWeightsMagic, 8)) != 0) {
    fail(ErrorCode::BadMagic, "weights.rcsw has no RCSWGT01 magic");
  }
  std::size_t pos = 8;
  for (const auto& t : tensors_of(model)) {
    const std::uint32_t rank = get_u32(blob, pos);
    const std::uint32_t expected_rank = t.cols == 0 ? 1 : 2;
    if (rank != expected_rank) fail(ErrorCode::MalformedRecord, "tensor rank does not match architecture");
    const std::uint32_t rows = get_u32(blob, pos);
    const std::uint32_t cols = rank == 2 ? get_u32(blob, pos) : 0;
    if (rows != t.rows || cols != t.cols) fail(ErrorCode::DimensionMismatch, "tensor shape does not match architecture");
    const std::size_t count = rank == 2 ? static_cast<std::size_t>(rows) * cols : rows;
    if (pos + 4 * count > blob.size()) fail(ErrorCode::TruncatedPayload, "weights file ends inside a tensor");
    Eigen::Map<Eigen::MatrixXd> m(t.data, t.rows, rank == 2 ? t.cols : 1);
    for (std::size_t k = 0; k < count; ++k) {
      const float v = std::bit_cast<float>(get_u32(blob, pos));
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, "weights contain NaN/Inf");
      if (rank == 2) m(static_cast<Eigen::Index>(k / cols), static_cast<Eigen::Index>(k % cols)) = v;
      else m(static_cast<Eigen::Index>(k), 0) = v;
    }
  }
  if (pos != blob.size()) fail(ErrorCode::MalformedRecord, "trailing bytes after the last tensor");
  model.mode = Mode::Inference;
  return model;
}

}  // namespace rcs
