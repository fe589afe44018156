#pragma once

// Versioned, checksummed JSON snapshots of trained networks and fitted
// mixtures. Keys are sorted and doubles are written as shortest round-trip
// decimals, so equal models give byte-equal files.

#include "ntkmoe/common.hpp"
#include "ntkmoe/moe_pipeline.hpp"
#include "ntkmoe/nn_core.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace ntkmoe {

inline constexpr int kSnapshotVersion = 1;

namespace snapshot_detail {

using json = nlohmann::json;

inline json vec_json(const Eigen::Ref<const Vector>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

inline json mat_json(const Eigen::Ref<const Matrix>& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix json_mat(const json& j) {
  const Index r = j.at("rows").get<Index>();
  const Index c = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (r < 0 || c < 0 || static_cast<Index>(data.size()) != r * c) throw FormatError("snapshot: matrix size mismatch");
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index k = 0; k < c; ++k) m(i, k) = data[static_cast<std::size_t>(i * c + k)];
  return m;
}

// Lower triangle, row by row.
inline json lower_json(const Matrix& L) {
  std::vector<double> data;
  for (Index i = 0; i < L.rows(); ++i)
    for (Index j = 0; j <= i; ++j) data.push_back(L(i, j));
  return data;
}

inline Matrix json_lower(const json& j, Index n) {
  const auto data = j.get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != n * (n + 1) / 2) throw FormatError("snapshot: cholesky factor size mismatch");
  Matrix L = Matrix::Zero(n, n);
  std::size_t at = 0;
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k <= i; ++k) L(i, k) = data[at++];
  return L;
}

inline json mask_json(const PruneMask& m) { return {{"kept", m.kept}, {"stage", to_string(m.stage)}, {"total", m.total}}; }

inline PruneMask json_mask(const json& j) {
  PruneMask m;
  m.kept = j.at("kept").get<std::vector<int>>();
  m.stage = parse_prune_stage(j.at("stage").get<std::string>());
  m.total = j.at("total").get<int>();
  m.validate();
  return m;
}

inline json spec_json(const MlpSpec& s) { return {{"activation", to_string(s.activation)}, {"layer_widths", s.layer_widths}}; }

inline MlpSpec json_spec(const json& j) {
  MlpSpec s;
  s.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.validate();
  return s;
}

inline json train_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"epochs", c.epochs},          {"l2_delta", c.l2_delta},
          {"learning_rate", c.learning_rate}, {"loss", to_string(c.loss)}, {"optimizer", to_string(c.optimizer)},
          {"seed", c.seed}};
}

inline TrainConfig json_train(const json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.l2_delta = j.at("l2_delta").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.loss = parse_loss(j.at("loss").get<std::string>());
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline json moe_config_json(const MoeConfig& c) {
  return {{"boundary_budget", c.boundary_budget},
          {"boundary_fraction", c.boundary_fraction},
          {"classification_sigma0", c.classification_sigma0},
          {"experts", c.experts},
          {"mll_iterations", c.mll_iterations},
          {"neighbors", c.neighbors},
          {"partition_mode", to_string(c.partition_mode)},
          {"patch_enabled", c.patch_enabled},
          {"pca_dims", c.pca_dims},
          {"pca_subset", c.pca_subset},
          {"prune_expert", c.prune_expert},
          {"prune_global", c.prune_global},
          {"seed", c.seed}};
}

inline MoeConfig json_moe_config(const json& j) {
  MoeConfig c;
  c.boundary_budget = j.at("boundary_budget").get<int>();
  c.boundary_fraction = j.at("boundary_fraction").get<double>();
  c.classification_sigma0 = j.at("classification_sigma0").get<double>();
  c.experts = j.at("experts").get<int>();
  c.mll_iterations = j.at("mll_iterations").get<int>();
  c.neighbors = j.at("neighbors").get<int>();
  c.partition_mode = parse_partition_mode(j.at("partition_mode").get<std::string>());
  c.patch_enabled = j.at("patch_enabled").get<bool>();
  c.pca_dims = j.at("pca_dims").get<int>();
  c.pca_subset = j.at("pca_subset").get<int>();
  c.prune_expert = j.at("prune_expert").get<double>();
  c.prune_global = j.at("prune_global").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline json gating_json(const GatingModel& g) {
  return {{"alpha", mat_json(g.alpha)},
          {"centroids", mat_json(g.centroids)},
          {"config",
           {{"delta", g.config.delta},
            {"dims", g.config.dims},
            {"experts", g.config.experts},
            {"landmarks", g.config.landmarks},
            {"seed", g.config.seed}}},
          {"eigvals", vec_json(g.eigvals)},
          {"landmark_features", mat_json(g.landmark_features)},
          {"landmark_ids", g.landmark_ids}};
}

inline GatingModel json_gating(const json& j) {
  GatingModel g;
  g.alpha = json_mat(j.at("alpha"));
  g.centroids = json_mat(j.at("centroids"));
  const json& c = j.at("config");
  g.config.delta = c.at("delta").get<double>();
  g.config.dims = c.at("dims").get<int>();
  g.config.experts = c.at("experts").get<int>();
  g.config.landmarks = c.at("landmarks").get<int>();
  g.config.seed = c.at("seed").get<std::uint64_t>();
  g.eigvals = json_vec(j.at("eigvals"));
  g.landmark_features = json_mat(j.at("landmark_features"));
  g.landmark_ids = j.at("landmark_ids").get<std::vector<int>>();
  if (g.alpha.rows() != g.landmark_features.rows() || g.alpha.cols() != g.eigvals.size() ||
      g.centroids.cols() != g.eigvals.size())
    throw FormatError("snapshot: inconsistent gating dimensions");
  g.finalize();
  return g;
}

inline json mlp_body(const MlpParams& mlp, const TrainConfig& train) {
  return {{"mlp_spec", spec_json(mlp.spec)}, {"theta", vec_json(mlp.theta)}, {"train_config_echo", train_json(train)}};
}

inline MlpParams body_mlp(const json& body) {
  MlpParams p{json_spec(body.at("mlp_spec")), json_vec(body.at("theta"))};
  if (p.theta.size() != p.spec.parameter_count()) throw FormatError("snapshot: theta length does not match mlp_spec");
  return p;
}

inline std::string format_crc(const std::string& text) {
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

inline std::string wrap(const std::string& kind, const json& body) {
  json doc{{"body", body}, {"crc32", format_crc(body.dump())}, {"format_version", kSnapshotVersion}, {"kind", kind}};
  return doc.dump() + "\n";
}

inline json unwrap(const std::string& text, const std::string& kind, const std::string& name) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(name + ": truncated or malformed snapshot (" + e.what() + ")");
  }
  if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("body") || !doc.contains("crc32"))
    throw FormatError(name + ": truncated or malformed snapshot (missing envelope fields)");
  if (!doc["format_version"].is_number_integer() || doc["format_version"].get<int>() != kSnapshotVersion)
    throw FormatError(name + ": unsupported snapshot version " + doc["format_version"].dump());
  if (format_crc(doc["body"].dump()) != doc["crc32"].get<std::string>())
    throw FormatError(name + ": snapshot checksum mismatch");
  if (doc.value("kind", std::string()) != kind)
    throw FormatError(name + ": expected a '" + kind + "' snapshot, found '" + doc.value("kind", std::string()) + "'");
  return doc["body"];
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace snapshot_detail

struct MlpSnapshot {
  MlpParams mlp;
  TrainConfig train_config;
};

inline std::string serialize_mlp(const MlpParams& mlp, const TrainConfig& train) {
  return snapshot_detail::wrap("mlp", snapshot_detail::mlp_body(mlp, train));
}

inline MlpSnapshot deserialize_mlp(const std::string& text, const std::string& name = "<memory>") {
  try {
    const auto body = snapshot_detail::unwrap(text, "mlp", name);
    return {snapshot_detail::body_mlp(body), snapshot_detail::json_train(body.at("train_config_echo"))};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed snapshot body (" + e.what() + ")");
  }
}

inline std::string serialize_moe(const MoeModel& model) {
  using namespace snapshot_detail;
  json body = mlp_body(model.mlp, model.train_config);
  body["moe_config"] = moe_config_json(model.config);
  body["global_mask"] = mask_json(model.global_mask);
  body["train_inputs"] = mat_json(model.train_inputs);
  body["calibration"] = {{"lambda0", model.calibration.lambda0}, {"per_expert", model.calibration.per_expert}};
  json groups = json::array();
  for (const auto& g : model.groups) {
    json experts = json::array();
    for (const auto& e : g.experts) {
      json outs = json::array();
      for (const auto& gp : e.outputs) {
        outs.push_back({{"chol", lower_json(gp.chol)},
                        {"coeffs", vec_json(gp.coeffs)},
                        {"expert_mask", mask_json(gp.mask)},
                        {"jitter", gp.jitter},
                        {"log_delta", gp.hyper.log_delta},
                        {"log_sigma0", gp.hyper.log_sigma0},
                        {"targets", vec_json(gp.targets)}});
      }
      experts.push_back({{"boundary_ids", e.boundary_ids}, {"member_ids", e.member_ids}, {"outputs", outs}});
    }
    groups.push_back({{"experts", experts},
                      {"gating", gating_json(g.gating)},
                      {"labels", g.labels.label},
                      {"neighbors", g.neighbors.neighbors},
                      {"outputs", g.outputs}});
  }
  body["groups"] = groups;
  json infos = json::array();
  for (const auto& info : model.metadata.experts) {
    infos.push_back({{"boundary", info.boundary},
                     {"expert", info.expert},
                     {"final_mll", info.final_mll},
                     {"group", info.group},
                     {"initial_mll", info.initial_mll},
                     {"members", info.members}});
  }
  body["metadata"] = {{"experts", infos}, {"jitter_escalations", model.metadata.jitter_escalations}};
  return wrap("moe", body);
}

// Expert feature blocks are not stored: they are recomputed from the
// training inputs and the network, which reproduces them exactly.
inline MoeModel deserialize_moe(const std::string& text, const std::string& name = "<memory>") {
  using namespace snapshot_detail;
  const json body = unwrap(text, "moe", name);
  try {
    MoeModel model;
    model.mlp = body_mlp(body);
    model.train_config = json_train(body.at("train_config_echo"));
    model.config = json_moe_config(body.at("moe_config"));
    model.global_mask = json_mask(body.at("global_mask"));
    model.train_inputs = json_mat(body.at("train_inputs"));
    model.calibration.lambda0 = body.at("calibration").at("lambda0").get<double>();
    model.calibration.per_expert = body.at("calibration").at("per_expert").get<std::vector<double>>();
    if (model.global_mask.total != model.mlp.spec.parameter_count())
      throw FormatError(name + ": global mask does not match the network");
    if (model.train_inputs.cols() != model.mlp.spec.input_dim())
      throw FormatError(name + ": training inputs do not match the network");
    const Index N = model.train_inputs.rows();
    const int K = model.output_dim();

    std::vector<RowMatrix> jac(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) jac[i] = jacobian(model.mlp, model.train_inputs.row(i).transpose());

    for (const json& jg : body.at("groups")) {
      PartitionGroup g;
      g.outputs = jg.at("outputs").get<std::vector<int>>();
      g.gating = json_gating(jg.at("gating"));
      g.labels.label = jg.at("labels").get<std::vector<int>>();
      g.labels.num_experts = g.gating.experts();
      g.labels.validate();
      g.neighbors.neighbors = jg.at("neighbors").get<std::vector<std::vector<int>>>();
      for (int k : g.outputs)
        if (k < 0 || k >= K) throw FormatError(name + ": group output index out of range");
      for (const json& je : jg.at("experts")) {
        ExpertGp e;
        e.member_ids = je.at("member_ids").get<std::vector<int>>();
        e.boundary_ids = je.at("boundary_ids").get<std::vector<int>>();
        std::vector<int> rows = e.member_ids;
        rows.insert(rows.end(), e.boundary_ids.begin(), e.boundary_ids.end());
        for (int r : rows)
          if (r < 0 || r >= N) throw FormatError(name + ": expert row id out of range");
        const auto& outs = je.at("outputs");
        if (outs.size() != g.outputs.size()) throw FormatError(name + ": expert output count mismatch");
        for (std::size_t j = 0; j < outs.size(); ++j) {
          const json& jo = outs[j];
          const int k = g.outputs[j];
          LocalGp gp;
          gp.mask = json_mask(jo.at("expert_mask"));
          gp.hyper = {jo.at("log_delta").get<double>(), jo.at("log_sigma0").get<double>()};
          gp.jitter = jo.at("jitter").get<double>();
          gp.targets = json_vec(jo.at("targets"));
          gp.coeffs = json_vec(jo.at("coeffs"));
          const Index n = static_cast<Index>(rows.size());
          if (gp.targets.size() != n || gp.coeffs.size() != n) throw FormatError(name + ": expert target size mismatch");
          gp.chol = json_lower(jo.at("chol"), n);
          if (gp.mask.total != model.mlp.spec.parameter_count()) throw FormatError(name + ": expert mask width mismatch");
          gp.features.resize(n, gp.mask.size());
          for (Index r = 0; r < n; ++r)
            for (int c = 0; c < gp.mask.size(); ++c) gp.features(r, c) = jac[rows[r]](k, gp.mask.kept[c]);
          e.outputs.push_back(std::move(gp));
        }
        g.experts.push_back(std::move(e));
      }
      if (static_cast<int>(g.experts.size()) != g.gating.experts()) throw FormatError(name + ": expert count mismatch");
      model.groups.push_back(std::move(g));
    }
    const json& meta = body.at("metadata");
    model.metadata.jitter_escalations = meta.at("jitter_escalations").get<int>();
    for (const json& ji : meta.at("experts")) {
      ExpertBuildInfo info;
      info.boundary = ji.at("boundary").get<int>();
      info.expert = ji.at("expert").get<int>();
      info.final_mll = ji.at("final_mll").get<std::vector<double>>();
      info.group = ji.at("group").get<int>();
      info.initial_mll = ji.at("initial_mll").get<std::vector<double>>();
      info.members = ji.at("members").get<int>();
      model.metadata.experts.push_back(std::move(info));
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed snapshot body (" + e.what() + ")");
  } catch (const SpecificationError& e) {
    throw FormatError(name + ": invalid snapshot content (" + e.what() + ")");
  }
}

inline void snapshot_write(const MoeModel& model, const std::string& path) {
  snapshot_detail::write_file(path, serialize_moe(model));
}

inline MoeModel snapshot_read(const std::string& path) {
  return deserialize_moe(snapshot_detail::read_file(path), path);
}

inline void save_mlp(const MlpParams& mlp, const TrainConfig& train, const std::string& path) {
  snapshot_detail::write_file(path, serialize_mlp(mlp, train));
}

inline MlpSnapshot load_mlp(const std::string& path) { return deserialize_mlp(snapshot_detail::read_file(path), path); }

}  // namespace ntkmoe
