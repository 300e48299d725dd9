#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "geoseg/geodesic.hpp"
#include "geoseg/io.hpp"
#include "geoseg/network.hpp"
#include "geoseg/transforms.hpp"

namespace geoseg {

inline constexpr const char* kCheckpointFormat = "geoseg-checkpoint";
inline constexpr int kCheckpointVersion = 1;

enum class ModelRole { pnet, rnet };

inline const char* to_string(ModelRole r) { return r == ModelRole::pnet ? "pnet" : "rnet"; }

inline const char* to_string(DistanceMetric m) {
  return m == DistanceMetric::geodesic ? "geodesic" : "euclidean";
}

inline DistanceMetric distance_metric_from_string(const std::string& s) {
  if (s == "geodesic") return DistanceMetric::geodesic;
  if (s == "euclidean") return DistanceMetric::euclidean;
  fail(ErrorKind::validation, "unknown distance metric '" + s + "'");
}

// A trained network plus everything inference needs to reproduce it.
struct ModelCheckpoint {
  ModelRole role = ModelRole::pnet;
  SegmentationModel model;
  NormStats norm;
  DistanceMetric metric = DistanceMetric::geodesic;  // R-Net interaction encoding
  double geodesic_smoothing = 1.0;        // Gaussian sigma (pixels) of the image the geodesic runs on
  double geodesic_intensity_weight = 5.0;  // step cost sqrt(1 + (w * dI)^2), in pixels
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  nlohmann::json history = nlohmann::json::array();
};

inline ModelCheckpoint make_checkpoint(ModelRole role, SegmentationModel model, NormStats norm, std::uint64_t seed,
                                       std::size_t iteration, nlohmann::json history) {
  ModelCheckpoint ck;
  ck.role = role;
  ck.model = std::move(model);
  ck.norm = std::move(norm);
  ck.seed = seed;
  ck.iteration = iteration;
  ck.history = std::move(history);
  return ck;
}

namespace detail {

// Config objects are strict: a misspelt key is an error, not a silent default.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::config, where + ": expected a JSON object");
  for (const auto& item : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return item.key() == k; }))
      fail(ErrorKind::config, where + ": unknown key '" + item.key() + "'");
}

}  // namespace detail

inline nlohmann::json network_config_to_json(const NetworkConfig& c) {
  return {{"image_channels", c.image_channels},
          {"input_channels", c.input_channels},
          {"block_width", c.block_width},
          {"base_dilation", c.base_dilation},
          {"labels", c.labels},
          {"classifier_width", c.hidden_classifier_width()},
          {"multiscale", c.multiscale},
          {"crf", to_string(c.crf)},
          {"crf_config",
           {{"patch_height", c.crf_config.patch_height},
            {"patch_width", c.crf_config.patch_width},
            {"iterations", c.crf_config.iterations},
            {"spacing_y", c.crf_config.spacing_y},
            {"spacing_x", c.crf_config.spacing_x}}}};
}

// Missing keys keep their defaults, so partial configs from --config work too.
inline NetworkConfig network_config_from_json(const nlohmann::json& j, NetworkConfig c = {}) {
  detail::require_known_keys(j, {"image_channels", "input_channels", "block_width", "base_dilation", "labels",
                                 "classifier_width", "multiscale", "crf", "crf_config"}, "network config");
  try {
    c.image_channels = j.value("image_channels", c.image_channels);
    c.input_channels = j.value("input_channels", c.input_channels);
    c.block_width = j.value("block_width", c.block_width);
    c.base_dilation = j.value("base_dilation", c.base_dilation);
    c.labels = j.value("labels", c.labels);
    c.classifier_width = j.value("classifier_width", c.classifier_width);
    c.multiscale = j.value("multiscale", c.multiscale);
    if (j.contains("crf")) c.crf = crf_variant_from_string(j.at("crf").get<std::string>());
    c.crf_config.labels = c.labels;
    if (j.contains("crf_config")) {
      const auto& k = j.at("crf_config");
      detail::require_known_keys(k, {"patch_height", "patch_width", "iterations", "spacing_y", "spacing_x"}, "crf_config");
      c.crf_config.patch_height = k.value("patch_height", c.crf_config.patch_height);
      c.crf_config.patch_width = k.value("patch_width", c.crf_config.patch_width);
      c.crf_config.iterations = k.value("iterations", c.crf_config.iterations);
      c.crf_config.spacing_y = k.value("spacing_y", c.crf_config.spacing_y);
      c.crf_config.spacing_x = k.value("spacing_x", c.crf_config.spacing_x);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

// Builds a model with the right topology; parameter values are placeholders.
inline SegmentationModel model_skeleton(const NetworkConfig& cfg) {
  std::mt19937_64 rng(0);
  return detail::build_model(cfg, rng);
}

inline std::vector<Tensor> snapshot_parameters(const SegmentationModel& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.value());
  return out;
}

inline void restore_parameters(const SegmentationModel& m, const std::vector<Tensor>& values) {
  auto params = m.parameters();
  if (params.size() != values.size()) fail(ErrorKind::shape, "restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != values[i].shape) fail(ErrorKind::shape, "restore: parameter shape mismatch");
    params[i].value() = values[i];
  }
}

inline SegmentationModel clone_model(const SegmentationModel& m) {
  SegmentationModel out = model_skeleton(m.config);
  restore_parameters(out, snapshot_parameters(m));
  return out;
}

// Checkpoint files: <stem>.json manifest and <stem>.bin float32 LE blob.
struct CheckpointFiles {
  fs::path manifest;
  fs::path blob;

  static CheckpointFiles from(const fs::path& path) {
    fs::path stem = path;
    if (stem.extension() == ".json" || stem.extension() == ".bin") stem.replace_extension();
    return {fs::path(stem.string() + ".json"), fs::path(stem.string() + ".bin")};
  }
};

inline std::pair<nlohmann::json, std::string> encode_checkpoint(const ModelCheckpoint& ck,
                                                                const std::string& blob_name) {
  const auto params = ck.model.parameters();
  const auto names = ck.model.parameter_names();
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<Scalar> flat;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i].value();
    tensors.push_back({{"name", names[i]}, {"shape", v.shape}, {"offset", flat.size()}});
    flat.insert(flat.end(), v.data.begin(), v.data.end());
  }
  nlohmann::json j = {{"format", kCheckpointFormat},
                      {"version", kCheckpointVersion},
                      {"role", to_string(ck.role)},
                      {"network", network_config_to_json(ck.model.config)},
                      {"normalization", ck.norm.to_json()},
                      {"distance_metric", to_string(ck.metric)},
                      {"geodesic_smoothing", ck.geodesic_smoothing},
                      {"geodesic_intensity_weight", ck.geodesic_intensity_weight},
                      {"seed", ck.seed},
                      {"iteration", ck.iteration},
                      {"history", ck.history},
                      {"parameter_count", flat.size()},
                      {"blob", blob_name},
                      {"tensors", tensors}};
  return {j, encode_f32(flat)};
}

// Validates the manifest completely before touching the blob.
inline ModelCheckpoint decode_checkpoint(const nlohmann::json& j, const std::function<std::string()>& read_blob) {
  ModelCheckpoint ck;
  std::size_t count = 0;
  std::vector<nlohmann::json> tensors;
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      fail(ErrorKind::validation, "checkpoint: unknown format");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      fail(ErrorKind::validation, "checkpoint: unsupported version " + std::to_string(version));
    const std::string role = j.at("role").get<std::string>();
    if (role != "pnet" && role != "rnet") fail(ErrorKind::validation, "checkpoint: unknown role '" + role + "'");
    ck.role = role == "pnet" ? ModelRole::pnet : ModelRole::rnet;
    ck.model = model_skeleton(network_config_from_json(j.at("network")));
    ck.norm = NormStats::from_json(j.at("normalization"));
    ck.metric = distance_metric_from_string(j.at("distance_metric").get<std::string>());
    ck.geodesic_smoothing = j.at("geodesic_smoothing").get<double>();
    ck.geodesic_intensity_weight = j.at("geodesic_intensity_weight").get<double>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.iteration = j.at("iteration").get<std::size_t>();
    ck.history = j.at("history");
    count = j.at("parameter_count").get<std::size_t>();
    tensors = j.at("tensors").get<std::vector<nlohmann::json>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("checkpoint manifest: ") + e.what());
  }
  if (ck.norm.mean.size() != ck.model.config.image_channels)
    fail(ErrorKind::validation, "checkpoint: normalization channels do not match the network");
  const auto params = ck.model.parameters();
  const auto names = ck.model.parameter_names();
  if (tensors.size() != params.size())
    fail(ErrorKind::validation, "checkpoint: expected " + std::to_string(params.size()) + " tensors, manifest lists " +
                                    std::to_string(tensors.size()));
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    if (t.value("name", "") != names[i] || t.value("shape", std::vector<std::size_t>{}) != params[i].shape() ||
        t.value("offset", std::size_t(-1)) != expected_offset)
      fail(ErrorKind::validation, "checkpoint: tensor " + names[i] + " does not match the declared topology");
    expected_offset += params[i].value().size();
  }
  if (expected_offset != count)
    fail(ErrorKind::validation, "checkpoint: parameter_count disagrees with the topology");
  const std::string blob = read_blob();
  if (blob.size() != count * 4)
    fail(ErrorKind::validation, "checkpoint: blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                                    std::to_string(count * 4));
  const auto flat = decode_f32(blob, count);
  std::size_t offset = 0;
  for (auto& p : params) {
    auto& v = p.value().data;
    std::copy_n(flat.begin() + offset, v.size(), v.begin());
    offset += v.size();
  }
  return ck;
}

inline void save_checkpoint(const fs::path& path, const ModelCheckpoint& ck) {
  const auto files = CheckpointFiles::from(path);
  auto [manifest, blob] = encode_checkpoint(ck, files.blob.filename().string());
  write_file(files.blob, blob);
  write_file(files.manifest, manifest.dump(2) + "\n");
}

inline ModelCheckpoint load_checkpoint(const fs::path& path) {
  const auto files = CheckpointFiles::from(path);
  if (!fs::exists(files.manifest)) fail(ErrorKind::not_found, "checkpoint " + files.manifest.string() + " not found");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(files.manifest));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, "checkpoint manifest " + files.manifest.string() + ": " + e.what());
  }
  fs::path blob_path = files.blob;
  if (manifest.contains("blob") && manifest["blob"].is_string())
    blob_path = files.manifest.parent_path() / manifest["blob"].get<std::string>();
  return decode_checkpoint(manifest, [&] { return read_file(blob_path); });
}

}  // namespace geoseg
