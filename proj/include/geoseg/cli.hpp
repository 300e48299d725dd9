#pragma once

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "geoseg/http.hpp"
#include "geoseg/train.hpp"

namespace geoseg {

// Exit codes: 0 success, 2 invalid input or usage, 1 runtime failure.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation:
    case ErrorKind::config:
    case ErrorKind::shape:
    case ErrorKind::not_found: return 2;
    default: return 1;
  }
}

// Sections of the --config file: "synth", "network", "train", "encoding".
struct RunConfig {
  SynthConfig synth;
  NetworkConfig network;
  TrainPlan plan;
  EncodingOptions encoding;
  double validation_fraction = 0.1;  // split off the training data when no validation set is given

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::require_known_keys(j, {"synth", "network", "train", "encoding", "validation_fraction"}, "config");
    try {
      if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::require_known_keys(s, {"height", "width", "min_fraction", "max_fraction", "contrast_lo", "contrast_hi",
                                       "noise_lo", "noise_hi", "background_lo", "background_hi", "bias_amplitude",
                                       "boundary_wobble"}, "synth");
        c.synth.height = s.value("height", c.synth.height);
        c.synth.width = s.value("width", c.synth.width);
        c.synth.min_fraction = s.value("min_fraction", c.synth.min_fraction);
        c.synth.max_fraction = s.value("max_fraction", c.synth.max_fraction);
        c.synth.contrast_lo = s.value("contrast_lo", c.synth.contrast_lo);
        c.synth.contrast_hi = s.value("contrast_hi", c.synth.contrast_hi);
        c.synth.noise_lo = s.value("noise_lo", c.synth.noise_lo);
        c.synth.noise_hi = s.value("noise_hi", c.synth.noise_hi);
        c.synth.bias_amplitude = s.value("bias_amplitude", c.synth.bias_amplitude);
        c.synth.boundary_wobble = s.value("boundary_wobble", c.synth.boundary_wobble);
        c.synth.background_lo = s.value("background_lo", c.synth.background_lo);
        c.synth.background_hi = s.value("background_hi", c.synth.background_hi);
      }
      if (j.contains("network")) c.network = network_config_from_json(j.at("network"));
      if (j.contains("train")) c.plan = train_plan_from_json(j.at("train"));
      if (j.contains("encoding")) {
        const auto& e = j.at("encoding");
        detail::require_known_keys(e, {"smoothing", "intensity_weight"}, "encoding");
        c.encoding.smoothing = e.value("smoothing", c.encoding.smoothing);
        c.encoding.intensity_weight = e.value("intensity_weight", c.encoding.intensity_weight);
      }
      c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config, std::string("config: ") + e.what());
    }
    if (!(c.validation_fraction > 0 && c.validation_fraction < 1))
      fail(ErrorKind::config, "config: validation_fraction must be in (0, 1)");
    return c;
  }
};

namespace detail {

inline nlohmann::json read_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, path.string() + ": " + e.what());
  }
}

// Training data plus a validation set (given, or split off the tail).
inline std::pair<std::vector<Sample>, std::vector<Sample>> train_and_validation(const std::string& data,
                                                                               const std::string& validation,
                                                                               double fraction) {
  auto train = load_dataset(data);
  if (!validation.empty()) return {std::move(train), load_dataset(validation)};
  if (train.size() < 2) fail(ErrorKind::validation, "need at least 2 samples to split off a validation set");
  const std::size_t n_val = std::clamp<std::size_t>(static_cast<std::size_t>(train.size() * fraction), 1, train.size() - 1);
  std::vector<Sample> val(train.end() - static_cast<std::ptrdiff_t>(n_val), train.end());
  train.resize(train.size() - n_val);
  return {std::move(train), std::move(val)};
}

inline ModelCheckpoint load_role(const std::string& path, ModelRole role) {
  ModelCheckpoint ck = load_checkpoint(path);
  if (ck.role != role)
    fail(ErrorKind::validation, "checkpoint " + path + " is a " + to_string(ck.role) + ", expected " + to_string(role));
  return ck;
}

inline void write_segmentation(const fs::path& out, const ImageGrid& image, const Segmentation& seg) {
  save_mask(out / "mask.pgm", seg.mask);
  ImageGrid prob(1, image.height, image.width);
  prob.values = round_to_float(seg.foreground());
  save_volume(out / "probability.f32", prob);
}

}  // namespace detail

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Interactive segmentation with geodesic refinement and a trainable CRF", "geoseg"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  std::string config_path, out_dir = ".";
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();

  // synth
  std::size_t count = 10, first_index = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--count", count, "Number of samples")->capture_default_str();
  synth->add_option("--first-index", first_index, "Index of the first sample")->capture_default_str();

  // pretrain-pairwise
  auto* pretrain = app.add_subcommand("pretrain-pairwise", "Fit the Pairwise-Net to contrast-sensitive targets");
  std::size_t feature_dim = 1;
  pretrain->add_option("--features", feature_dim, "Feature dimension")->capture_default_str();

  // train-pnet / train-rnet
  std::string data, validation, pnet_path, metric_name = "geodesic";
  auto* train_p = app.add_subcommand("train-pnet", "Three-stage P-Net + CRF-Net(f) training");
  train_p->add_option("--data", data, "Training dataset directory")->required();
  train_p->add_option("--validation", validation, "Validation dataset directory");
  auto* train_r = app.add_subcommand("train-rnet", "R-Net + CRF-Net(fu) training with simulated interactions");
  train_r->add_option("--data", data, "Training dataset directory")->required();
  train_r->add_option("--validation", validation, "Validation dataset directory");
  train_r->add_option("--pnet", pnet_path, "P-Net checkpoint")->required();
  train_r->add_option("--metric", metric_name, "Distance encoding")
      ->check(CLI::IsMember({"geodesic", "euclidean"}))
      ->capture_default_str();

  // segment / refine
  std::string image_path, ckpt_path, scribble_path, initial_path;
  bool no_crf = false;
  auto* segment = app.add_subcommand("segment", "P-Net proposal for one image");
  segment->add_option("--image", image_path, "Image (.pgm or .f32)")->required();
  segment->add_option("--ckpt", ckpt_path, "P-Net checkpoint")->required();
  segment->add_flag("--no-crf", no_crf, "Skip the CRF");
  auto* refine_cmd = app.add_subcommand("refine", "One R-Net refinement round");
  refine_cmd->add_option("--image", image_path, "Image (.pgm or .f32)")->required();
  refine_cmd->add_option("--ckpt", ckpt_path, "R-Net checkpoint")->required();
  refine_cmd->add_option("--scribbles", scribble_path, "Scribble JSON {\"scribbles\": [{y, x, label}]}")->required();
  refine_cmd->add_option("--initial", initial_path, "Current probability map (default <out>/probability.f32)");

  // eval
  std::string pnet_plain_path;
  std::vector<std::string> rnet_specs;
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on a dataset");
  eval->add_option("--data", data, "Test dataset directory")->required();
  eval->add_option("--pnet", pnet_path, "P-Net + CRF-Net(f) checkpoint")->required();
  eval->add_option("--pnet-plain", pnet_plain_path, "Stage-1 P-Net checkpoint (no CRF)");
  eval->add_option("--rnet", rnet_specs, "R-Net checkpoint as NAME=PATH (repeatable)");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP session service");
  ServeOptions serve_opts;
  std::optional<int> port;
  std::string model_dir, store_dir, host = "127.0.0.1";
  serve_cmd->add_option("--port", port, "Port (default GEOSEG_PORT or 8080)");
  serve_cmd->add_option("--models", model_dir, "Model directory (default GEOSEG_MODEL_DIR)");
  serve_cmd->add_option("--store", store_dir, "Session directory (default GEOSEG_STORE_DIR or ./sessions)");
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  auto log = [&err](const std::string& line) { err << line << std::endl; };
  try {
    const RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_json(detail::read_json_file(config_path));
    const fs::path outp(out_dir);

    if (*synth) {
      const auto samples = synth_dataset(seed, count, cfg.synth, first_index);
      save_dataset(outp, samples, {{"seed", seed}, {"first_index", first_index}});
      out << nlohmann::json{{"count", samples.size()}, {"dir", outp.string()}}.dump() << "\n";
    } else if (*pretrain) {
      std::mt19937_64 rng(seed);
      const auto set = generate_pretrain_set(feature_dim, cfg.plan.pretrain_samples, rng);
      PretrainReport report;
      const PairwiseNet net = pretrain_pairwise_net(set, cfg.plan.stage2, rng, &report);
      nlohmann::json params = nlohmann::json::object();
      const char* names[] = {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"};
      const auto ps = net.parameters();
      for (std::size_t i = 0; i < ps.size(); ++i)
        params[names[i]] = {{"shape", ps[i].shape()}, {"values", ps[i].value().data}};
      const nlohmann::json summary = {{"holdout_mse", report.holdout_mse},
                                      {"train_count", report.train_count},
                                      {"holdout_count", report.holdout_count},
                                      {"epoch_loss", report.epoch_loss}};
      write_file(outp / "pairwise.json",
                 nlohmann::json{{"feature_dim", feature_dim}, {"seed", seed}, {"report", summary}, {"parameters", params}}.dump(2) + "\n");
      out << nlohmann::json{{"holdout_mse", report.holdout_mse}}.dump() << "\n";
    } else if (*train_p) {
      auto [tr, val] = detail::train_and_validation(data, validation, cfg.validation_fraction);
      auto result = train_pnet(tr, val, cfg.plan, cfg.network, seed, log);
      save_checkpoint(outp / "pnet_plain", result.plain);
      save_checkpoint(outp / "pnet", result.full);
      out << nlohmann::json{{"checkpoint", (outp / "pnet.json").string()},
                            {"aborted", result.aborted},
                            {"pairwise_holdout_mse", result.pretrain.holdout_mse}}.dump()
          << "\n";
      if (result.aborted) return 1;
    } else if (*train_r) {
      auto [tr, val] = detail::train_and_validation(data, validation, cfg.validation_fraction);
      const ModelCheckpoint pnet = detail::load_role(pnet_path, ModelRole::pnet);
      EncodingOptions enc = cfg.encoding;
      enc.metric = distance_metric_from_string(metric_name);
      auto result = train_rnet(tr, val, pnet, cfg.plan, enc.metric, seed, log, &enc);
      const std::string name = enc.metric == DistanceMetric::geodesic ? "rnet" : "rnet_euclidean";
      save_checkpoint(outp / name, result.model);
      out << nlohmann::json{{"checkpoint", (outp / (name + ".json")).string()}, {"aborted", result.aborted}}.dump() << "\n";
      if (result.aborted) return 1;
    } else if (*segment) {
      const ImageGrid image = as_float32(load_image(image_path));
      const Segmentation seg = propose(detail::load_role(ckpt_path, ModelRole::pnet), image, !no_crf);
      detail::write_segmentation(outp, image, seg);
      out << nlohmann::json{{"mask", (outp / "mask.pgm").string()}, {"foreground_pixels", seg.mask.count()}}.dump() << "\n";
    } else if (*refine_cmd) {
      const ImageGrid image = as_float32(load_image(image_path));
      const fs::path initial = initial_path.empty() ? outp / "probability.f32" : fs::path(initial_path);
      const ImageGrid prob = load_volume(initial);
      if (prob.height != image.height || prob.width != image.width || prob.channels != 1)
        fail(ErrorKind::validation, "initial probability map does not match the image");
      const ScribbleSet scribbles = accumulate_scribbles(scribbles_from_json(detail::read_json_file(scribble_path)));
      const Segmentation seg = refine(detail::load_role(ckpt_path, ModelRole::rnet), image, prob.values, scribbles, true);
      detail::write_segmentation(outp, image, seg);
      out << nlohmann::json{{"mask", (outp / "mask.pgm").string()}, {"foreground_pixels", seg.mask.count()}}.dump() << "\n";
    } else if (*eval) {
      const auto test = load_dataset(data);
      std::vector<ModelCheckpoint> loaded;
      loaded.reserve(2 + rnet_specs.size());
      EvalModels models;
      loaded.push_back(load_checkpoint(pnet_path));
      models.pnet = &loaded.back();
      if (!pnet_plain_path.empty()) {
        loaded.push_back(load_checkpoint(pnet_plain_path));
        models.pnet_plain = &loaded.back();
      }
      for (const auto& spec : rnet_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) fail(ErrorKind::validation, "--rnet expects NAME=PATH, got '" + spec + "'");
        loaded.push_back(load_checkpoint(spec.substr(eq + 1)));
        models.rnets.push_back({spec.substr(0, eq), &loaded.back()});
      }
      const EvalReport report = evaluate(test, models, seed);
      write_file(outp / "eval.json", report.to_json().dump(2) + "\n");
      out << report.to_table();
    } else if (*serve_cmd) {
      serve_opts = ServeOptions::from_env();
      if (port) serve_opts.port = *port;
      if (!model_dir.empty()) serve_opts.model_dir = model_dir;
      if (!store_dir.empty()) serve_opts.store_dir = store_dir;
      serve_opts.host = host;
      serve(serve_opts, log);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace geoseg
