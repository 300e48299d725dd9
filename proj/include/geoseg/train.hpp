#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "geoseg/inference.hpp"
#include "geoseg/metrics.hpp"

namespace geoseg {

struct StagePlan {
  std::size_t iterations = 0;
  SgdConfig sgd;
};

// Desk-scale schedule. Stage 1 trains the CNN alone, stage 2 pre-trains the
// Pairwise-Net, stage 3 trains CNN and CRF jointly.
struct TrainPlan {
  StagePlan stage1{8000, {.learning_rate = 1e-3, .momentum = 0.99, .weight_decay = 5e-4,
                          .lr_halving_period_iters = 5000, .minibatch = 1, .clip_norm = 0}};
  PretrainConfig stage2;
  std::size_t pretrain_samples = 100000;
  StagePlan stage3{3000, {.learning_rate = 1e-6, .momentum = 0.99, .weight_decay = 5e-4,
                          .lr_halving_period_iters = 5000, .minibatch = 1, .clip_norm = 0}};
  bool augment = true;
  std::size_t validation_every = 500;

  void validate() const {
    for (const auto* s : {&stage1, &stage3}) {
      s->sgd.validate();
      if (!(s->sgd.learning_rate > 0)) fail(ErrorKind::config, "train plan: learning rates must be > 0");
    }
    stage2.sgd.validate();
    if (!(stage2.sgd.learning_rate > 0)) fail(ErrorKind::config, "train plan: learning rates must be > 0");
    if (validation_every == 0) fail(ErrorKind::config, "train plan: validation_every must be >= 1");
    if (pretrain_samples < 10) fail(ErrorKind::config, "train plan: need at least 10 pre-training samples");
  }
};

namespace detail {

inline nlohmann::json sgd_to_json(const SgdConfig& s) {
  return {{"learning_rate", s.learning_rate}, {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},   {"lr_halving_period_iters", s.lr_halving_period_iters},
          {"minibatch", s.minibatch},         {"clip_norm", s.clip_norm}};
}

inline SgdConfig sgd_from_json(const nlohmann::json& j, SgdConfig s) {
  require_known_keys(j, {"learning_rate", "momentum", "weight_decay", "lr_halving_period_iters", "minibatch", "clip_norm"},
                     "sgd");
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.momentum = j.value("momentum", s.momentum);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.lr_halving_period_iters = j.value("lr_halving_period_iters", s.lr_halving_period_iters);
  s.minibatch = j.value("minibatch", s.minibatch);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  return s;
}

inline StagePlan stage_from_json(const nlohmann::json& j, StagePlan s) {
  require_known_keys(j, {"iterations", "sgd"}, "train stage");
  s.iterations = j.value("iterations", s.iterations);
  if (j.contains("sgd")) s.sgd = sgd_from_json(j.at("sgd"), s.sgd);
  return s;
}

}  // namespace detail

inline nlohmann::json to_json(const TrainPlan& p) {
  return {{"stage1", {{"iterations", p.stage1.iterations}, {"sgd", detail::sgd_to_json(p.stage1.sgd)}}},
          {"stage2",
           {{"samples", p.pretrain_samples},
            {"epochs", p.stage2.epochs},
            {"holdout_fraction", p.stage2.holdout_fraction},
            {"halve_every_epochs", p.stage2.halve_every_epochs},
            {"sgd", detail::sgd_to_json(p.stage2.sgd)}}},
          {"stage3", {{"iterations", p.stage3.iterations}, {"sgd", detail::sgd_to_json(p.stage3.sgd)}}},
          {"augment", p.augment},
          {"validation_every", p.validation_every}};
}

// Overrides from JSON; absent keys keep the defaults.
inline TrainPlan train_plan_from_json(const nlohmann::json& j, TrainPlan p = {}) {
  detail::require_known_keys(j, {"stage1", "stage2", "stage3", "augment", "validation_every"}, "train plan");
  try {
    if (j.contains("stage1")) p.stage1 = detail::stage_from_json(j.at("stage1"), p.stage1);
    if (j.contains("stage3")) p.stage3 = detail::stage_from_json(j.at("stage3"), p.stage3);
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      detail::require_known_keys(s, {"samples", "epochs", "holdout_fraction", "halve_every_epochs", "sgd"}, "stage2");
      p.pretrain_samples = s.value("samples", p.pretrain_samples);
      p.stage2.epochs = s.value("epochs", p.stage2.epochs);
      p.stage2.holdout_fraction = s.value("holdout_fraction", p.stage2.holdout_fraction);
      p.stage2.halve_every_epochs = s.value("halve_every_epochs", p.stage2.halve_every_epochs);
      if (s.contains("sgd")) p.stage2.sgd = detail::sgd_from_json(s.at("sgd"), p.stage2.sgd);
    }
    p.augment = j.value("augment", p.augment);
    p.validation_every = j.value("validation_every", p.validation_every);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("train plan: ") + e.what());
  }
  p.validate();
  return p;
}

using TrainLog = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Generic stage loop: minibatch-1 SGD with periodic validation, keeping the
// best parameters seen on the validation set.

struct StageOutcome {
  double best_validation = 0;
  std::size_t best_iteration = 0;
  std::size_t iterations_run = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct StageSpec {
  std::string name;
  StagePlan plan;
  std::vector<DiffTensor> params;                         // updated by SGD
  std::function<DiffTensor(Tape&, std::size_t)> loss;     // builds the loss for one iteration
  std::function<double()> validate;                       // higher is better
};

inline StageOutcome run_stage(const SegmentationModel& model, StageSpec spec, std::size_t validation_every,
                              nlohmann::json& history, const TrainLog& log) {
  StageOutcome out;
  SgdOptimizer optimizer(spec.plan.sgd);
  auto best = snapshot_parameters(model);
  out.best_validation = spec.validate();
  history.push_back({{"stage", spec.name}, {"iteration", 0}, {"validation_dice", out.best_validation}});
  if (log) log(spec.name + " iter 0 validation dice " + std::to_string(out.best_validation));
  double loss_sum = 0;
  std::size_t loss_count = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 1; it <= spec.plan.iterations; ++it) {
    try {
      Tape tape;
      zero_grads(spec.params);
      DiffTensor loss = spec.loss(tape, it - 1);
      if (!std::isfinite(loss.item()))
        fail(ErrorKind::numeric, "non-finite loss at " + spec.name + " iteration " + std::to_string(it));
      loss_sum += loss.item();
      ++loss_count;
      tape.backward(loss);
      optimizer.step(spec.params, it - 1);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      out.aborted = true;
      out.abort_reason = e.what();
      history.push_back({{"stage", spec.name}, {"iteration", it}, {"aborted", e.what()}});
      if (log) log(spec.name + " aborted: " + e.what() + "; keeping the last good parameters");
      break;
    }
    out.iterations_run = it;
    if (it % validation_every == 0 || it == spec.plan.iterations) {
      const double v = spec.validate();
      const double mean_loss = loss_sum / static_cast<double>(std::max<std::size_t>(loss_count, 1));
      history.push_back({{"stage", spec.name}, {"iteration", it}, {"loss", mean_loss}, {"validation_dice", v}});
      if (log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        char line[160];
        std::snprintf(line, sizeof line, "%s iter %zu loss %.4f validation dice %.4f (%.0fs)", spec.name.c_str(), it,
                      mean_loss, v, secs);
        log(line);
      }
      loss_sum = 0;
      loss_count = 0;
      if (v > out.best_validation) {
        out.best_validation = v;
        out.best_iteration = it;
        best = snapshot_parameters(model);
      }
    }
  }
  restore_parameters(model, best);
  return out;
}

// ---------------------------------------------------------------------------
// P-Net

struct PnetTrainResult {
  ModelCheckpoint plain;  // stage-1 CNN, no CRF
  ModelCheckpoint full;   // after stage 3, with CRF-Net(f)
  PretrainReport pretrain;
  bool aborted = false;
};

inline double mean_dice(const std::vector<Mask>& preds, const std::vector<Sample>& truth) {
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += dice(preds[i], truth[i].truth);
  return preds.empty() ? 0 : s / static_cast<double>(preds.size());
}

inline double pnet_validation_dice(const SegmentationModel& model, const std::vector<Sample>& val, bool use_crf) {
  std::vector<Mask> preds;
  for (const auto& s : val) preds.push_back(run_network(model, s.image.to_tensor(), use_crf).mask);
  return mean_dice(preds, val);
}

// `train` and `validation` hold raw images; statistics come from `train`.
inline PnetTrainResult train_pnet(const std::vector<Sample>& train, const std::vector<Sample>& validation,
                                  const TrainPlan& plan, NetworkConfig net, std::uint64_t seed,
                                  const TrainLog& log = {}) {
  if (train.empty() || validation.empty()) fail(ErrorKind::validation, "train_pnet: empty training or validation set");
  plan.validate();
  const NormStats norm = compute_norm_stats(train);
  const auto tr = normalize_dataset(train, norm), val = normalize_dataset(validation, norm);
  net.image_channels = train.front().image.channels;
  net.crf = CrfVariant::freeform;
  std::mt19937_64 rng(seed);
  SegmentationModel model = build_pnet(net, rng);

  PnetTrainResult result;
  nlohmann::json history = nlohmann::json::array();
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  auto next_sample = [&]() -> Sample {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const Sample& s = tr[order[cursor++]];
    return plan.augment ? augment(s, rng) : s;
  };
  auto make_loss = [&](bool use_crf) {
    return [&, use_crf](Tape& tape, std::size_t) {
      const Sample s = next_sample();
      ForwardOptions opts;
      opts.use_crf = use_crf;
      auto out = forward_segment(tape, model, DiffTensor::constant(s.image.to_tensor()), opts);
      return cross_entropy_loss(tape, out.q, s.truth.data);
    };
  };

  // Stage 1: CNN alone.
  auto s1 = run_stage(model,
                      {"pnet.stage1", plan.stage1, model.cnn_parameters(), make_loss(false),
                       [&] { return pnet_validation_dice(model, val, false); }},
                      plan.validation_every, history, log);
  result.aborted = s1.aborted;
  result.plain = make_checkpoint(ModelRole::pnet, clone_model(model), norm, seed, s1.best_iteration, history);
  result.plain.model.config.crf = CrfVariant::none;

  // Stage 2: Pairwise-Net pre-training on contrast-sensitive targets.
  if (!result.aborted) {
    const auto set = generate_pretrain_set(net.image_channels, plan.pretrain_samples, rng);
    model.pairwise = pretrain_pairwise_net(set, plan.stage2, rng, &result.pretrain);
    history.push_back({{"stage", "pnet.stage2"}, {"holdout_mse", result.pretrain.holdout_mse},
                       {"final_epoch_loss", result.pretrain.epoch_loss.empty() ? 0.0 : result.pretrain.epoch_loss.back()}});
    if (log) log("pnet.stage2 pairwise holdout mse " + std::to_string(result.pretrain.holdout_mse));
  }

  // Stage 3: joint CNN + CRF-Net(f).
  std::size_t iteration = s1.iterations_run;
  if (!result.aborted) {
    auto s3 = run_stage(model,
                        {"pnet.stage3", plan.stage3, model.parameters(), make_loss(true),
                         [&] { return pnet_validation_dice(model, val, true); }},
                        plan.validation_every, history, log);
    result.aborted = s3.aborted;
    iteration += s3.iterations_run;
  }
  result.full = make_checkpoint(ModelRole::pnet, std::move(model), norm, seed, iteration, history);
  return result;
}

// ---------------------------------------------------------------------------
// R-Net

// Deterministic per-sample click stream, shared by validation and evaluation
// so every compared method sees the same interactions.
inline std::mt19937_64 click_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0xc11c5u};
  return std::mt19937_64(seq);
}

struct RefinementCase {
  ImageGrid normalized;
  std::vector<Scalar> initial;  // P-Net + CRF-Net(f) foreground probability
  Mask initial_mask;
  ScribbleSet clicks;
};

// One simulated refinement round per sample against the P-Net proposal.
inline std::vector<RefinementCase> refinement_cases(const ModelCheckpoint& pnet, const std::vector<Sample>& raw,
                                                    std::uint64_t click_seed) {
  std::vector<RefinementCase> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const Segmentation seg = propose(pnet, raw[i].image, true);
    auto rng = click_rng(click_seed, i);
    out.push_back({normalize_image(raw[i].image, pnet.norm), seg.foreground(), seg.mask,
                   simulate_interactions(seg.mask, raw[i].truth, rng)});
  }
  return out;
}

inline double rnet_validation_dice(const ModelCheckpoint& rnet, const std::vector<RefinementCase>& cases,
                                   const std::vector<Sample>& raw, bool use_crf) {
  std::vector<Mask> preds;
  for (const auto& c : cases)
    preds.push_back(refine_normalized(rnet, c.normalized, c.initial, c.clicks, use_crf).mask);
  return mean_dice(preds, raw);
}

struct RnetTrainResult {
  ModelCheckpoint model;
  bool aborted = false;
};

// Trains R-Net + CRF-Net(fu) with one simulated interaction round per
// iteration. The Pairwise-Net starts from the P-Net's trained one.
inline RnetTrainResult train_rnet(const std::vector<Sample>& train, const std::vector<Sample>& validation,
                                  const ModelCheckpoint& pnet, const TrainPlan& plan, DistanceMetric metric,
                                  std::uint64_t seed, const TrainLog& log = {}, const EncodingOptions* encoding = nullptr) {
  if (train.empty() || validation.empty()) fail(ErrorKind::validation, "train_rnet: empty training or validation set");
  if (pnet.role != ModelRole::pnet) fail(ErrorKind::validation, "train_rnet: expected a P-Net checkpoint");
  plan.validate();
  const NormStats& norm = pnet.norm;
  NetworkConfig net = pnet.model.config;
  net.crf = CrfVariant::freeform_constrained;
  std::mt19937_64 rng(seed);
  ModelCheckpoint ck = make_checkpoint(ModelRole::rnet, build_rnet(net, rng), norm, seed, 0, nlohmann::json::array());
  ck.metric = metric;
  if (encoding) {
    ck.geodesic_smoothing = encoding->smoothing;
    ck.geodesic_intensity_weight = encoding->intensity_weight;
  }
  ck.model.pairwise = pnet.model.pairwise.clone();
  SegmentationModel& model = ck.model;

  // Joint augmentation works on [image, proposal] as one multi-channel grid.
  struct Item {
    ImageGrid stacked;
    Mask truth;
  };
  std::vector<Item> items;
  for (const auto& s : train) {
    const Segmentation seg = propose(pnet, s.image, true);
    const ImageGrid img = normalize_image(s.image, norm);
    Item it{ImageGrid(img.channels + 1, img.height, img.width), s.truth};
    std::copy(img.values.begin(), img.values.end(), it.stacked.values.begin());
    const auto fg = seg.foreground();
    std::copy(fg.begin(), fg.end(), it.stacked.values.begin() + img.values.size());
    items.push_back(std::move(it));
  }
  const auto val_cases = refinement_cases(pnet, validation, seed ^ 0x7a11dull);
  if (log) {
    std::vector<Mask> init;
    for (const auto& c : val_cases) init.push_back(c.initial_mask);
    log("rnet validation proposal dice " + std::to_string(mean_dice(init, validation)));
  }

  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  auto make_loss = [&](bool use_crf) {
    return [&, use_crf](Tape& tape, std::size_t) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      Item it = items[order[cursor++]];
      if (plan.augment) augment_in_place(it.stacked, {&it.truth}, draw_augment(rng));
      const std::size_t c = it.stacked.channels - 1, plane = it.stacked.height * it.stacked.width;
      ImageGrid img(c, it.stacked.height, it.stacked.width);
      std::copy_n(it.stacked.values.begin(), c * plane, img.values.begin());
      std::vector<Scalar> prob(it.stacked.values.begin() + c * plane, it.stacked.values.end());
      Mask pred(img.height, img.width);
      for (std::size_t i = 0; i < plane; ++i) pred.data[i] = prob[i] > 0.5;
      const ScribbleSet clicks = simulate_interactions(pred, it.truth, rng);
      const auto labels = clicks.label_map(img.height, img.width);
      ForwardOptions opts;
      opts.use_crf = use_crf;
      opts.constraints = labels;
      auto out = forward_segment(tape, model, DiffTensor::constant(rnet_input(img, prob, clicks, EncodingOptions::of(ck), rng)), opts);
      return cross_entropy_loss(tape, out.q, it.truth.data);
    };
  };

  const std::string tag = std::string("rnet.") + to_string(metric);
  auto s1 = run_stage(model,
                      {tag + ".stage1", plan.stage1, model.cnn_parameters(), make_loss(false),
                       [&] { return rnet_validation_dice(ck, val_cases, validation, false); }},
                      plan.validation_every, ck.history, log);
  RnetTrainResult result;
  result.aborted = s1.aborted;
  ck.iteration = s1.iterations_run;
  if (!result.aborted) {
    auto s3 = run_stage(model,
                        {tag + ".stage3", plan.stage3, model.parameters(), make_loss(true),
                         [&] { return rnet_validation_dice(ck, val_cases, validation, true); }},
                        plan.validation_every, ck.history, log);
    result.aborted = s3.aborted;
    ck.iteration += s3.iterations_run;
  }
  result.model = std::move(ck);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation protocol: proposals, then one simulated refinement round from
// the P-Net + CRF-Net(f) proposal with identical clicks for every R-Net.

struct EvalModels {
  const ModelCheckpoint* pnet_plain = nullptr;
  const ModelCheckpoint* pnet = nullptr;
  std::vector<std::pair<std::string, const ModelCheckpoint*>> rnets;
};

inline EvalReport evaluate(const std::vector<Sample>& test, const EvalModels& models, std::uint64_t click_seed) {
  if (!models.pnet) fail(ErrorKind::unavailable, "evaluate: a P-Net checkpoint is required");
  EvalReport report;
  for (const auto& s : test) report.sample_ids.push_back(s.id);
  const std::string pnet_name = "P-Net + CRF-Net(f)";
  report.reference = pnet_name;
  if (models.pnet_plain) {
    report.add_method("P-Net");
    for (const auto& s : test) report.add_sample(report.methods.back(), propose(*models.pnet_plain, s.image, false).mask, s.truth);
  }
  const auto cases = refinement_cases(*models.pnet, test, click_seed);
  report.add_method(pnet_name);
  for (std::size_t i = 0; i < test.size(); ++i) report.add_sample(report.methods.back(), cases[i].initial_mask, test[i].truth);
  for (const auto& [name, rnet] : models.rnets) {
    report.add_method(name);
    for (std::size_t i = 0; i < test.size(); ++i)
      report.add_sample(report.methods.back(),
                        refine_normalized(*rnet, cases[i].normalized, cases[i].initial, cases[i].clicks).mask,
                        test[i].truth);
  }
  return report;
}

}  // namespace geoseg
