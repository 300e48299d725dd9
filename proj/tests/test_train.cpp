#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <unistd.h>

#include "geoseg/train.hpp"

using namespace geoseg;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("geoseg_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

NetworkConfig small_net() {
  NetworkConfig c;
  c.block_width = 3;
  return c;
}

SynthConfig small_synth() {
  SynthConfig c;
  c.height = c.width = 32;
  return c;
}

TrainPlan tiny_plan() {
  TrainPlan p;
  p.stage1.iterations = 12;
  p.stage3.iterations = 3;
  p.pretrain_samples = 200;
  p.stage2.epochs = 2;
  p.validation_every = 4;
  return p;
}

ModelCheckpoint random_checkpoint(ModelRole role, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NetworkConfig cfg = small_net();
  ModelCheckpoint ck = make_checkpoint(role, role == ModelRole::pnet ? build_pnet(cfg, rng) : build_rnet(cfg, rng),
                                       {{0.4}, {0.12}}, seed, 17, nlohmann::json::array({{{"stage", "x"}}}));
  // Make biases nonzero so the round trip covers every tensor.
  for (auto& p : ck.model.parameters())
    for (auto& v : p.value().data) v += std::uniform_real_distribution<double>(-0.01, 0.01)(rng);
  return ck;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch_dir("ckpt");
  const auto ck = random_checkpoint(ModelRole::rnet, 3);
  save_checkpoint(dir / "a", ck);
  const ModelCheckpoint loaded = load_checkpoint(dir / "a.json");
  save_checkpoint(dir / "b", loaded);
  EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));
  // Manifests differ only in the blob file name.
  auto ma = nlohmann::json::parse(read_file(dir / "a.json")), mb = nlohmann::json::parse(read_file(dir / "b.json"));
  ma.erase("blob");
  mb.erase("blob");
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(loaded.role, ModelRole::rnet);
  EXPECT_EQ(loaded.model.config.input_channels, 4u);
  EXPECT_EQ(loaded.iteration, 17u);
  EXPECT_EQ(loaded.norm.mean, ck.norm.mean);
  EXPECT_EQ(read_file(dir / "a.bin").size(), ma["parameter_count"].get<std::size_t>() * 4);
  fs::remove_all(dir);
}

TEST(Checkpoint, LoadedModelReproducesLogits) {
  const fs::path dir = scratch_dir("logits");
  const auto ck = random_checkpoint(ModelRole::pnet, 5);
  save_checkpoint(dir / "p", ck);
  const auto loaded = load_checkpoint(dir / "p");
  const auto sample = synth_sample(1, 0, small_synth());
  const Tensor input = normalize_image(sample.image, ck.norm).to_tensor();
  Tape t1, t2;
  t1.set_recording(false);
  t2.set_recording(false);
  const auto a = forward_segment(t1, ck.model, DiffTensor::constant(input)).logits.value();
  const auto b = forward_segment(t2, loaded.model, DiffTensor::constant(input)).logits.value();
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  EXPECT_LT(worst, 1e-6);
  EXPECT_GT(worst, 0.0);  // parameters really were rounded to float32
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const fs::path dir = scratch_dir("corrupt");
  save_checkpoint(dir / "c", random_checkpoint(ModelRole::pnet, 7));
  const std::string blob = read_file(dir / "c.bin"), manifest = read_file(dir / "c.json");

  write_file(dir / "c.bin", blob.substr(0, blob.size() - 4));
  EXPECT_THROW(load_checkpoint(dir / "c"), Error);
  write_file(dir / "c.bin", blob);

  auto j = nlohmann::json::parse(manifest);
  j["version"] = 99;
  write_file(dir / "c.json", j.dump());
  try {
    load_checkpoint(dir / "c");
    FAIL() << "unknown version accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  // The manifest is validated before the blob is read.
  j = nlohmann::json::parse(manifest);
  j["network"]["block_width"] = 4;
  write_file(dir / "c.json", j.dump());
  fs::remove(dir / "c.bin");
  try {
    load_checkpoint(dir / "c");
    FAIL() << "topology mismatch accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing"), Error);
  fs::remove_all(dir);
}

TEST(TrainPlan, DefaultsAndJsonOverrides) {
  const TrainPlan p;
  EXPECT_EQ(p.stage1.iterations, 8000u);
  EXPECT_EQ(p.stage1.sgd.learning_rate, 1e-3);
  EXPECT_EQ(p.stage3.sgd.learning_rate, 1e-6);
  EXPECT_EQ(p.stage3.iterations, 3000u);
  const TrainPlan q = train_plan_from_json({{"stage3", {{"iterations", 10}}}, {"augment", false}});
  EXPECT_EQ(q.stage3.iterations, 10u);
  EXPECT_EQ(q.stage3.sgd.learning_rate, 1e-6);
  EXPECT_FALSE(q.augment);
  EXPECT_EQ(train_plan_from_json(to_json(q)).stage3.iterations, 10u);
  EXPECT_THROW(train_plan_from_json({{"stage1", {{"sgd", {{"learning_rate", 0.0}}}}}}), Error);
}

TEST(Inference, RejectsTinyImagesAndIsDeterministic) {
  const auto ck = random_checkpoint(ModelRole::pnet, 9);
  EXPECT_THROW(propose(ck, ImageGrid(1, 1, 1)), Error);
  EXPECT_THROW(propose(ck, ImageGrid(2, 40, 40)), Error);
  const auto s = synth_sample(2, 0, small_synth());
  const auto a = propose(ck, s.image), b = propose(ck, s.image);
  EXPECT_EQ(a.q.data, b.q.data);
  EXPECT_EQ(a.mask, b.mask);
}

TEST(Inference, RnetInputChannelsAndScales) {
  const auto s = synth_sample(4, 0, small_synth());
  const NormStats st = compute_norm_stats({s});
  const ImageGrid img = normalize_image(s.image, st);
  std::vector<Scalar> prob(32 * 32, 0.5);
  ScribbleSet clicks{{{10, 10}}, {{0, 31}, {31, 0}}};
  std::mt19937_64 rng(1);
  EncodingOptions euc{DistanceMetric::euclidean, 1.0, 5.0}, geo{DistanceMetric::geodesic, 1.0, 5.0};
  const Tensor e = rnet_input(img, prob, clicks, euc, rng), g = rnet_input(img, prob, clicks, geo, rng);
  ASSERT_EQ(e.dim(0), 4u);
  const std::size_t plane = 32 * 32;
  for (std::size_t i = 0; i < plane; ++i) {
    EXPECT_EQ(e.data[i], img.values[i]);  // image channel is the normalized image
    EXPECT_EQ(g.data[i], img.values[i]);
    EXPECT_EQ(e.data[plane + i], 0.5);
    for (std::size_t c : {2u, 3u}) {
      const Scalar ev = e.data[c * plane + i], gv = g.data[c * plane + i];
      EXPECT_GE(ev, 0);
      EXPECT_LE(ev, 1.0);  // diagonal-normalized
      EXPECT_GE(gv, ev - 1e-12);  // unit spatial term bounds the geodesic below
    }
  }
  EXPECT_EQ(e.data[2 * plane + 10 * 32 + 10], 0);
  EXPECT_EQ(g.data[3 * plane + 31 * 32], 0);
}

TEST(Inference, RefineEnforcesScribbles) {
  const auto ck = random_checkpoint(ModelRole::rnet, 11);
  const auto s = synth_sample(6, 0, small_synth());
  std::vector<Scalar> prob(32 * 32, 0.3);
  ScribbleSet clicks{{{3, 3}, {20, 9}}, {{15, 15}}};
  const auto seg = refine(ck, s.image, prob, clicks);
  EXPECT_EQ(seg.mask.at(3, 3), 1);
  EXPECT_EQ(seg.mask.at(20, 9), 1);
  EXPECT_EQ(seg.mask.at(15, 15), 0);
  EXPECT_EQ(seg.q.data[1024 + 3 * 32 + 3], 1.0);
  EXPECT_EQ(seg.q.data[15 * 32 + 15], 1.0);
  const auto again = refine(ck, s.image, prob, clicks);
  EXPECT_EQ(again.q.data, seg.q.data);
}

TEST(TrainPnet, DeterministicWithBestRestore) {
  const auto train = synth_dataset(1, 4, small_synth()), val = synth_dataset(1, 2, small_synth(), 100);
  const auto plan = tiny_plan();
  const auto a = train_pnet(train, val, plan, small_net(), 5);
  const auto b = train_pnet(train, val, plan, small_net(), 5);
  EXPECT_EQ(a.full.history, b.full.history);
  EXPECT_FALSE(a.aborted);
  EXPECT_EQ(a.plain.model.config.crf, CrfVariant::none);
  EXPECT_EQ(a.full.model.config.crf, CrfVariant::freeform);
  EXPECT_EQ(a.full.iteration, 15u);
  // The restored stage-3 model scores the best validation Dice in its history.
  double best = 0;
  for (const auto& h : a.full.history)
    if (h.value("stage", "") == "pnet.stage3") best = std::max(best, h.value("validation_dice", 0.0));
  const auto tr_val = normalize_dataset(val, a.full.norm);
  EXPECT_NEAR(pnet_validation_dice(a.full.model, tr_val, true), best, 1e-12);
  // Normalization statistics come from the training set.
  EXPECT_NEAR(a.full.norm.mean[0], compute_norm_stats(train).mean[0], 1e-15);
}

TEST(TrainPnet, NonFiniteLossAbortsWithLastGoodParameters) {
  const auto train = synth_dataset(2, 3, small_synth()), val = synth_dataset(2, 2, small_synth(), 100);
  auto plan = tiny_plan();
  plan.stage1.sgd.learning_rate = 1e12;
  plan.stage1.sgd.momentum = 0;
  const auto r = train_pnet(train, val, plan, small_net(), 3);
  EXPECT_TRUE(r.aborted);
  bool recorded = false;
  for (const auto& h : r.full.history) recorded |= h.contains("aborted");
  EXPECT_TRUE(recorded);
  for (const auto& p : r.full.model.parameters()) EXPECT_TRUE(p.value().all_finite());
}

TEST(TrainRnet, ShortRunProducesConstrainedRefiner) {
  const auto train = synth_dataset(3, 4, small_synth()), val = synth_dataset(3, 2, small_synth(), 100);
  const auto plan = tiny_plan();
  const auto p = train_pnet(train, val, plan, small_net(), 5);
  const auto r = train_rnet(train, val, p.full, plan, DistanceMetric::euclidean, 6);
  EXPECT_FALSE(r.aborted);
  EXPECT_EQ(r.model.role, ModelRole::rnet);
  EXPECT_EQ(r.model.metric, DistanceMetric::euclidean);
  EXPECT_EQ(r.model.model.config.input_channels, 4u);
  EXPECT_EQ(r.model.model.config.crf, CrfVariant::freeform_constrained);
  EXPECT_EQ(r.model.norm.mean, p.full.norm.mean);
  const auto r2 = train_rnet(train, val, p.full, plan, DistanceMetric::euclidean, 6);
  EXPECT_EQ(r.model.history, r2.model.history);

  EvalModels models{&p.plain, &p.full, {{"R-Net", &r.model}}};
  const EvalReport report = evaluate(val, models, 1);
  ASSERT_EQ(report.methods.size(), 3u);
  EXPECT_EQ(report.methods[0].dice.size(), 2u);
  EXPECT_THROW(train_rnet(train, val, r.model, plan, DistanceMetric::geodesic, 1), Error);
}

TEST(Evaluate, ClickStreamsAreSharedAcrossMethods) {
  auto a = click_rng(3, 7), b = click_rng(3, 7), c = click_rng(3, 8);
  EXPECT_EQ(a(), b());
  EXPECT_NE(a(), c());
}
