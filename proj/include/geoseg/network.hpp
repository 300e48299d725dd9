#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoseg/crf.hpp"
#include "geoseg/image.hpp"
#include "geoseg/ops.hpp"

namespace geoseg {

// Convolution layers per block (tau_1..tau_5).
inline constexpr std::array<std::size_t, 5> kBlockDepths{2, 2, 3, 3, 3};

// q_i = d * 2^(i-1), blocks numbered 1..5.
inline std::size_t dilation_schedule(std::size_t block, std::size_t base_dilation) {
  if (block < 1 || block > 5) fail(ErrorKind::validation, "block index must be in 1..5");
  if (base_dilation < 1) fail(ErrorKind::config, "base dilation must be >= 1");
  return base_dilation << (block - 1);
}

// R_i = 2 * sum_{j<=i} tau_j * r * q_j + 1
inline std::size_t receptive_field(std::size_t block, std::size_t base_dilation,
                                   std::size_t radius = 1) {
  if (block < 1 || block > 5) fail(ErrorKind::validation, "block index must be in 1..5");
  std::size_t span = 0;
  for (std::size_t j = 1; j <= block; ++j)
    span += kBlockDepths[j - 1] * radius * dilation_schedule(j, base_dilation);
  return 2 * span + 1;
}

enum class CrfVariant {
  none,
  freeform,              // CRF-Net(f)
  freeform_constrained,  // CRF-Net(fu)
};

inline const char* to_string(CrfVariant v) {
  switch (v) {
    case CrfVariant::none: return "none";
    case CrfVariant::freeform: return "f";
    case CrfVariant::freeform_constrained: return "fu";
  }
  return "none";
}

inline CrfVariant crf_variant_from_string(const std::string& s) {
  if (s == "none") return CrfVariant::none;
  if (s == "f") return CrfVariant::freeform;
  if (s == "fu") return CrfVariant::freeform_constrained;
  fail(ErrorKind::validation, "unknown CRF variant '" + s + "'");
}

struct NetworkConfig {
  std::size_t image_channels = 1;  // C_I
  std::size_t input_channels = 1;  // C_I for P-Net, C_I + 3 for R-Net
  std::size_t block_width = 8;     // C
  std::size_t base_dilation = 1;   // d
  std::size_t labels = 2;
  std::size_t classifier_width = 0;  // hidden width of block 6; 0 means C
  bool multiscale = true;            // false builds P-Net(b5): block-5 features only
  CrfVariant crf = CrfVariant::freeform;
  CrfConfig crf_config;

  std::size_t hidden_classifier_width() const {
    return classifier_width ? classifier_width : block_width;
  }
  std::size_t concat_width() const { return multiscale ? 5 * block_width : block_width; }

  void validate() const {
    if (image_channels < 1 || input_channels < image_channels)
      fail(ErrorKind::config, "network: input channels must include the image channels");
    if (block_width < 1) fail(ErrorKind::config, "network: block width must be >= 1");
    if (base_dilation < 1) fail(ErrorKind::config, "network: base dilation must be >= 1");
    if (labels < 2) fail(ErrorKind::config, "network: need at least two labels");
    crf_config.validate();
    if (crf_config.labels != labels) fail(ErrorKind::config, "network: CRF label count mismatch");
  }
};

struct SegmentationModel {
  NetworkConfig config;
  std::vector<ConvKernel> convs;  // blocks 1-5, 13 layers
  ConvKernel classifier_hidden;   // block 6, 1x1
  ConvKernel classifier_out;      // block 6, 1x1
  PairwiseNet pairwise;
  CompatibilityMatrix compatibility;

  std::vector<DiffTensor> cnn_parameters() const {
    std::vector<DiffTensor> out;
    for (const auto& k : convs) {
      out.push_back(k.weights);
      out.push_back(k.bias);
    }
    for (const auto* k : {&classifier_hidden, &classifier_out}) {
      out.push_back(k->weights);
      out.push_back(k->bias);
    }
    return out;
  }

  std::vector<DiffTensor> crf_parameters() const {
    auto out = pairwise.parameters();
    out.push_back(compatibility.mu);
    return out;
  }

  std::vector<DiffTensor> parameters() const {
    auto out = cnn_parameters();
    for (auto& p : crf_parameters()) out.push_back(p);
    return out;
  }

  // Stable names matching parameters() order, used by checkpoints.
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    std::size_t layer = 0;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t l = 0; l < kBlockDepths[b]; ++l, ++layer) {
        const std::string base = "block" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1);
        out.push_back(base + ".weight");
        out.push_back(base + ".bias");
      }
    for (const char* n : {"block6.conv1", "block6.conv2"}) {
      out.push_back(std::string(n) + ".weight");
      out.push_back(std::string(n) + ".bias");
    }
    for (const char* n : {"pairwise.fc1.weight", "pairwise.fc1.bias", "pairwise.fc2.weight",
                          "pairwise.fc2.bias", "pairwise.fc3.weight", "pairwise.fc3.bias",
                          "crf.compatibility"})
      out.push_back(n);
    return out;
  }

  std::size_t conv_layer_count() const { return convs.size() + 2; }
};

namespace detail {

template <class Rng>
SegmentationModel build_model(const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  SegmentationModel model;
  model.config = cfg;
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::size_t q = dilation_schedule(b + 1, cfg.base_dilation);
    for (std::size_t l = 0; l < kBlockDepths[b]; ++l) {
      model.convs.push_back(ConvKernel::he_uniform(cfg.block_width, in, 1, q, rng));
      in = cfg.block_width;
    }
  }
  model.classifier_hidden =
      ConvKernel::he_uniform(cfg.hidden_classifier_width(), cfg.concat_width(), 0, 1, rng);
  model.classifier_out = ConvKernel::he_uniform(cfg.labels, cfg.hidden_classifier_width(), 0, 1, rng);
  model.pairwise = PairwiseNet::he_uniform(cfg.image_channels, rng);
  model.compatibility = CompatibilityMatrix::iverson(cfg.labels);
  return model;
}

}  // namespace detail

// Proposal network: C_I input channels, CRF-Net(f) head.
template <class Rng>
SegmentationModel build_pnet(NetworkConfig cfg, Rng& rng) {
  cfg.input_channels = cfg.image_channels;
  if (cfg.crf != CrfVariant::none) cfg.crf = CrfVariant::freeform;
  return detail::build_model(cfg, rng);
}

// Refinement network: C_I + 3 input channels, CRF-Net(fu) head.
template <class Rng>
SegmentationModel build_rnet(NetworkConfig cfg, Rng& rng) {
  cfg.input_channels = cfg.image_channels + 3;
  if (cfg.crf != CrfVariant::none) cfg.crf = CrfVariant::freeform_constrained;
  return detail::build_model(cfg, rng);
}

struct ForwardOptions {
  bool use_crf = true;                    // false returns softmax(logits) as q
  std::span<const std::int8_t> constraints;  // -1 free; honoured by CRF-Net(fu) only
};

struct SegmentOutput {
  DiffTensor logits;  // block-6 scores [L, H, W]
  DiffTensor q;       // probability field [L, H, W]
  std::vector<DiffTensor> iterates;
};

inline SegmentOutput forward_segment(Tape& tape, const SegmentationModel& model,
                                     const DiffTensor& input, const ForwardOptions& options = {}) {
  const auto& cfg = model.config;
  detail::require_rank(input, 3, "forward_segment");
  if (input.shape()[0] != cfg.input_channels)
    fail(ErrorKind::shape, "forward_segment: model expects " + std::to_string(cfg.input_channels) +
                               " input channels, got " + std::to_string(input.shape()[0]));
  std::vector<DiffTensor> block_outputs;
  DiffTensor x = input;
  std::size_t layer = 0;
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t l = 0; l < kBlockDepths[b]; ++l)
      x = relu(tape, dilated_conv2d(tape, x, model.convs[layer++]));
    block_outputs.push_back(x);
  }
  DiffTensor features = cfg.multiscale ? channel_concat(tape, block_outputs) : block_outputs.back();
  DiffTensor hidden = relu(tape, dilated_conv2d(tape, features, model.classifier_hidden));
  SegmentOutput out;
  out.logits = dilated_conv2d(tape, hidden, model.classifier_out);

  if (!options.use_crf || cfg.crf == CrfVariant::none) {
    out.q = softmax_channels(tape, out.logits);
    out.iterates.push_back(out.q);
    return out;
  }
  const Tensor& in = input.value();
  ImageGrid crf_features(cfg.image_channels, in.dim(1), in.dim(2));
  std::copy_n(in.data.begin(), crf_features.values.size(), crf_features.values.begin());
  crf_features.spacing = {1.0, cfg.crf_config.spacing_y, cfg.crf_config.spacing_x};
  std::span<const std::int8_t> constraints;
  if (cfg.crf == CrfVariant::freeform_constrained) constraints = options.constraints;
  auto mf = mean_field_iterate(tape, out.logits, crf_features, model.pairwise, model.compatibility,
                               cfg.crf_config, constraints);
  out.q = mf.q;
  out.iterates = std::move(mf.iterates);
  return out;
}

// Foreground where Q(1) > Q(0).
inline Mask argmax_mask(const Tensor& q) {
  const std::size_t h = q.dim(1), w = q.dim(2), plane = h * w;
  Mask mask(h, w);
  for (std::size_t i = 0; i < plane; ++i) mask.data[i] = q.data[plane + i] > q.data[i] ? 1 : 0;
  return mask;
}

inline std::vector<Scalar> foreground_probability(const Tensor& q) {
  const std::size_t plane = q.dim(1) * q.dim(2);
  return std::vector<Scalar>(q.data.begin() + plane, q.data.begin() + 2 * plane);
}

}  // namespace geoseg
