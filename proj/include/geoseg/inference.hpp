#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "geoseg/checkpoint.hpp"

namespace geoseg {

// Fixed stream for the noise that fills an empty scribble-class channel, so
// every caller (CLI, service, evaluation) gets identical refinements.
inline constexpr std::uint64_t kEncodingNoiseSeed = 0x6a09e667f3bcc908ULL;

inline constexpr std::size_t kMinimumExtent = 32;

struct Segmentation {
  Tensor q;   // [L, H, W]
  Mask mask;  // argmax of q

  std::vector<Scalar> foreground() const { return foreground_probability(q); }
};

inline void check_inference_image(const ImageGrid& image, const ModelCheckpoint& ck) {
  image.validate();
  if (image.is_3d()) fail(ErrorKind::validation, "inference supports 2D images only");
  if (image.height < kMinimumExtent || image.width < kMinimumExtent)
    fail(ErrorKind::validation, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                    " is below the minimum extent of " + std::to_string(kMinimumExtent));
  if (image.channels != ck.model.config.image_channels)
    fail(ErrorKind::validation, "image has " + std::to_string(image.channels) + " channels, model expects " +
                                    std::to_string(ck.model.config.image_channels));
}

struct EncodingOptions {
  DistanceMetric metric = DistanceMetric::geodesic;
  double smoothing = 1.0;
  double intensity_weight = 5.0;  // 0 gives the pure intensity geodesic

  static EncodingOptions of(const ModelCheckpoint& ck) {
    return {ck.metric, ck.geodesic_smoothing, ck.geodesic_intensity_weight};
  }
};

// R-Net input from a normalized image. Distance channels are divided by the
// image diagonal. The geodesic runs on a smoothed, intensity-weighted copy with
// a unit spatial term; the image channels themselves stay untouched.
template <class Rng>
Tensor rnet_input(const ImageGrid& normalized, std::span<const Scalar> initial_foreground,
                  const ScribbleSet& scribbles, const EncodingOptions& enc, Rng& rng) {
  const bool geodesic = enc.metric == DistanceMetric::geodesic;
  GeodesicOptions gopts;
  ImageGrid support = normalized;
  if (geodesic && enc.intensity_weight > 0) {
    support = gaussian_smooth(normalized, enc.smoothing);
    for (auto& v : support.values) v = static_cast<Scalar>(v * enc.intensity_weight);
    gopts.lambda_spatial = 1.0;
  }
  Tensor x = encode_interactions(support, initial_foreground, scribbles, enc.metric, rng, gopts);
  std::copy(normalized.values.begin(), normalized.values.end(), x.data.begin());
  const std::size_t plane = normalized.height * normalized.width;
  const double inv_diag = 1.0 / image_diagonal(normalized);
  for (std::size_t i = (normalized.channels + 1) * plane; i < x.data.size(); ++i)
    x.data[i] = static_cast<Scalar>(x.data[i] * inv_diag);
  return x;
}

inline Segmentation run_network(const SegmentationModel& model, Tensor input, bool use_crf,
                                std::span<const std::int8_t> constraints = {}) {
  Tape tape;
  tape.set_recording(false);
  ForwardOptions opts;
  opts.use_crf = use_crf;
  opts.constraints = constraints;
  auto out = forward_segment(tape, model, DiffTensor::constant(std::move(input)), opts);
  Segmentation seg{out.q.value(), argmax_mask(out.q.value())};
  if (!seg.q.all_finite()) fail(ErrorKind::numeric, "inference produced non-finite probabilities");
  return seg;
}

// Pins every scribbled pixel to its label in both q and the mask.
inline void enforce_scribbles(Segmentation& seg, std::span<const std::int8_t> labels) {
  const std::size_t plane = seg.mask.data.size();
  for (std::size_t i = 0; i < plane; ++i) {
    if (labels[i] < 0) continue;
    seg.q.data[i] = labels[i] == 0 ? 1 : 0;
    seg.q.data[plane + i] = labels[i] == 1 ? 1 : 0;
    seg.mask.data[i] = static_cast<std::uint8_t>(labels[i]);
  }
}

// Proposal from a raw (unnormalized) image.
inline Segmentation propose(const ModelCheckpoint& pnet, const ImageGrid& image, bool use_crf = true) {
  check_inference_image(image, pnet);
  return run_network(pnet.model, normalize_image(image, pnet.norm).to_tensor(), use_crf);
}

inline Segmentation refine_normalized(const ModelCheckpoint& rnet, const ImageGrid& normalized,
                                      std::span<const Scalar> initial_foreground, const ScribbleSet& scribbles,
                                      bool use_crf = true) {
  std::mt19937_64 rng(kEncodingNoiseSeed);
  const auto labels = scribbles.label_map(normalized.height, normalized.width);
  Segmentation seg =
      run_network(rnet.model, rnet_input(normalized, initial_foreground, scribbles, EncodingOptions::of(rnet), rng), use_crf, labels);
  enforce_scribbles(seg, labels);
  return seg;
}

// One refinement round from a raw image, the current foreground probability
// and the accumulated scribbles.
inline Segmentation refine(const ModelCheckpoint& rnet, const ImageGrid& image,
                           std::span<const Scalar> initial_foreground, const ScribbleSet& scribbles,
                           bool use_crf = true) {
  check_inference_image(image, rnet);
  return refine_normalized(rnet, normalize_image(image, rnet.norm), initial_foreground, scribbles, use_crf);
}

}  // namespace geoseg
