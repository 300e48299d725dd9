#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "geoseg/image.hpp"
#include "geoseg/ops.hpp"
#include "geoseg/sgd.hpp"

namespace geoseg {

struct CrfConfig {
  std::size_t labels = 2;
  std::size_t patch_height = 7;
  std::size_t patch_width = 7;
  std::size_t iterations = 5;
  double spacing_y = 1.0;
  double spacing_x = 1.0;

  void validate() const {
    if (labels < 2) fail(ErrorKind::config, "crf: need at least two labels");
    if (patch_height % 2 == 0 || patch_width % 2 == 0)
      fail(ErrorKind::config, "crf: patch extents must be odd");
    if (iterations < 1) fail(ErrorKind::config, "crf: mean-field iterations must be >= 1");
    if (!(spacing_y > 0) || !(spacing_x > 0)) fail(ErrorKind::config, "crf: spacing must be > 0");
  }
};

// Freeform pairwise function f(feature difference, distance):
// fully connected (F+1) -> 32 -> 16 -> 1, ReLU hidden units, linear output.
struct PairwiseNet {
  static constexpr std::size_t kHidden1 = 32;
  static constexpr std::size_t kHidden2 = 16;

  std::size_t feature_dim = 1;
  DiffTensor w1, b1, w2, b2, w3, b3;

  std::size_t input_dim() const { return feature_dim + 1; }

  static PairwiseNet zeros(std::size_t feature_dim) {
    if (feature_dim < 1) fail(ErrorKind::config, "pairwise net: feature dimension must be >= 1");
    PairwiseNet net;
    net.feature_dim = feature_dim;
    net.w1 = DiffTensor::parameter(Tensor({kHidden1, feature_dim + 1}));
    net.b1 = DiffTensor::parameter(Tensor({kHidden1}));
    net.w2 = DiffTensor::parameter(Tensor({kHidden2, kHidden1}));
    net.b2 = DiffTensor::parameter(Tensor({kHidden2}));
    net.w3 = DiffTensor::parameter(Tensor({1, kHidden2}));
    net.b3 = DiffTensor::parameter(Tensor({1}));
    return net;
  }

  template <class Rng>
  static PairwiseNet he_uniform(std::size_t feature_dim, Rng& rng) {
    PairwiseNet net = zeros(feature_dim);
    auto init = [&rng](DiffTensor& w) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.shape()[1]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : w.value().data) v = static_cast<Scalar>(dist(rng));
    };
    init(net.w1);
    init(net.w2);
    init(net.w3);
    return net;
  }

  std::vector<DiffTensor> parameters() const { return {w1, b1, w2, b2, w3, b3}; }

  // inputs [N, F+1] -> [N, 1]. One fused op evaluated in row chunks; hidden
  // activations are recomputed in the backward pass instead of stored.
  DiffTensor forward(Tape& tape, const DiffTensor& inputs) const;

  // Same function composed from linear/relu ops; reference for the fused path.
  DiffTensor forward_composed(Tape& tape, const DiffTensor& inputs) const {
    auto h1 = relu(tape, linear(tape, inputs, w1, b1));
    auto h2 = relu(tape, linear(tape, h1, w2, b2));
    return linear(tape, h2, w3, b3);
  }

  PairwiseNet clone() const {
    PairwiseNet out = zeros(feature_dim);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].value() = src[i].value();
    return out;
  }
};

namespace detail {

inline constexpr std::size_t kPairwiseChunk = 512;

struct PairwiseChunk {
  RowMatrix a1, a2;  // pre-activations
  RowMatrix h1, h2;  // post-ReLU
};

inline void pairwise_chunk_forward(const PairwiseNet& net, const Scalar* x, std::size_t rows,
                                   PairwiseChunk& c) {
  const std::size_t din = net.input_dim();
  const ConstRowMap xm(x, rows, din);
  const ConstRowMap w1(net.w1.value().data.data(), PairwiseNet::kHidden1, din);
  const ConstRowMap w2(net.w2.value().data.data(), PairwiseNet::kHidden2, PairwiseNet::kHidden1);
  using RowVec = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  c.a1.noalias() = xm * w1.transpose();
  c.a1.rowwise() += RowVec(net.b1.value().data.data(), PairwiseNet::kHidden1);
  c.h1 = c.a1.cwiseMax(Scalar(0));
  c.a2.noalias() = c.h1 * w2.transpose();
  c.a2.rowwise() += RowVec(net.b2.value().data.data(), PairwiseNet::kHidden2);
  c.h2 = c.a2.cwiseMax(Scalar(0));
}

}  // namespace detail

inline DiffTensor PairwiseNet::forward(Tape& tape, const DiffTensor& inputs) const {
  detail::require_rank(inputs, 2, "pairwise net");
  if (inputs.shape()[1] != input_dim())
    fail(ErrorKind::shape, "pairwise net: expects rows of " + std::to_string(input_dim()) +
                               " values, got " + shape_string(inputs.shape()));
  const std::size_t n = inputs.shape()[0], din = input_dim();
  Tensor out({n, 1});
  {
    detail::PairwiseChunk c;
    const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> w3v(w3.value().data.data(), kHidden2);
    for (std::size_t r0 = 0; r0 < n; r0 += detail::kPairwiseChunk) {
      const std::size_t rows = std::min(detail::kPairwiseChunk, n - r0);
      detail::pairwise_chunk_forward(*this, inputs.value().data.data() + r0 * din, rows, c);
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(out.data.data() + r0, rows) =
          (c.h2 * w3v).array() + b3.value().data[0];
    }
  }
  const PairwiseNet net = *this;  // shares parameter nodes
  return tape.record("pairwise_net", std::move(out), {inputs, w1, b1, w2, b2, w3, b3},
                     [net, inputs, n, din](const Tensor& g) mutable {
                       using detail::ConstRowMap;
                       using detail::RowMap;
                       using detail::RowMatrix;
                       using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
                       constexpr std::size_t h1n = kHidden1, h2n = kHidden2;
                       RowMatrix gw1 = RowMatrix::Zero(h1n, din), gw2 = RowMatrix::Zero(h2n, h1n);
                       RowVector gb1 = RowVector::Zero(h1n), gb2 = RowVector::Zero(h2n);
                       RowVector gw3 = RowVector::Zero(h2n);
                       Scalar gb3 = 0;
                       const ConstRowMap w1(net.w1.value().data.data(), h1n, din);
                       const ConstRowMap w2(net.w2.value().data.data(), h2n, h1n);
                       const ConstRowMap w3(net.w3.value().data.data(), 1, h2n);
                       Scalar* gx = inputs.requires_grad() ? inputs.grad().data.data() : nullptr;
                       detail::PairwiseChunk c;
                       RowMatrix ga1, ga2;
                       for (std::size_t r0 = 0; r0 < n; r0 += detail::kPairwiseChunk) {
                         const std::size_t rows = std::min(detail::kPairwiseChunk, n - r0);
                         const Scalar* x = inputs.value().data.data() + r0 * din;
                         detail::pairwise_chunk_forward(net, x, rows, c);
                         const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gy(g.data.data() + r0, rows);
                         gw3.noalias() += gy.transpose() * c.h2;
                         gb3 += gy.sum();
                         ga2 = ((gy * w3).array() * (c.a2.array() > 0).template cast<Scalar>()).matrix();
                         gw2.noalias() += ga2.transpose() * c.h1;
                         gb2 += ga2.colwise().sum();
                         ga1 = ((ga2 * w2).array() * (c.a1.array() > 0).template cast<Scalar>()).matrix();
                         gw1.noalias() += ga1.transpose() * ConstRowMap(x, rows, din);
                         gb1 += ga1.colwise().sum();
                         if (gx) RowMap(gx + r0 * din, rows, din).noalias() += ga1 * w1;
                       }
                       auto add = [](const DiffTensor& p, const Scalar* src) {
                         if (!p.requires_grad()) return;
                         auto& d = p.grad().data;
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
                       };
                       add(net.w1, gw1.data());
                       add(net.b1, gb1.data());
                       add(net.w2, gw2.data());
                       add(net.b2, gb2.data());
                       add(net.w3, gw3.data());
                       add(net.b3, &gb3);
                     });
}

// f(fdiff, dist) for one pixel pair; may be negative once trained.
inline Scalar pairwise_potential(const PairwiseNet& net, std::span<const Scalar> fdiff, Scalar dist) {
  if (fdiff.size() != net.feature_dim)
    fail(ErrorKind::shape, "pairwise_potential: feature difference has " +
                               std::to_string(fdiff.size()) + " entries, net expects " +
                               std::to_string(net.feature_dim));
  if (!(dist > 0)) fail(ErrorKind::validation, "pairwise_potential: distance must be > 0");
  Tensor row({1, net.input_dim()});
  std::copy(fdiff.begin(), fdiff.end(), row.data.begin());
  row.data.back() = dist;
  Tape tape;
  tape.set_recording(false);
  return net.forward(tape, DiffTensor::constant(std::move(row))).item();
}

// Label compatibility mu(l, l'), initialised to the Iverson bracket [l != l'].
struct CompatibilityMatrix {
  DiffTensor mu;  // [L, L]

  static CompatibilityMatrix iverson(std::size_t labels) {
    Tensor m({labels, labels});
    for (std::size_t a = 0; a < labels; ++a)
      for (std::size_t b = 0; b < labels; ++b) m.data[a * labels + b] = a != b ? 1 : 0;
    return {DiffTensor::parameter(std::move(m))};
  }

  std::size_t labels() const { return mu.shape()[0]; }
};

// Pixel pairs (i, j) with j inside the patch centred on i, j != i.
struct PatchPairs {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> source;     // i
  std::vector<std::int32_t> neighbour;  // j
  std::vector<std::size_t> first_pair;  // pairs of pixel i are [first_pair[i], first_pair[i+1])
  Tensor inputs;                        // [P, F+1]: f_i - f_j, d_ij

  std::size_t pair_count() const { return source.size(); }
};

inline PatchPairs build_patch_pairs(const ImageGrid& features, const CrfConfig& cfg) {
  cfg.validate();
  if (features.is_3d()) fail(ErrorKind::shape, "crf: features must be a 2D image");
  const int h = static_cast<int>(features.height), w = static_cast<int>(features.width);
  const int ry = static_cast<int>(cfg.patch_height / 2), rx = static_cast<int>(cfg.patch_width / 2);
  const std::size_t f = features.channels, plane = features.height * features.width;
  PatchPairs pairs;
  pairs.height = features.height;
  pairs.width = features.width;
  pairs.first_pair.reserve(plane + 1);
  std::vector<Scalar> rows;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pairs.first_pair.push_back(pairs.source.size());
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      for (int dy = -ry; dy <= ry; ++dy)
        for (int dx = -rx; dx <= rx; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
          pairs.source.push_back(static_cast<std::int32_t>(i));
          pairs.neighbour.push_back(static_cast<std::int32_t>(j));
          for (std::size_t c = 0; c < f; ++c)
            rows.push_back(features.values[c * plane + i] - features.values[c * plane + j]);
          const double sy = dy * cfg.spacing_y, sx = dx * cfg.spacing_x;
          rows.push_back(static_cast<Scalar>(std::sqrt(sy * sy + sx * sx)));
        }
    }
  pairs.first_pair.push_back(pairs.source.size());
  pairs.inputs = Tensor({pairs.source.size(), f + 1}, std::move(rows));
  return pairs;
}

// m[l, i] = sum_{j in patch(i)} w_ij * q[l, j]
inline DiffTensor message_passing(Tape& tape, const DiffTensor& weights, const DiffTensor& q,
                                  std::shared_ptr<const PatchPairs> table) {
  const PatchPairs& pairs = *table;
  detail::require_rank(q, 3, "message_passing");
  const std::size_t labels = q.shape()[0], plane = pairs.height * pairs.width;
  if (q.shape()[1] != pairs.height || q.shape()[2] != pairs.width)
    fail(ErrorKind::shape, "message_passing: probability field does not match the pair grid");
  if (weights.size() != pairs.pair_count())
    fail(ErrorKind::shape, "message_passing: one weight per pixel pair required");
  Tensor out(q.shape());
  const auto& wv = weights.value().data;
  const auto& qv = q.value().data;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t p = pairs.first_pair[i]; p < pairs.first_pair[i + 1]; ++p) {
      const std::size_t j = static_cast<std::size_t>(pairs.neighbour[p]);
      for (std::size_t l = 0; l < labels; ++l) out.data[l * plane + i] += wv[p] * qv[l * plane + j];
    }
  return tape.record("message_passing", std::move(out), {weights, q},
                     [weights, q, pp = std::move(table), labels, plane](const Tensor& g) mutable {
                       const auto& wv = weights.value().data;
                       const auto& qv = q.value().data;
                       Scalar* gw = weights.requires_grad() ? weights.grad().data.data() : nullptr;
                       Scalar* gq = q.requires_grad() ? q.grad().data.data() : nullptr;
                       for (std::size_t i = 0; i < plane; ++i)
                         for (std::size_t p = pp->first_pair[i]; p < pp->first_pair[i + 1]; ++p) {
                           const std::size_t j = static_cast<std::size_t>(pp->neighbour[p]);
                           for (std::size_t l = 0; l < labels; ++l) {
                             const Scalar go = g.data[l * plane + i];
                             if (gw) gw[p] += go * qv[l * plane + j];
                             if (gq) gq[l * plane + j] += go * wv[p];
                           }
                         }
                     });
}

// phi[l, i] = sum_{l'} mu[l, l'] * m[l', i]
inline DiffTensor compatibility_transform(Tape& tape, const DiffTensor& mu, const DiffTensor& m) {
  detail::require_rank(m, 3, "compatibility_transform");
  const std::size_t labels = m.shape()[0], plane = m.shape()[1] * m.shape()[2];
  if (mu.shape() != Shape{labels, labels})
    fail(ErrorKind::shape, "compatibility_transform: mu must be [L, L]");
  Tensor out(m.shape());
  const auto& muv = mu.value().data;
  const auto& mv = m.value().data;
  for (std::size_t l = 0; l < labels; ++l)
    for (std::size_t k = 0; k < labels; ++k) {
      const Scalar c = muv[l * labels + k];
      if (c == 0) continue;
      detail::axpy(c, mv.data() + k * plane, out.data.data() + l * plane, plane);
    }
  return tape.record("compatibility_transform", std::move(out), {mu, m},
                     [mu, m, labels, plane](const Tensor& g) mutable {
                       const auto& muv = mu.value().data;
                       const auto& mv = m.value().data;
                       for (std::size_t l = 0; l < labels; ++l)
                         for (std::size_t k = 0; k < labels; ++k) {
                           const Scalar* gl = g.data.data() + l * plane;
                           if (mu.requires_grad())
                             mu.grad().data[l * labels + k] +=
                                 detail::dot(gl, mv.data() + k * plane, plane);
                           if (m.requires_grad())
                             detail::axpy(muv[l * labels + k], gl, m.grad().data.data() + k * plane,
                                          plane);
                         }
                     });
}

// Overwrites constrained pixels with exact one-hot probabilities; gradient is
// blocked there. labels: -1 free, otherwise the enforced label.
inline DiffTensor apply_hard_constraints(Tape& tape, const DiffTensor& q,
                                         std::span<const std::int8_t> labels) {
  detail::require_rank(q, 3, "apply_hard_constraints");
  const std::size_t label_count = q.shape()[0], plane = q.shape()[1] * q.shape()[2];
  if (labels.size() != plane) fail(ErrorKind::shape, "apply_hard_constraints: label map size mismatch");
  Tensor out = q.value();
  for (std::size_t i = 0; i < plane; ++i) {
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= label_count)
      fail(ErrorKind::validation, "scribble label outside the label set");
    for (std::size_t l = 0; l < label_count; ++l)
      out.data[l * plane + i] = static_cast<std::size_t>(labels[i]) == l ? 1 : 0;
  }
  std::vector<std::int8_t> lab(labels.begin(), labels.end());
  return tape.record("apply_hard_constraints", std::move(out), {q},
                     [q, lab = std::move(lab), label_count, plane](const Tensor& g) mutable {
                       Tensor& gq = q.grad();
                       for (std::size_t l = 0; l < label_count; ++l)
                         for (std::size_t i = 0; i < plane; ++i)
                           if (lab[i] < 0) gq.data[l * plane + i] += g.data[l * plane + i];
                     });
}

struct MeanFieldResult {
  DiffTensor q;                       // final [L, H, W] distribution
  std::vector<DiffTensor> iterates;   // Q^0 .. Q^T
};

// Mean-field inference: Q^0 = softmax(z) with unary psi_u = -z, then T rounds of
// message passing, compatibility transform, adding the unary and normalising.
// With constraints, Q on scribbled pixels is fixed to 0/1 after each round.
inline MeanFieldResult mean_field_iterate(Tape& tape, const DiffTensor& unary_logits,
                                          const ImageGrid& features, const PairwiseNet& net,
                                          const CompatibilityMatrix& mu, const CrfConfig& cfg,
                                          std::span<const std::int8_t> constraints = {}) {
  cfg.validate();
  detail::require_rank(unary_logits, 3, "mean_field_iterate");
  if (unary_logits.shape()[0] != cfg.labels || mu.labels() != cfg.labels)
    fail(ErrorKind::shape, "mean_field_iterate: label count mismatch");
  if (features.height != unary_logits.shape()[1] || features.width != unary_logits.shape()[2])
    fail(ErrorKind::shape, "mean_field_iterate: features do not match the unary grid");
  if (features.channels != net.feature_dim)
    fail(ErrorKind::shape, "mean_field_iterate: feature channels do not match the pairwise net");
  const bool constrained = !constraints.empty();

  auto pairs = std::make_shared<const PatchPairs>(build_patch_pairs(features, cfg));
  auto weights = net.forward(tape, DiffTensor::constant(pairs->inputs));

  MeanFieldResult result;
  auto q = softmax_channels(tape, unary_logits);
  if (constrained) q = apply_hard_constraints(tape, q, constraints);
  result.iterates.push_back(q);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    auto messages = message_passing(tape, weights, q, pairs);
    auto phi = compatibility_transform(tape, mu.mu, messages);
    q = softmax_channels(tape, subtract(tape, unary_logits, phi));
    if (constrained) q = apply_hard_constraints(tape, q, constraints);
    result.iterates.push_back(q);
  }
  result.q = q;
  return result;
}

// Literal nested-loop evaluation of the same mean-field recursion, with its
// own MLP evaluation. Test oracle for instances up to 64 pixels.
inline Tensor brute_force_meanfield_oracle(const Tensor& unary_logits, const ImageGrid& features,
                                           const PairwiseNet& net, const Tensor& mu,
                                           const CrfConfig& cfg,
                                           std::span<const std::int8_t> constraints = {}) {
  cfg.validate();
  const std::size_t labels = unary_logits.dim(0), h = unary_logits.dim(1), w = unary_logits.dim(2);
  const std::size_t n = h * w;
  if (n > 64) fail(ErrorKind::validation, "brute-force oracle limited to 64 pixels");
  const std::size_t f = features.channels;

  auto mlp = [&](const std::vector<double>& x) {
    const auto& w1 = net.w1.value().data;
    const auto& b1 = net.b1.value().data;
    const auto& w2 = net.w2.value().data;
    const auto& b2 = net.b2.value().data;
    const auto& w3 = net.w3.value().data;
    std::vector<double> a(PairwiseNet::kHidden1), b(PairwiseNet::kHidden2);
    for (std::size_t o = 0; o < a.size(); ++o) {
      double s = b1[o];
      for (std::size_t k = 0; k < x.size(); ++k) s += w1[o * x.size() + k] * x[k];
      a[o] = s > 0 ? s : 0;
    }
    for (std::size_t o = 0; o < b.size(); ++o) {
      double s = b2[o];
      for (std::size_t k = 0; k < a.size(); ++k) s += w2[o * a.size() + k] * a[k];
      b[o] = s > 0 ? s : 0;
    }
    double s = net.b3.value().data[0];
    for (std::size_t k = 0; k < b.size(); ++k) s += w3[k] * b[k];
    return s;
  };

  // Dense pairwise matrix over all pixel pairs; zero outside the patch.
  std::vector<double> pair(n * n, 0.0);
  const long ry = static_cast<long>(cfg.patch_height / 2), rx = static_cast<long>(cfg.patch_width / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const long dy = static_cast<long>(j / w) - static_cast<long>(i / w);
      const long dx = static_cast<long>(j % w) - static_cast<long>(i % w);
      if (i == j || std::labs(dy) > ry || std::labs(dx) > rx) continue;
      std::vector<double> x(f + 1);
      for (std::size_t c = 0; c < f; ++c) x[c] = features.values[c * n + i] - features.values[c * n + j];
      x[f] = std::hypot(dy * cfg.spacing_y, dx * cfg.spacing_x);
      pair[i * n + j] = mlp(x);
    }

  auto normalise = [&](std::vector<double>& energy) {
    std::vector<double> q(labels * n);
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0;
      for (std::size_t l = 0; l < labels; ++l) z += std::exp(energy[l * n + i]);
      for (std::size_t l = 0; l < labels; ++l) q[l * n + i] = std::exp(energy[l * n + i]) / z;
      if (!constraints.empty() && constraints[i] >= 0)
        for (std::size_t l = 0; l < labels; ++l)
          q[l * n + i] = static_cast<std::size_t>(constraints[i]) == l ? 1.0 : 0.0;
    }
    return q;
  };

  std::vector<double> energy(unary_logits.data.begin(), unary_logits.data.end());
  std::vector<double> q = normalise(energy);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < labels; ++l) {
        double phi = 0;
        for (std::size_t k = 0; k < labels; ++k)
          for (std::size_t j = 0; j < n; ++j)
            phi += mu.data[l * labels + k] * pair[i * n + j] * q[k * n + j];
        energy[l * n + i] = unary_logits.data[l * n + i] - phi;
      }
    q = normalise(energy);
  }
  return Tensor(unary_logits.shape, std::vector<Scalar>(q.begin(), q.end()));
}

// ---------------------------------------------------------------------------
// Pairwise-Net pre-training against the contrast-sensitive function
//   f0(fdiff, d) = exp(-|fdiff|^2 / (2 sigma^2 F)) * omega / d

inline constexpr double kContrastSigma = 0.08;
inline constexpr double kContrastOmega = 0.5;

inline double contrast_sensitive_target(std::span<const Scalar> fdiff, double dist,
                                        double sigma = kContrastSigma,
                                        double omega = kContrastOmega) {
  double sq = 0;
  for (Scalar v : fdiff) sq += static_cast<double>(v) * v;
  const double f = static_cast<double>(fdiff.size());
  return std::exp(-sq / (2.0 * sigma * sigma * f)) * omega / dist;
}

struct PretrainSet {
  std::size_t feature_dim = 1;
  Tensor inputs;   // [N, F+1]
  Tensor targets;  // [N, 1]

  std::size_t size() const { return targets.size(); }
};

// Features ~ Normal(0, 2) (standard deviation 2), distance ~ U(0, 8).
template <class Rng>
PretrainSet generate_pretrain_set(std::size_t feature_dim, std::size_t count, Rng& rng,
                                  double sigma = kContrastSigma, double omega = kContrastOmega) {
  if (feature_dim < 1) fail(ErrorKind::config, "pretrain set: feature dimension must be >= 1");
  std::normal_distribution<double> feature(0.0, 2.0);
  std::uniform_real_distribution<double> distance(0.0, 8.0);
  PretrainSet set;
  set.feature_dim = feature_dim;
  set.inputs = Tensor({count, feature_dim + 1});
  set.targets = Tensor({count, 1});
  for (std::size_t s = 0; s < count; ++s) {
    Scalar* row = set.inputs.data.data() + s * (feature_dim + 1);
    for (std::size_t c = 0; c < feature_dim; ++c) row[c] = static_cast<Scalar>(feature(rng));
    double d = distance(rng);
    while (d <= 0) d = distance(rng);
    row[feature_dim] = static_cast<Scalar>(d);
    set.targets.data[s] = static_cast<Scalar>(contrast_sensitive_target(
        std::span<const Scalar>(row, feature_dim), row[feature_dim], sigma, omega));
  }
  return set;
}

struct PretrainConfig {
  // Targets grow like omega/d as d -> 0; clipping keeps those samples from
  // dominating the updates.
  SgdConfig sgd{.learning_rate = 3e-2, .momentum = 0.9, .weight_decay = 0.0,
                .lr_halving_period_iters = 0, .minibatch = 100, .clip_norm = 1.0};
  std::size_t epochs = 300;
  double holdout_fraction = 0.1;
  // Halve the rate every this many epochs (0 = never).
  std::size_t halve_every_epochs = 75;
};

struct PretrainReport {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  double holdout_mse = 0;
  std::size_t train_count = 0;
  std::size_t holdout_count = 0;
};

inline double pairwise_mse(const PairwiseNet& net, const Tensor& inputs, const Tensor& targets,
                           std::size_t begin, std::size_t end) {
  if (begin >= end) return 0;
  const std::size_t dim = inputs.dim(1);
  Tensor rows({end - begin, dim});
  std::copy(inputs.data.begin() + begin * dim, inputs.data.begin() + end * dim, rows.data.begin());
  Tape tape;
  tape.set_recording(false);
  const auto pred = net.forward(tape, DiffTensor::constant(std::move(rows)));
  double total = 0;
  for (std::size_t i = 0; i < end - begin; ++i) {
    const double d = pred.value()[i] - targets.data[begin + i];
    total += d * d;
  }
  return total / static_cast<double>(end - begin);
}

// Quadratic-loss SGD fit of a Pairwise-Net to the pre-training set. The last
// holdout_fraction of the samples is held out for evaluation.
template <class Rng>
PairwiseNet pretrain_pairwise_net(const PretrainSet& samples, const PretrainConfig& cfg, Rng& rng,
                                  PretrainReport* report = nullptr) {
  if (samples.size() == 0) fail(ErrorKind::validation, "pretrain: empty sample set");
  cfg.sgd.validate();
  const std::size_t n = samples.size();
  const std::size_t holdout = std::min(n - 1, static_cast<std::size_t>(n * cfg.holdout_fraction));
  const std::size_t train = n - holdout;
  const std::size_t dim = samples.feature_dim + 1;
  const std::size_t batch = std::max<std::size_t>(1, cfg.sgd.minibatch);

  PairwiseNet net = PairwiseNet::he_uniform(samples.feature_dim, rng);
  auto params = net.parameters();
  SgdConfig sgd = cfg.sgd;
  SgdOptimizer optimizer(sgd);
  std::vector<std::size_t> order(train);
  std::iota(order.begin(), order.end(), 0);
  PretrainReport local;
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.halve_every_epochs && epoch > 0 && epoch % cfg.halve_every_epochs == 0) {
      sgd.learning_rate *= 0.5;
      optimizer = SgdOptimizer(sgd);
    }
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train; start += batch) {
      const std::size_t count = std::min(batch, train - start);
      Tensor x({count, dim}), y({count, 1});
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t s = order[start + k];
        std::copy_n(samples.inputs.data.begin() + s * dim, dim, x.data.begin() + k * dim);
        y.data[k] = samples.targets.data[s];
      }
      Tape tape;
      zero_grads(params);
      auto loss = mse_loss(tape, net.forward(tape, DiffTensor::constant(std::move(x))), y);
      if (!std::isfinite(loss.item())) fail(ErrorKind::numeric, "pretrain: loss diverged");
      loss_sum += loss.item();
      ++batches;
      tape.backward(loss);
      optimizer.step(params, iteration++);
    }
    local.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  local.train_count = train;
  local.holdout_count = holdout;
  local.holdout_mse = pairwise_mse(net, samples.inputs, samples.targets, train, n);
  if (report) *report = std::move(local);
  return net;
}

}  // namespace geoseg
