#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "geoseg/tensor.hpp"

namespace geoseg {

namespace detail {

inline Scalar dot(const Scalar* a, const Scalar* b, std::size_t n) {
  Scalar s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(Scalar alpha, const Scalar* x, Scalar* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

inline void require_rank(const DiffTensor& t, std::size_t rank, const char* op) {
  if (t.shape().size() != rank)
    fail(ErrorKind::shape, std::string(op) + ": expected rank " + std::to_string(rank) +
                               " input, got " + shape_string(t.shape()));
}

}  // namespace detail

// Square dilated kernel K_rq with extent 2r+1 and dilation q.
struct ConvKernel {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t radius = 1;
  std::size_t dilation = 1;
  DiffTensor weights;  // [Co, C, 2r+1, 2r+1]
  DiffTensor bias;     // [Co]

  std::size_t extent() const { return 2 * radius + 1; }

  static void validate(std::size_t out_channels, std::size_t in_channels, std::size_t radius,
                       std::size_t dilation) {
    if (out_channels == 0 || in_channels == 0)
      fail(ErrorKind::config, "conv kernel needs at least one input and output channel");
    if (radius > 1) fail(ErrorKind::config, "conv kernel radius must be 0 or 1");
    if (dilation < 1) fail(ErrorKind::config, "conv dilation must be >= 1");
    if (radius == 0 && dilation != 1)
      fail(ErrorKind::config, "a 1x1 kernel must have dilation 1");
  }

  static ConvKernel zeros(std::size_t out_channels, std::size_t in_channels, std::size_t radius,
                          std::size_t dilation) {
    validate(out_channels, in_channels, radius, dilation);
    const std::size_t k = 2 * radius + 1;
    ConvKernel kernel;
    kernel.out_channels = out_channels;
    kernel.in_channels = in_channels;
    kernel.radius = radius;
    kernel.dilation = dilation;
    kernel.weights = DiffTensor::parameter(Tensor({out_channels, in_channels, k, k}));
    kernel.bias = DiffTensor::parameter(Tensor({out_channels}));
    return kernel;
  }

  // He-uniform weights: U(-b, b) with b = sqrt(6 / fan_in); zero bias.
  template <class Rng>
  static ConvKernel he_uniform(std::size_t out_channels, std::size_t in_channels,
                               std::size_t radius, std::size_t dilation, Rng& rng) {
    ConvKernel kernel = zeros(out_channels, in_channels, radius, dilation);
    const std::size_t k = kernel.extent();
    const double bound = std::sqrt(6.0 / static_cast<double>(in_channels * k * k));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : kernel.weights.value().data) w = static_cast<Scalar>(dist(rng));
    return kernel;
  }
};

// I_c(y,x) = sum_{i,j} I(y - q*i, x - q*j) * K(i+r, j+r), zero same-padding, stride 1.
inline DiffTensor dilated_conv2d(Tape& tape, const DiffTensor& input, const ConvKernel& kernel) {
  detail::require_rank(input, 3, "dilated_conv2d");
  ConvKernel::validate(kernel.out_channels, kernel.in_channels, kernel.radius, kernel.dilation);
  const std::size_t channels = input.shape()[0];
  const std::size_t height = input.shape()[1];
  const std::size_t width = input.shape()[2];
  if (channels != kernel.in_channels)
    fail(ErrorKind::shape, "dilated_conv2d: input has " + std::to_string(channels) +
                               " channels, kernel expects " + std::to_string(kernel.in_channels));
  const std::size_t co_count = kernel.out_channels;
  const long r = static_cast<long>(kernel.radius);
  const long q = static_cast<long>(kernel.dilation);
  const std::size_t k = kernel.extent();
  const long h = static_cast<long>(height), w = static_cast<long>(width);
  const std::size_t plane = height * width;

  // Visits every (output row span, input row span, weight) triple.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t co = 0; co < co_count; ++co)
      for (std::size_t ci = 0; ci < channels; ++ci)
        for (long i = -r; i <= r; ++i)
          for (long j = -r; j <= r; ++j) {
            const long dy = -q * i, dx = -q * j;
            const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
            if (y0 >= y1 || x0 >= x1) continue;
            const std::size_t widx = ((co * channels + ci) * k + (i + r)) * k + (j + r);
            visit(co, ci, widx, y0, y1, x0, x1, dy, dx);
          }
  };

  const Tensor& in = input.value();
  const Tensor& wt = kernel.weights.value();
  Tensor out({co_count, height, width});
  for (std::size_t co = 0; co < co_count; ++co)
    std::fill_n(out.data.begin() + co * plane, plane, kernel.bias.value()[co]);
  for_each_tap([&](std::size_t co, std::size_t ci, std::size_t widx, long y0, long y1, long x0,
                   long x1, long dy, long dx) {
    const Scalar weight = wt[widx];
    if (weight == 0) return;
    for (long y = y0; y < y1; ++y) {
      Scalar* dst = out.data.data() + co * plane + y * w;
      const Scalar* src = in.data.data() + ci * plane + (y + dy) * w + dx;
      for (long x = x0; x < x1; ++x) dst[x] += weight * src[x];
    }
  });

  DiffTensor weights = kernel.weights, bias = kernel.bias;
  return tape.record(
      "dilated_conv2d", std::move(out), {input, weights, bias},
      [=](const Tensor& gout) mutable {
        const Tensor& in = input.value();
        const Tensor& wt = weights.value();
        Scalar* gin = input.requires_grad() ? input.grad().data.data() : nullptr;
        Scalar* gw = weights.requires_grad() ? weights.grad().data.data() : nullptr;
        if (bias.requires_grad()) {
          Tensor& gb = bias.grad();
          for (std::size_t co = 0; co < co_count; ++co) {
            Scalar s = 0;
            for (std::size_t p = 0; p < plane; ++p) s += gout[co * plane + p];
            gb[co] += s;
          }
        }
        for_each_tap([&](std::size_t co, std::size_t ci, std::size_t widx, long y0, long y1,
                         long x0, long x1, long dy, long dx) {
          Scalar acc = 0;
          for (long y = y0; y < y1; ++y) {
            const Scalar* g = gout.data.data() + co * plane + y * w;
            const std::size_t src_off = ci * plane + (y + dy) * w + dx;
            if (gin) detail::axpy(wt[widx], g + x0, gin + src_off + x0, x1 - x0);
            if (gw) acc += detail::dot(g + x0, in.data.data() + src_off + x0, x1 - x0);
          }
          if (gw) gw[widx] += acc;
        });
      });
}

// Elementwise max(0, x); the subgradient at 0 is 0.
inline DiffTensor relu(Tape& tape, const DiffTensor& x) {
  Tensor out(x.shape());
  const auto& v = x.value().data;
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = v[i] > 0 ? v[i] : Scalar(0);
  return tape.record("relu", std::move(out), {x}, [x](const Tensor& g) mutable {
    Tensor& gx = x.grad();
    const auto& v = x.value().data;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] > 0) gx.data[i] += g.data[i];
  });
}

// Stacks [Ci,H,W] tensors along the channel axis in argument order.
inline DiffTensor channel_concat(Tape& tape, const std::vector<DiffTensor>& parts) {
  if (parts.empty()) fail(ErrorKind::shape, "channel_concat: no inputs");
  for (const auto& p : parts) detail::require_rank(p, 3, "channel_concat");
  const std::size_t h = parts[0].shape()[1], w = parts[0].shape()[2];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[1] != h || p.shape()[2] != w)
      fail(ErrorKind::shape, "channel_concat: spatial mismatch " + shape_string(p.shape()) +
                                 " vs " + shape_string(parts[0].shape()));
    total += p.shape()[0];
  }
  Tensor out({total, h, w});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + offset);
    offset += p.size();
  }
  return tape.record("channel_concat", std::move(out), parts,
                     [parts](const Tensor& g) mutable {
                       std::size_t offset = 0;
                       for (auto& p : parts) {
                         if (p.requires_grad()) {
                           Tensor& gp = p.grad();
                           for (std::size_t i = 0; i < gp.size(); ++i) gp.data[i] += g.data[offset + i];
                         }
                         offset += p.size();
                       }
                     });
}

// Channels [begin, begin+count) of a [C,H,W] tensor.
inline DiffTensor channel_slice(Tape& tape, const DiffTensor& x, std::size_t begin,
                                std::size_t count) {
  detail::require_rank(x, 3, "channel_slice");
  if (begin + count > x.shape()[0] || count == 0)
    fail(ErrorKind::shape, "channel_slice: range out of bounds");
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  Tensor out({count, x.shape()[1], x.shape()[2]});
  std::copy_n(x.value().data.begin() + begin * plane, count * plane, out.data.begin());
  return tape.record("channel_slice", std::move(out), {x}, [=](const Tensor& g) mutable {
    Tensor& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[begin * plane + i] += g.data[i];
  });
}

// Per-pixel softmax over the channel axis of [L,H,W], max-subtracted.
inline DiffTensor softmax_channels(Tape& tape, const DiffTensor& x) {
  detail::require_rank(x, 3, "softmax_channels");
  const std::size_t labels = x.shape()[0];
  if (labels < 2) fail(ErrorKind::shape, "softmax_channels needs at least two labels");
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  Tensor out(x.shape());
  const auto& v = x.value().data;
  for (std::size_t p = 0; p < plane; ++p) {
    Scalar m = v[p];
    for (std::size_t l = 1; l < labels; ++l) m = std::max(m, v[l * plane + p]);
    Scalar z = 0;
    for (std::size_t l = 0; l < labels; ++l) {
      const Scalar e = std::exp(v[l * plane + p] - m);
      out.data[l * plane + p] = e;
      z += e;
    }
    for (std::size_t l = 0; l < labels; ++l) out.data[l * plane + p] /= z;
  }
  Tensor probs = out;
  return tape.record("softmax_channels", std::move(out), {x},
                     [x, probs = std::move(probs), labels, plane](const Tensor& g) mutable {
                       Tensor& gx = x.grad();
                       for (std::size_t p = 0; p < plane; ++p) {
                         Scalar s = 0;
                         for (std::size_t l = 0; l < labels; ++l)
                           s += g.data[l * plane + p] * probs.data[l * plane + p];
                         for (std::size_t l = 0; l < labels; ++l)
                           gx.data[l * plane + p] +=
                               probs.data[l * plane + p] * (g.data[l * plane + p] - s);
                       }
                     });
}

struct LossDiagnostics {
  std::size_t clamped_pixels = 0;  // pixels whose target probability fell below the clamp
};

inline constexpr Scalar kProbabilityClamp = Scalar(1e-12);

// Mean over pixels of -log q(label); q is a [L,H,W] probability field.
inline DiffTensor cross_entropy_loss(Tape& tape, const DiffTensor& q,
                                     std::span<const std::uint8_t> labels,
                                     LossDiagnostics* diagnostics = nullptr) {
  detail::require_rank(q, 3, "cross_entropy_loss");
  const std::size_t label_count = q.shape()[0];
  const std::size_t plane = q.shape()[1] * q.shape()[2];
  if (labels.size() != plane)
    fail(ErrorKind::shape, "cross_entropy_loss: label map size mismatch");
  const auto& v = q.value().data;
  Scalar total = 0;
  std::size_t clamped = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (labels[p] >= label_count)
      fail(ErrorKind::validation, "cross_entropy_loss: label outside the label set");
    Scalar prob = v[labels[p] * plane + p];
    if (prob < kProbabilityClamp) {
      prob = kProbabilityClamp;
      ++clamped;
    }
    total -= std::log(prob);
  }
  if (diagnostics) diagnostics->clamped_pixels = clamped;
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(plane);
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return tape.record("cross_entropy_loss", Tensor({1}, {total * inv_n}), {q},
                     [q, lab = std::move(lab), plane, inv_n](const Tensor& g) mutable {
                       Tensor& gq = q.grad();
                       const auto& v = q.value().data;
                       for (std::size_t p = 0; p < plane; ++p) {
                         const std::size_t idx = lab[p] * plane + p;
                         if (v[idx] >= kProbabilityClamp) gq.data[idx] -= g.data[0] * inv_n / v[idx];
                       }
                     });
}

// y[n,o] = b[o] + sum_i x[n,i] w[o,i]
inline DiffTensor linear(Tape& tape, const DiffTensor& x, const DiffTensor& weight,
                         const DiffTensor& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  const std::size_t n = x.shape()[0], din = x.shape()[1], dout = weight.shape()[0];
  if (weight.shape()[1] != din || bias.size() != dout)
    fail(ErrorKind::shape, "linear: input " + shape_string(x.shape()) + " vs weight " +
                               shape_string(weight.shape()));
  using detail::ConstRowMap;
  using detail::RowMap;
  Tensor out({n, dout});
  const auto b = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.value().data.data(), dout);
  RowMap(out.data.data(), n, dout).noalias() =
      ConstRowMap(x.value().data.data(), n, din) * ConstRowMap(weight.value().data.data(), dout, din).transpose();
  RowMap(out.data.data(), n, dout).rowwise() += b;
  return tape.record("linear", std::move(out), {x, weight, bias},
                     [=](const Tensor& g) mutable {
                       const ConstRowMap gm(g.data.data(), n, dout);
                       if (x.requires_grad())
                         RowMap(x.grad().data.data(), n, din).noalias() +=
                             gm * ConstRowMap(weight.value().data.data(), dout, din);
                       if (weight.requires_grad())
                         RowMap(weight.grad().data.data(), dout, din).noalias() +=
                             gm.transpose() * ConstRowMap(x.value().data.data(), n, din);
                       if (bias.requires_grad())
                         Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.grad().data.data(), dout) +=
                             gm.colwise().sum();
                     });
}

// Mean of (pred - target)^2 over all entries.
inline DiffTensor mse_loss(Tape& tape, const DiffTensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) fail(ErrorKind::shape, "mse_loss: size mismatch");
  const auto& v = pred.value().data;
  Scalar total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Scalar d = v[i] - target.data[i];
    total += d * d;
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(v.size());
  return tape.record("mse_loss", Tensor({1}, {total * inv_n}), {pred},
                     [pred, target, inv_n](const Tensor& g) mutable {
                       Tensor& gp = pred.grad();
                       const auto& v = pred.value().data;
                       for (std::size_t i = 0; i < v.size(); ++i)
                         gp.data[i] += g.data[0] * 2 * inv_n * (v[i] - target.data[i]);
                     });
}

inline DiffTensor sum(Tape& tape, const DiffTensor& x) {
  Scalar s = 0;
  for (Scalar v : x.value().data) s += v;
  return tape.record("sum", Tensor({1}, {s}), {x}, [x](const Tensor& g) mutable {
    for (auto& v : x.grad().data) v += g.data[0];
  });
}

// sum_i w_i * x_i with constant weights of the same shape.
inline DiffTensor weighted_sum(Tape& tape, const DiffTensor& x, const Tensor& w) {
  if (w.shape != x.shape())
    fail(ErrorKind::shape, "weighted_sum: weights " + shape_string(w.shape) + " vs input " +
                               shape_string(x.shape()));
  const Scalar s = detail::dot(x.value().data.data(), w.data.data(), w.size());
  return tape.record("weighted_sum", Tensor({1}, {s}), {x}, [x, w](const Tensor& g) mutable {
    detail::axpy(g.data[0], w.data.data(), x.grad().data.data(), w.size());
  });
}

inline DiffTensor square(Tape& tape, const DiffTensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.value()[i] * x.value()[i];
  return tape.record("square", std::move(out), {x}, [x](const Tensor& g) mutable {
    Tensor& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += 2 * x.value()[i] * g.data[i];
  });
}

// Elementwise a - b.
inline DiffTensor subtract(Tape& tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape, "subtract: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value()[i] - b.value()[i];
  return tape.record("subtract", std::move(out), {a, b}, [a, b](const Tensor& g) mutable {
    if (a.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) a.grad().data[i] += g.data[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) b.grad().data[i] -= g.data[i];
  });
}

// Elementwise x * s for a constant s.
inline DiffTensor scale(Tape& tape, const DiffTensor& x, Scalar s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.value()[i] * s;
  return tape.record("scale", std::move(out), {x}, [x, s](const Tensor& g) mutable {
    Tensor& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += s * g.data[i];
  });
}

}  // namespace geoseg
