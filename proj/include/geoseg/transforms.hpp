#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numbers>
#include <random>
#include <vector>

#include "json.hpp"

#include "geoseg/synth.hpp"

namespace geoseg {

// ---------------------------------------------------------------------------
// Intensity normalization with training-set statistics.

struct NormStats {
  std::vector<double> mean;  // per channel
  std::vector<double> std;

  nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}}; }
  static NormStats from_json(const nlohmann::json& j) {
    NormStats s{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    if (s.mean.size() != s.std.size() || s.mean.empty())
      fail(ErrorKind::validation, "normalization stats: mean/std length mismatch");
    return s;
  }
};

inline NormStats compute_norm_stats(const std::vector<Sample>& train) {
  if (train.empty()) fail(ErrorKind::validation, "normalize: empty training set");
  const std::size_t c = train.front().image.channels;
  for (const auto& s : train)
    if (s.image.channels != c) fail(ErrorKind::validation, "normalize: channel count differs across samples");
  NormStats st;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0, n = 0;
    for (const auto& s : train) {
      const std::size_t plane = s.image.voxel_count();
      for (std::size_t i = 0; i < plane; ++i) sum += s.image.values[ch * plane + i];
      n += static_cast<double>(plane);
    }
    const double m = sum / n;
    double sq = 0;
    for (const auto& s : train) {
      const std::size_t plane = s.image.voxel_count();
      for (std::size_t i = 0; i < plane; ++i) sq += (s.image.values[ch * plane + i] - m) * (s.image.values[ch * plane + i] - m);
    }
    const double sd = std::sqrt(sq / n);
    if (!(sd > 1e-9 * std::max(1.0, std::abs(m))))
      fail(ErrorKind::numeric, "normalize: channel " + std::to_string(ch) + " has zero variance");
    st.mean.push_back(m);
    st.std.push_back(sd);
  }
  return st;
}

inline ImageGrid normalize_image(const ImageGrid& img, const NormStats& st) {
  if (img.channels != st.mean.size())
    fail(ErrorKind::validation, "normalize: image has " + std::to_string(img.channels) +
                                    " channels, statistics cover " + std::to_string(st.mean.size()));
  ImageGrid out = img;
  const std::size_t plane = img.voxel_count();
  for (std::size_t ch = 0; ch < img.channels; ++ch)
    for (std::size_t i = 0; i < plane; ++i)
      out.values[ch * plane + i] =
          static_cast<Scalar>((img.values[ch * plane + i] - st.mean[ch]) / st.std[ch]);
  return out;
}

inline std::vector<Sample> normalize_dataset(std::vector<Sample> data, const NormStats& st) {
  for (auto& s : data) s.image = normalize_image(s.image, st);
  return data;
}

// Separable Gaussian blur per channel with edge clamping; sigma <= 0 copies.
inline ImageGrid gaussian_smooth(const ImageGrid& img, double sigma) {
  if (!(sigma > 0)) return img;
  if (img.is_3d()) fail(ErrorKind::validation, "gaussian_smooth: 2D images only");
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  ImageGrid tmp = img, out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    const Scalar* src = img.values.data() + c * h * w;
    Scalar* mid = tmp.values.data() + c * h * w;
    Scalar* dst = out.values.data() + c * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * src[y * w + std::clamp(x + i, 0, w - 1)];
        mid[y * w + x] = static_cast<Scalar>(acc);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * mid[std::clamp(y + i, 0, h - 1) * w + x];
        dst[y * w + x] = static_cast<Scalar>(acc);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: flips, rotation in [-pi/8, pi/8], zoom in [0.8, 1.25].

struct AugmentParams {
  bool flip_vertical = false;
  bool flip_horizontal = false;
  double angle = 0;  // radians
  double zoom = 1;

  bool identity() const { return !flip_vertical && !flip_horizontal && angle == 0 && zoom == 1; }
};

template <class Rng>
AugmentParams draw_augment(Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  AugmentParams p;
  p.flip_vertical = u(rng) < 0.5;
  p.flip_horizontal = u(rng) < 0.5;
  p.angle = (2 * u(rng) - 1) * std::numbers::pi / 8;
  p.zoom = 0.8 + u(rng) * (1.25 - 0.8);
  return p;
}

namespace detail {

// Inverse map from output pixel to source coordinates (rotation and zoom
// about the image centre, then flips).
struct Warp {
  double cy, cx, c, s, inv_zoom;
  std::size_t h, w;
  bool fv, fh;

  Warp(const AugmentParams& p, std::size_t h_, std::size_t w_)
      : cy((h_ - 1) / 2.0), cx((w_ - 1) / 2.0), c(std::cos(p.angle)), s(std::sin(p.angle)),
        inv_zoom(1 / p.zoom), h(h_), w(w_), fv(p.flip_vertical), fh(p.flip_horizontal) {}

  void source(std::size_t y, std::size_t x, double& sy, double& sx) const {
    const double dy = (static_cast<double>(y) - cy) * inv_zoom, dx = (static_cast<double>(x) - cx) * inv_zoom;
    sy = c * dy - s * dx + cy;
    sx = s * dy + c * dx + cx;
    if (fv) sy = static_cast<double>(h - 1) - sy;
    if (fh) sx = static_cast<double>(w - 1) - sx;
  }
};

// Bilinear sample with edge clamping.
inline Scalar bilinear(const Scalar* plane, std::size_t h, std::size_t w, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bottom = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<Scalar>(top * (1 - fy) + bottom * fy);
}

inline std::size_t nearest(double v, std::size_t n) {
  return static_cast<std::size_t>(std::clamp(std::lround(v), 0L, static_cast<long>(n) - 1));
}

}  // namespace detail

// Resamples every channel of `image` (bilinear) and `masks` (nearest).
inline void augment_in_place(ImageGrid& image, std::vector<Mask*> masks, const AugmentParams& p) {
  if (p.identity()) return;
  if (image.is_3d()) fail(ErrorKind::validation, "augment: 2D images only");
  const std::size_t h = image.height, w = image.width, plane = h * w;
  const detail::Warp warp(p, h, w);
  ImageGrid out = image;
  std::vector<Mask> mask_out;
  for (auto* m : masks) {
    if (m->height != h || m->width != w) fail(ErrorKind::shape, "augment: mask extents differ from image");
    mask_out.push_back(*m);
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sy, sx;
      warp.source(y, x, sy, sx);
      for (std::size_t c = 0; c < image.channels; ++c)
        out.values[c * plane + y * w + x] = detail::bilinear(image.values.data() + c * plane, h, w, sy, sx);
      const std::size_t ny = detail::nearest(sy, h), nx = detail::nearest(sx, w);
      for (std::size_t k = 0; k < masks.size(); ++k) mask_out[k].at(y, x) = masks[k]->at(ny, nx);
    }
  image = std::move(out);
  for (std::size_t k = 0; k < masks.size(); ++k) *masks[k] = std::move(mask_out[k]);
}

inline Sample augment(const Sample& s, const AugmentParams& p) {
  Sample out = s;
  augment_in_place(out.image, {&out.truth}, p);
  return out;
}

template <std::uniform_random_bit_generator Rng>
Sample augment(const Sample& s, Rng& rng) {
  return augment(s, draw_augment(rng));
}

// ---------------------------------------------------------------------------
// Simulated user interactions on mis-segmented regions.

// Clicks for a mis-segmented component of n_m pixels: 0 below 30, else ceil(n_m / 100).
inline std::size_t clicks_for_region(std::size_t n_m) { return n_m < 30 ? 0 : (n_m + 99) / 100; }

// 4-connected components of the nonzero pixels; returns pixel lists.
inline std::vector<std::vector<Pixel>> connected_components(const Mask& m) {
  const std::size_t h = m.height, w = m.width;
  std::vector<int> label(h * w, -1);
  std::vector<std::vector<Pixel>> comps;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!m.data[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / w, x = i % w;
      comps.back().push_back({static_cast<int>(y), static_cast<int>(x)});
      auto visit = [&](std::size_t j) {
        if (m.data[j] && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
  }
  for (auto& c : comps) std::sort(c.begin(), c.end());
  return comps;
}

struct InteractionOptions {
  int brush_radius = 0;  // > 0 thickens each click into a disc clipped to its region
};

// Under-segmented regions (truth & !pred) get foreground clicks, over-segmented
// regions (pred & !truth) background clicks.
template <class Rng>
ScribbleSet simulate_interactions(const Mask& pred, const Mask& truth, Rng& rng,
                                  const InteractionOptions& opts = {}) {
  if (pred.height != truth.height || pred.width != truth.width)
    fail(ErrorKind::shape, "simulate_interactions: prediction and truth extents differ");
  Mask under(truth.height, truth.width), over(truth.height, truth.width);
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    under.data[i] = truth.data[i] && !pred.data[i];
    over.data[i] = pred.data[i] && !truth.data[i];
  }
  ScribbleSet out;
  auto sample_region = [&](const Mask& region, std::vector<Pixel>& dst) {
    for (const auto& comp : connected_components(region)) {
      const std::size_t n = std::min(clicks_for_region(comp.size()), comp.size());
      if (n == 0) continue;
      std::vector<Pixel> picks;
      std::sample(comp.begin(), comp.end(), std::back_inserter(picks), n, rng);
      for (const auto& p : picks) {
        if (opts.brush_radius <= 0) {
          dst.push_back(p);
          continue;
        }
        const int r = opts.brush_radius;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const Pixel q{p.y + dy, p.x + dx};
            if (dy * dy + dx * dx > r * r || q.y < 0 || q.x < 0 ||
                q.y >= static_cast<int>(region.height) || q.x >= static_cast<int>(region.width))
              continue;
            if (region.at(q.y, q.x) && std::binary_search(comp.begin(), comp.end(), q)) dst.push_back(q);
          }
      }
    }
    std::sort(dst.begin(), dst.end());
    dst.erase(std::unique(dst.begin(), dst.end()), dst.end());
  };
  sample_region(under, out.foreground);
  sample_region(over, out.background);
  return out;
}

}  // namespace geoseg
