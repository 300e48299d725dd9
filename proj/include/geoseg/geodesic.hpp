#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <queue>
#include <random>
#include <span>
#include <vector>

#include "geoseg/image.hpp"

namespace geoseg {

// Unsigned distance field over the voxels of an image grid.
struct DistanceMap {
  std::size_t depth = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  DistanceMap() = default;
  DistanceMap(std::size_t d, std::size_t h, std::size_t w, double fill)
      : depth(d), height(h), width(w), values(d * h * w, fill) {}

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const {
    return values[(z * height + y) * width + x];
  }
};

enum class SweepMode {
  single_pass,  // one forward and one backward raster sweep
  converged,    // sweep pairs until no value changes
};

enum class DistanceMetric { geodesic, euclidean };

struct GeodesicOptions {
  double lambda_spatial = 0.0;
  SweepMode mode = SweepMode::single_pass;
  // Cap for SweepMode::converged; 0 means the voxel count, which always
  // suffices because every sweep pair extends each optimal path by a segment.
  std::size_t max_sweep_pairs = 0;
};

namespace detail {

struct Offset {
  int dz, dy, dx;
};

// 8-connected (2D) or 26-connected (3D) neighbourhood.
inline std::vector<Offset> grid_neighbourhood(bool three_d) {
  std::vector<Offset> out;
  for (int dz = three_d ? -1 : 0; dz <= (three_d ? 1 : 0); ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dz || dy || dx) out.push_back({dz, dy, dx});
  return out;
}

inline bool precedes(const Offset& o) {
  return o.dz < 0 || (o.dz == 0 && (o.dy < 0 || (o.dy == 0 && o.dx < 0)));
}

// Step cost between voxel a and its neighbour a + o:
//   sqrt(lambda^2 * |spatial step|^2 + sum_c (I_c(a) - I_c(b))^2)
class StepCost {
 public:
  StepCost(const ImageGrid& image, double lambda) : image_(image), lambda2_(lambda * lambda) {}

  double operator()(std::size_t a, std::size_t b, const Offset& o) const {
    const double sz = o.dz * image_.spacing[0], sy = o.dy * image_.spacing[1],
                 sx = o.dx * image_.spacing[2];
    double s = lambda2_ * (sz * sz + sy * sy + sx * sx);
    const std::size_t n = image_.voxel_count();
    for (std::size_t c = 0; c < image_.channels; ++c) {
      const double d = static_cast<double>(image_.values[c * n + a]) -
                       static_cast<double>(image_.values[c * n + b]);
      s += d * d;
    }
    return std::sqrt(s);
  }

 private:
  const ImageGrid& image_;
  double lambda2_;
};

inline std::vector<std::size_t> seed_indices(const ImageGrid& image, std::span<const Voxel> seeds) {
  if (seeds.empty()) fail(ErrorKind::validation, "distance transform needs a nonempty seed set");
  std::vector<std::size_t> out;
  out.reserve(seeds.size());
  for (const auto& s : seeds) {
    if (!image.contains(s))
      fail(ErrorKind::validation, "seed (" + std::to_string(s.z) + "," + std::to_string(s.y) +
                                      "," + std::to_string(s.x) + ") is out of bounds");
    out.push_back((static_cast<std::size_t>(s.z) * image.height + s.y) * image.width + s.x);
  }
  return out;
}

inline std::vector<Voxel> to_voxels(std::span<const Pixel> pixels) {
  std::vector<Voxel> out;
  out.reserve(pixels.size());
  for (const auto& p : pixels) out.push_back(p.voxel());
  return out;
}

}  // namespace detail

// Raster-scan geodesic distance transform with a 3x3 (3x3x3) kernel.
// Returns the number of sweep pairs performed through `sweeps` when given.
inline DistanceMap geodesic_distance_map(const ImageGrid& image, std::span<const Voxel> seeds,
                                         const GeodesicOptions& options = {},
                                         std::size_t* sweeps = nullptr) {
  image.validate();
  const auto seed_idx = detail::seed_indices(image, seeds);
  const int d = static_cast<int>(image.depth), h = static_cast<int>(image.height),
            w = static_cast<int>(image.width);
  DistanceMap map(image.depth, image.height, image.width, std::numeric_limits<double>::infinity());
  for (auto i : seed_idx) map.values[i] = 0.0;

  std::vector<detail::Offset> forward, backward;
  for (const auto& o : detail::grid_neighbourhood(image.is_3d()))
    (detail::precedes(o) ? forward : backward).push_back(o);
  const detail::StepCost cost(image, options.lambda_spatial);

  auto sweep = [&](const std::vector<detail::Offset>& offsets, bool ascending) {
    bool changed = false;
    for (int zi = 0; zi < d; ++zi)
      for (int yi = 0; yi < h; ++yi)
        for (int xi = 0; xi < w; ++xi) {
          const int z = ascending ? zi : d - 1 - zi;
          const int y = ascending ? yi : h - 1 - yi;
          const int x = ascending ? xi : w - 1 - xi;
          const std::size_t a = (static_cast<std::size_t>(z) * h + y) * w + x;
          double best = map.values[a];
          for (const auto& o : offsets) {
            const int nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
            if (nz < 0 || ny < 0 || nx < 0 || nz >= d || ny >= h || nx >= w) continue;
            const std::size_t b = (static_cast<std::size_t>(nz) * h + ny) * w + nx;
            const double nb = map.values[b];
            if (nb == std::numeric_limits<double>::infinity()) continue;
            const double cand = nb + cost(a, b, o);
            if (cand < best) best = cand;
          }
          if (best < map.values[a]) {
            map.values[a] = best;
            changed = true;
          }
        }
    return changed;
  };

  const std::size_t cap =
      options.max_sweep_pairs ? options.max_sweep_pairs : image.voxel_count() + 1;
  std::size_t pairs = 0;
  do {
    bool changed = sweep(forward, true);
    changed = sweep(backward, false) || changed;
    ++pairs;
    if (options.mode == SweepMode::single_pass || !changed) break;
  } while (pairs < cap);
  if (sweeps) *sweeps = pairs;
  return map;
}

inline DistanceMap geodesic_distance_map(const ImageGrid& image, std::span<const Pixel> seeds,
                                         const GeodesicOptions& options = {},
                                         std::size_t* sweeps = nullptr) {
  const auto voxels = detail::to_voxels(seeds);
  return geodesic_distance_map(image, voxels, options, sweeps);
}

// Exact multi-seed shortest paths on the same weighted grid graph (Dijkstra).
inline DistanceMap dijkstra_geodesic_oracle(const ImageGrid& image, std::span<const Voxel> seeds,
                                            double lambda_spatial = 0.0) {
  image.validate();
  const auto seed_idx = detail::seed_indices(image, seeds);
  const int d = static_cast<int>(image.depth), h = static_cast<int>(image.height),
            w = static_cast<int>(image.width);
  DistanceMap map(image.depth, image.height, image.width, std::numeric_limits<double>::infinity());
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  for (auto i : seed_idx) {
    map.values[i] = 0.0;
    heap.push({0.0, i});
  }
  const auto offsets = detail::grid_neighbourhood(image.is_3d());
  const detail::StepCost cost(image, lambda_spatial);
  std::vector<bool> done(map.values.size(), false);
  while (!heap.empty()) {
    const auto [dist, a] = heap.top();
    heap.pop();
    if (done[a]) continue;
    done[a] = true;
    const int x = static_cast<int>(a % w), y = static_cast<int>((a / w) % h),
              z = static_cast<int>(a / (static_cast<std::size_t>(w) * h));
    for (const auto& o : offsets) {
      const int nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
      if (nz < 0 || ny < 0 || nx < 0 || nz >= d || ny >= h || nx >= w) continue;
      const std::size_t b = (static_cast<std::size_t>(nz) * h + ny) * w + nx;
      if (done[b]) continue;
      // cost(b, a) with the reversed offset equals cost(a, b, o).
      const double cand = dist + cost(a, b, o);
      if (cand < map.values[b]) {
        map.values[b] = cand;
        heap.push({cand, b});
      }
    }
  }
  return map;
}

inline DistanceMap dijkstra_geodesic_oracle(const ImageGrid& image, std::span<const Pixel> seeds,
                                            double lambda_spatial = 0.0) {
  const auto voxels = detail::to_voxels(seeds);
  return dijkstra_geodesic_oracle(image, voxels, lambda_spatial);
}

namespace detail {

// Exact 1D squared-distance transform of a sampled function (lower envelope
// of parabolas) with sample spacing `step`.
inline void squared_distance_1d(std::vector<double>& f, double step) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> out(n);
  std::vector<std::size_t> hull(n);
  std::vector<double> bound(n + 1);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) return;
  hull[0] = first;
  bound[0] = -inf;
  bound[1] = inf;
  // bound[0] = -inf stops the pop loop at k = 0.
  auto pos = [step](std::size_t i) { return static_cast<double>(i) * step; };
  auto intersect = [&](std::size_t q, std::size_t v) {
    return ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)));
  };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s = intersect(q, hull[k]);
    while (s <= bound[k]) {
      --k;
      s = intersect(q, hull[k]);
    }
    ++k;
    hull[k] = q;
    bound[k] = s;
    bound[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (bound[k + 1] < pos(q)) ++k;
    const double dq = pos(q) - pos(hull[k]);
    out[q] = dq * dq + f[hull[k]];
  }
  f = std::move(out);
}

}  // namespace detail

// Exact Euclidean distance to the nearest seed via separable squared-distance
// transforms along z, y, then x.
inline DistanceMap euclidean_distance_map(std::span<const Voxel> seeds, std::size_t depth,
                                          std::size_t height, std::size_t width,
                                          std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
  ImageGrid extents(1, depth, height, width);
  extents.spacing = spacing;
  const auto seed_idx = detail::seed_indices(extents, seeds);
  for (double s : spacing)
    if (!(s > 0)) fail(ErrorKind::validation, "spacing must be > 0");
  DistanceMap map(depth, height, width, std::numeric_limits<double>::infinity());
  for (auto i : seed_idx) map.values[i] = 0.0;
  const std::size_t extent[3] = {depth, height, width};
  const std::size_t stride[3] = {height * width, width, 1};
  for (int axis = 0; axis < 3; ++axis) {
    if (extent[axis] == 1) continue;
    std::vector<double> line(extent[axis]);
    const std::size_t total = map.values.size();
    for (std::size_t base = 0; base < total; ++base) {
      // Visit each line once, from its first element.
      if ((base / stride[axis]) % extent[axis] != 0) continue;
      for (std::size_t i = 0; i < extent[axis]; ++i) line[i] = map.values[base + i * stride[axis]];
      detail::squared_distance_1d(line, spacing[axis]);
      for (std::size_t i = 0; i < extent[axis]; ++i) map.values[base + i * stride[axis]] = line[i];
    }
  }
  for (auto& v : map.values) v = std::sqrt(v);
  return map;
}

inline DistanceMap euclidean_distance_map(std::span<const Pixel> seeds, std::size_t height,
                                          std::size_t width, double spacing_y = 1.0,
                                          double spacing_x = 1.0) {
  const auto voxels = detail::to_voxels(seeds);
  return euclidean_distance_map(voxels, 1, height, width, {1.0, spacing_y, spacing_x});
}

inline double image_diagonal(const ImageGrid& image) {
  const double dz = image.depth > 1 ? image.depth * image.spacing[0] : 0.0;
  const double dy = image.height * image.spacing[1], dx = image.width * image.spacing[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

// R-Net input [C_I + 3, H, W]: raw image channels, initial foreground
// probability, foreground-scribble distance, background-scribble distance.
// An empty scribble class gets i.i.d. U(0, diagonal) noise in its channel.
template <class Rng>
Tensor encode_interactions(const ImageGrid& image, std::span<const Scalar> initial_foreground,
                           const ScribbleSet& scribbles, DistanceMetric metric, Rng& rng,
                           const GeodesicOptions& options = {}) {
  image.validate();
  if (image.is_3d()) fail(ErrorKind::shape, "encode_interactions needs a 2D image");
  const std::size_t h = image.height, w = image.width, plane = h * w;
  if (initial_foreground.size() != plane)
    fail(ErrorKind::shape, "initial segmentation extents do not match the image");
  scribbles.validate(h, w);

  Tensor out({image.channels + 3, h, w});
  std::copy(image.values.begin(), image.values.end(), out.data.begin());
  std::copy(initial_foreground.begin(), initial_foreground.end(),
            out.data.begin() + image.channels * plane);

  const double diagonal = image_diagonal(image);
  auto fill_channel = [&](std::size_t channel, const std::vector<Pixel>& seeds) {
    auto dst = out.data.begin() + channel * plane;
    if (seeds.empty()) {
      std::uniform_real_distribution<double> noise(0.0, diagonal);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<Scalar>(noise(rng));
      return;
    }
    const DistanceMap map = metric == DistanceMetric::geodesic
                                ? geodesic_distance_map(image, std::span<const Pixel>(seeds), options)
                                : euclidean_distance_map(std::span<const Pixel>(seeds), h, w,
                                                         image.spacing[1], image.spacing[2]);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<Scalar>(map.values[i]);
  };
  fill_channel(image.channels + 1, scribbles.foreground);
  fill_channel(image.channels + 2, scribbles.background);
  return out;
}

}  // namespace geoseg
