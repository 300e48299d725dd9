#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/tensor.hpp"

namespace geoseg {

struct Voxel {
  int z = 0;
  int y = 0;
  int x = 0;

  friend auto operator<=>(const Voxel&, const Voxel&) = default;
};

struct Pixel {
  int y = 0;
  int x = 0;

  friend auto operator<=>(const Pixel&, const Pixel&) = default;
  Voxel voxel() const { return {0, y, x}; }
};

inline std::string to_string(const Pixel& p) {
  return "(" + std::to_string(p.y) + "," + std::to_string(p.x) + ")";
}

// Multi-channel scalar field [C, D, H, W]; D = 1 for 2D images.
struct ImageGrid {
  std::size_t channels = 1;
  std::size_t depth = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // z, y, x
  std::vector<Scalar> values;

  ImageGrid() = default;
  ImageGrid(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), values(c * h * w, Scalar(0)) {}
  ImageGrid(std::size_t c, std::size_t d, std::size_t h, std::size_t w)
      : channels(c), depth(d), height(h), width(w), values(c * d * h * w, Scalar(0)) {}

  std::size_t voxel_count() const { return depth * height * width; }
  bool is_3d() const { return depth > 1; }

  Scalar& at(std::size_t c, std::size_t y, std::size_t x) {
    return values[(c * height + y) * width + x];
  }
  Scalar at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * height + y) * width + x];
  }
  Scalar& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return values[((c * depth + z) * height + y) * width + x];
  }
  Scalar at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return values[((c * depth + z) * height + y) * width + x];
  }

  bool contains(const Voxel& v) const {
    return v.z >= 0 && v.y >= 0 && v.x >= 0 && static_cast<std::size_t>(v.z) < depth &&
           static_cast<std::size_t>(v.y) < height && static_cast<std::size_t>(v.x) < width;
  }
  bool contains(const Pixel& p) const { return depth == 1 && contains(p.voxel()); }

  void validate() const {
    if (channels == 0 || depth == 0 || height == 0 || width == 0)
      fail(ErrorKind::validation, "image extents must be >= 1");
    if (values.size() != channels * voxel_count())
      fail(ErrorKind::shape, "image value count does not match extents");
    for (double s : spacing)
      if (!(s > 0)) fail(ErrorKind::validation, "image spacing must be > 0");
    for (Scalar v : values)
      if (!std::isfinite(v)) fail(ErrorKind::validation, "image contains non-finite values");
  }

  // [C, H, W] tensor view of a 2D image.
  Tensor to_tensor() const {
    if (depth != 1) fail(ErrorKind::shape, "to_tensor needs a 2D image");
    return Tensor({channels, height, width}, values);
  }

  static ImageGrid from_tensor(const Tensor& t) {
    if (t.rank() != 3) fail(ErrorKind::shape, "from_tensor needs a [C,H,W] tensor");
    ImageGrid g(t.dim(0), t.dim(1), t.dim(2));
    g.values = t.data;
    return g;
  }
};

// Binary label map [H, W].
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
  }
  bool operator==(const Mask&) const = default;
};

// Foreground (S_f) and background (S_b) scribble pixels.
struct ScribbleSet {
  std::vector<Pixel> foreground;
  std::vector<Pixel> background;

  bool empty() const { return foreground.empty() && background.empty(); }
  std::size_t size() const { return foreground.size() + background.size(); }

  // Throws naming every out-of-bounds or doubly-labelled pixel.
  void validate(std::size_t height, std::size_t width) const {
    std::string bad;
    auto check = [&](const std::vector<Pixel>& pixels) {
      for (const auto& p : pixels)
        if (p.y < 0 || p.x < 0 || static_cast<std::size_t>(p.y) >= height ||
            static_cast<std::size_t>(p.x) >= width)
          bad += (bad.empty() ? "" : " ") + to_string(p);
    };
    check(foreground);
    check(background);
    if (!bad.empty()) fail(ErrorKind::validation, "scribble pixels out of bounds: " + bad);
    std::set<Pixel> fg(foreground.begin(), foreground.end());
    std::string both;
    for (const auto& p : background)
      if (fg.count(p)) both += (both.empty() ? "" : " ") + to_string(p);
    if (!both.empty())
      fail(ErrorKind::validation, "pixels labelled both foreground and background: " + both);
  }

  // Per-pixel label: -1 free, 0 background, 1 foreground.
  std::vector<std::int8_t> label_map(std::size_t height, std::size_t width) const {
    validate(height, width);
    std::vector<std::int8_t> labels(height * width, -1);
    for (const auto& p : background) labels[p.y * width + p.x] = 0;
    for (const auto& p : foreground) labels[p.y * width + p.x] = 1;
    return labels;
  }
};

}  // namespace geoseg
