#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "geoseg/io.hpp"

namespace geoseg {

struct Sample {
  std::string id;
  ImageGrid image;
  Mask truth;
};

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  double min_fraction = 0.05;  // foreground area fraction bounds
  double max_fraction = 0.5;
  double contrast_lo = 0.15, contrast_hi = 0.4;
  double noise_lo = 0.02, noise_hi = 0.1;
  double background_lo = 0.25, background_hi = 0.45;
  double bias_amplitude = 0.7;      // multiplicative field spans 1 +- this at most
  double boundary_wobble = 0.25;    // per-harmonic relative radius perturbation
};

namespace detail {

// Smooth random field in [-1, 1] built from a few low-frequency cosines.
template <class Rng>
std::vector<double> low_frequency_field(std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  struct Wave { double ky, kx, phase, weight; };
  std::vector<Wave> waves(3);
  for (auto& wv : waves) {
    const double angle = u(rng) * 2 * std::numbers::pi, freq = 0.5 + u(rng);  // cycles per image
    wv = {freq * std::sin(angle) / h, freq * std::cos(angle) / w, u(rng) * 2 * std::numbers::pi, 0.5 + u(rng)};
  }
  std::vector<double> f(h * w);
  double lo = 1e300, hi = -1e300;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = 0;
      for (const auto& wv : waves) v += wv.weight * std::cos(2 * std::numbers::pi * (wv.ky * y + wv.kx * x) + wv.phase);
      f[y * w + x] = v;
      lo = std::min(lo, v), hi = std::max(hi, v);
    }
  for (auto& v : f) v = hi > lo ? 2 * (v - lo) / (hi - lo) - 1 : 0;
  return f;
}

// One or two ellipses with a low-frequency radial perturbation.
template <class Rng>
Mask random_blobs(const SynthConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const double h = static_cast<double>(cfg.height), w = static_cast<double>(cfg.width);
  for (;;) {
    const int blobs = u(rng) < 0.5 ? 1 : 2;
    const double target = cfg.min_fraction + 0.05 + u(rng) * (0.8 * cfg.max_fraction - cfg.min_fraction);
    Mask m(cfg.height, cfg.width);
    for (int b = 0; b < blobs; ++b) {
      const double area = target * h * w / blobs;
      const double aspect = 0.5 + 0.5 * u(rng);
      const double ra = std::sqrt(area / (std::numbers::pi * aspect)), rb = ra * aspect;
      const double cy = h * (0.2 + 0.6 * u(rng)), cx = w * (0.2 + 0.6 * u(rng));
      const double theta = u(rng) * std::numbers::pi;
      double amp[3], phase[3];
      for (int k = 0; k < 3; ++k) amp[k] = cfg.boundary_wobble * u(rng), phase[k] = 2 * std::numbers::pi * u(rng);
      const double c = std::cos(theta), s = std::sin(theta);
      for (std::size_t y = 0; y < cfg.height; ++y)
        for (std::size_t x = 0; x < cfg.width; ++x) {
          const double dy = y - cy, dx = x - cx;
          const double p = (c * dx + s * dy) / ra, q = (-s * dx + c * dy) / rb;
          const double phi = std::atan2(q, p);
          double limit = 1;
          for (int k = 0; k < 3; ++k) limit += amp[k] * std::cos((k + 2) * phi + phase[k]);
          if (std::hypot(p, q) <= limit) m.at(y, x) = 1;
        }
    }
    const double frac = static_cast<double>(m.count()) / (h * w);
    if (frac >= cfg.min_fraction && frac <= cfg.max_fraction) return m;
  }
}

}  // namespace detail

// Independent per-sample streams: sample i depends only on (seed, i).
inline Sample synth_sample(std::uint64_t seed, std::size_t index, const SynthConfig& cfg) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0, 1);
  Sample s;
  char id[32];
  std::snprintf(id, sizeof id, "case%04zu", index);
  s.id = id;
  s.truth = detail::random_blobs(cfg, rng);
  const double background = cfg.background_lo + u(rng) * (cfg.background_hi - cfg.background_lo);
  const double contrast = cfg.contrast_lo + u(rng) * (cfg.contrast_hi - cfg.contrast_lo);
  const double sigma = cfg.noise_lo + u(rng) * (cfg.noise_hi - cfg.noise_lo);
  const double bias = cfg.bias_amplitude * u(rng);
  const auto field = detail::low_frequency_field(cfg.height, cfg.width, rng);
  std::normal_distribution<double> noise(0, sigma);
  s.image = ImageGrid(1, cfg.height, cfg.width);
  for (std::size_t i = 0; i < s.image.values.size(); ++i) {
    const double clean = (background + contrast * s.truth.data[i]) * (1 + bias * field[i]);
    s.image.values[i] = static_cast<Scalar>(std::clamp(clean + noise(rng), 0.0, 1.0));
  }
  return s;
}

inline std::vector<Sample> synth_dataset(std::uint64_t seed, std::size_t count, const SynthConfig& cfg = {},
                                         std::size_t first_index = 0) {
  if (count < 1) fail(ErrorKind::validation, "synth: count must be >= 1");
  if (cfg.height < 32 || cfg.width < 32)
    fail(ErrorKind::validation, "synth: extents must be >= 32 (got " + std::to_string(cfg.height) + "x" +
                                    std::to_string(cfg.width) + ")");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_sample(seed, first_index + i, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/<id>.pgm (or .f32 + sidecar), masks/<id>.pgm, manifest.json.

inline void save_dataset(const fs::path& dir, const std::vector<Sample>& samples,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest = extra;
  manifest["count"] = samples.size();
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    const bool pgm = s.image.channels == 1 && !s.image.is_3d();
    const std::string image = "images/" + s.id + (pgm ? ".pgm" : ".f32");
    const std::string mask = "masks/" + s.id + ".pgm";
    save_image(dir / image, s.image);
    save_mask(dir / mask, s.truth);
    manifest["samples"].push_back({{"id", s.id}, {"image", image}, {"mask", mask}});
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<Sample> load_dataset(const fs::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, "dataset manifest: " + std::string(e.what()));
  }
  std::vector<Sample> out;
  try {
    for (const auto& entry : manifest.at("samples")) {
      Sample s;
      s.id = entry.at("id").get<std::string>();
      s.image = load_image(dir / entry.at("image").get<std::string>());
      s.truth = load_mask(dir / entry.at("mask").get<std::string>());
      if (s.truth.height != s.image.height || s.truth.width != s.image.width)
        fail(ErrorKind::validation, "dataset: mask and image extents differ for " + s.id);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, "dataset manifest: " + std::string(e.what()));
  }
  if (out.empty()) fail(ErrorKind::validation, "dataset " + dir.string() + " has no samples");
  return out;
}

}  // namespace geoseg
