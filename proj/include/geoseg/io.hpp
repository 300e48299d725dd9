#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "geoseg/image.hpp"

namespace geoseg {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::not_found, "no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes via a temporary file and rename so readers never see partial files.
inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// PGM (binary P5). 8- or 16-bit; samples are big-endian when maxval > 255.

struct Graymap {
  std::size_t height = 0;
  std::size_t width = 0;
  unsigned maxval = 255;
  std::vector<std::uint16_t> samples;
};

inline Graymap decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space_and_comments();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(ErrorKind::validation, std::string("pgm: missing ") + what);
    return std::stoul(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    fail(ErrorKind::validation, "pgm: not a binary (P5) graymap");
  pos = 2;
  Graymap g;
  g.width = number("width");
  g.height = number("height");
  g.maxval = static_cast<unsigned>(number("maxval"));
  if (g.width == 0 || g.height == 0) fail(ErrorKind::validation, "pgm: zero extent");
  if (g.maxval == 0 || g.maxval > 65535) fail(ErrorKind::validation, "pgm: maxval out of range");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    fail(ErrorKind::validation, "pgm: malformed header");
  ++pos;
  const std::size_t bps = g.maxval > 255 ? 2 : 1, n = g.width * g.height;
  if (bytes.size() - pos < n * bps)
    fail(ErrorKind::validation, "pgm: pixel data truncated (" + std::to_string(bytes.size() - pos) +
                                    " of " + std::to_string(n * bps) + " bytes)");
  g.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * bps);
    g.samples[i] = bps == 2 ? static_cast<std::uint16_t>(p[0] << 8 | p[1]) : p[0];
    if (g.samples[i] > g.maxval) fail(ErrorKind::validation, "pgm: sample exceeds maxval");
  }
  return g;
}

inline std::string encode_pgm(const Graymap& g) {
  std::string out = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n" +
                    std::to_string(g.maxval) + "\n";
  const bool wide = g.maxval > 255;
  for (std::uint16_t s : g.samples) {
    if (wide) out.push_back(static_cast<char>(s >> 8));
    out.push_back(static_cast<char>(s & 0xff));
  }
  return out;
}

// Intensities in [0, 1] map linearly onto [0, maxval]; values outside are clamped.
inline std::string encode_image_pgm(const ImageGrid& img, unsigned maxval = 65535) {
  if (img.channels != 1 || img.is_3d()) fail(ErrorKind::validation, "pgm holds single-channel 2D images only");
  Graymap g{img.height, img.width, maxval, {}};
  g.samples.reserve(img.values.size());
  for (Scalar v : img.values)
    g.samples.push_back(static_cast<std::uint16_t>(std::lround(std::clamp<double>(v, 0, 1) * maxval)));
  return encode_pgm(g);
}

inline ImageGrid decode_image_pgm(const std::string& bytes) {
  const Graymap g = decode_pgm(bytes);
  ImageGrid img(1, g.height, g.width);
  for (std::size_t i = 0; i < g.samples.size(); ++i)
    img.values[i] = static_cast<Scalar>(g.samples[i]) / static_cast<Scalar>(g.maxval);
  return img;
}

// Masks are stored as 0 / 255; any nonzero sample reads as foreground.
inline std::string encode_mask_pgm(const Mask& m) {
  Graymap g{m.height, m.width, 255, {}};
  for (auto v : m.data) g.samples.push_back(v ? 255 : 0);
  return encode_pgm(g);
}

inline Mask decode_mask_pgm(const std::string& bytes) {
  const Graymap g = decode_pgm(bytes);
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < g.samples.size(); ++i) m.data[i] = g.samples[i] != 0;
  return m;
}

// ---------------------------------------------------------------------------
// Raw little-endian float32 volume [C, D, H, W] with a JSON sidecar
// {"extents": [D, H, W], "spacing": [z, y, x], "channels": C}.

inline std::string encode_f32(std::span<const Scalar> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(out.data() + 4 * i, &bits, 4);
  }
  return out;
}

inline std::vector<Scalar> decode_f32(const std::string& bytes, std::size_t expected) {
  if (bytes.size() != expected * 4)
    fail(ErrorKind::validation, "f32: expected " + std::to_string(expected * 4) + " bytes, got " +
                                    std::to_string(bytes.size()));
  std::vector<Scalar> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[i] = static_cast<Scalar>(std::bit_cast<float>(bits));
  }
  return out;
}

inline nlohmann::json volume_sidecar(const ImageGrid& img) {
  return {{"extents", {img.depth, img.height, img.width}},
          {"spacing", {img.spacing[0], img.spacing[1], img.spacing[2]}},
          {"channels", img.channels}};
}

inline ImageGrid volume_from_parts(const nlohmann::json& sidecar, const std::string& blob) {
  try {
    const auto ext = sidecar.at("extents").get<std::vector<std::size_t>>();
    if (ext.size() != 3) fail(ErrorKind::validation, "f32 sidecar: extents must have 3 entries");
    ImageGrid img(sidecar.at("channels").get<std::size_t>(), ext[0], ext[1], ext[2]);
    if (sidecar.contains("spacing")) {
      const auto sp = sidecar.at("spacing").get<std::vector<double>>();
      if (sp.size() != 3) fail(ErrorKind::validation, "f32 sidecar: spacing must have 3 entries");
      img.spacing = {sp[0], sp[1], sp[2]};
    }
    img.values = decode_f32(blob, img.channels * img.voxel_count());
    img.validate();
    return img;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("f32 sidecar: ") + e.what());
  }
}

inline fs::path sidecar_path(const fs::path& f32) { return fs::path(f32.string() + ".json"); }

inline void save_volume(const fs::path& path, const ImageGrid& img) {
  write_file(path, encode_f32(img.values));
  write_file(sidecar_path(path), volume_sidecar(img).dump(2) + "\n");
}

inline ImageGrid load_volume(const fs::path& path) {
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(read_file(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, "f32 sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
  return volume_from_parts(sidecar, read_file(path));
}

// Dispatches on extension: .pgm or .f32 (with sidecar).
inline ImageGrid load_image(const fs::path& path) {
  if (path.extension() == ".f32") return load_volume(path);
  return decode_image_pgm(read_file(path));
}

inline void save_image(const fs::path& path, const ImageGrid& img) {
  if (path.extension() == ".f32") return save_volume(path, img);
  write_file(path, encode_image_pgm(img));
}

inline Mask load_mask(const fs::path& path) { return decode_mask_pgm(read_file(path)); }
inline void save_mask(const fs::path& path, const Mask& m) { write_file(path, encode_mask_pgm(m)); }

}  // namespace geoseg
