#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <boost/beast/core/detail/base64.hpp>
#include <boost/uuid/uuid.hpp>
#include <boost/uuid/uuid_generators.hpp>
#include <boost/uuid/uuid_io.hpp>

#include "json.hpp"

#include "geoseg/inference.hpp"

namespace geoseg {

// ---------------------------------------------------------------------------
// Wire helpers: base64 PGM masks, base64 float32 probability maps.

inline std::string base64_encode(const std::string& bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline std::string base64_decode(const std::string& text) {
  namespace b64 = boost::beast::detail::base64;
  std::size_t body = text.size();
  while (body > 0 && text.size() - body < 2 && text[body - 1] == '=') --body;  // decode stops at padding
  std::string out(b64::decoded_size(text.size()), '\0');
  const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
  if (read != body) fail(ErrorKind::validation, "malformed base64 payload");
  out.resize(written);
  return out;
}

// Probabilities travel and persist as float32; keeping the in-memory copy
// float-rounded too makes every later refinement independent of that choice.
inline std::vector<Scalar> round_to_float(std::vector<Scalar> v) {
  for (auto& x : v) x = static_cast<Scalar>(static_cast<float>(x));
  return v;
}

// Sessions persist images as float32, so every inference entry point (service
// and CLI) runs on the float32 values to keep the paths bit-identical.
inline ImageGrid as_float32(ImageGrid img) {
  img.values = round_to_float(std::move(img.values));
  return img;
}

inline nlohmann::json probability_to_json(std::size_t h, std::size_t w, const std::vector<Scalar>& p) {
  return {{"extents", {h, w}}, {"encoding", "float32-le"}, {"data", base64_encode(encode_f32(p))}};
}

// Image payload: {"format": "pgm", "data": base64} or
// {"format": "f32", "extents": [H, W], "channels": C, "data": base64}.
inline ImageGrid image_from_json(const nlohmann::json& j) {
  try {
    const std::string format = j.value("format", "pgm");
    const std::string bytes = base64_decode(j.at("data").get<std::string>());
    if (format == "pgm") return decode_image_pgm(bytes);
    if (format == "f32") {
      const auto ext = j.at("extents").get<std::vector<std::size_t>>();
      if (ext.size() != 2) fail(ErrorKind::validation, "image extents must be [H, W]");
      return volume_from_parts({{"extents", {1, ext[0], ext[1]}}, {"channels", j.value("channels", std::size_t{1})}},
                               bytes);
    }
    fail(ErrorKind::validation, "unsupported image format '" + format + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("image payload: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Session state and its on-disk form: <store>/<id>/state.json, image.f32
// (+ sidecar), mask.pgm, probability.f32.

struct Session {
  std::string id;
  std::string pnet_name;
  std::string rnet_name;
  ImageGrid image;                          // raw, as uploaded
  std::vector<Scalar> probability;          // current foreground probability (float-rounded)
  Mask mask;                                // current segmentation
  std::map<Pixel, std::int8_t> scribbles;   // accumulated; last label wins
  bool pending = false;                     // scribbles changed since the last refine
  std::size_t round = 0;
  std::string created;
  std::string updated;

  ScribbleSet scribble_set() const {
    ScribbleSet s;
    for (const auto& [p, label] : scribbles) (label ? s.foreground : s.background).push_back(p);
    return s;
  }

  nlohmann::json scribbles_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [p, label] : scribbles) out.push_back({{"y", p.y}, {"x", p.x}, {"label", label}});
    return out;
  }

  nlohmann::json state_json() const {
    return {{"id", id},           {"pnet", pnet_name},       {"rnet", rnet_name},
            {"height", image.height}, {"width", image.width}, {"channels", image.channels},
            {"round", round},     {"pending", pending},      {"scribbles", scribbles_json()},
            {"created", created}, {"updated", updated}};
  }

  // Full view returned by the API.
  nlohmann::json to_json() const {
    auto j = state_json();
    j["mask"] = base64_encode(encode_mask_pgm(mask));
    j["probability"] = probability_to_json(image.height, image.width, probability);
    return j;
  }
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class SessionStore {
 public:
  explicit SessionStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }

  static void check_id(const std::string& id) {
    const bool ok = !id.empty() && id.size() <= 64 &&
                    std::all_of(id.begin(), id.end(), [](char c) { return std::isxdigit(static_cast<unsigned char>(c)) || c == '-'; });
    if (!ok) fail(ErrorKind::not_found, "unknown session '" + id + "'");
  }

  bool exists(const std::string& id) const {
    check_id(id);
    return fs::exists(root_ / id / "state.json");
  }

  void save(const Session& s) const {
    const fs::path dir = root_ / s.id;
    save_volume(dir / "image.f32", s.image);
    write_file(dir / "probability.f32", encode_f32(s.probability));
    save_mask(dir / "mask.pgm", s.mask);
    write_file(dir / "state.json", s.state_json().dump(2) + "\n");  // last: marks the session complete
  }

  Session load(const std::string& id) const {
    if (!exists(id)) fail(ErrorKind::not_found, "unknown session '" + id + "'");
    const fs::path dir = root_ / id;
    Session s;
    try {
      const auto j = nlohmann::json::parse(read_file(dir / "state.json"));
      s.id = j.at("id").get<std::string>();
      s.pnet_name = j.at("pnet").get<std::string>();
      s.rnet_name = j.at("rnet").get<std::string>();
      s.round = j.at("round").get<std::size_t>();
      s.pending = j.at("pending").get<bool>();
      s.created = j.at("created").get<std::string>();
      s.updated = j.at("updated").get<std::string>();
      for (const auto& e : j.at("scribbles"))
        s.scribbles[{e.at("y").get<int>(), e.at("x").get<int>()}] = static_cast<std::int8_t>(e.at("label").get<int>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::io, "session " + id + " state is corrupt: " + e.what());
    }
    s.image = load_volume(dir / "image.f32");
    s.probability = decode_f32(read_file(dir / "probability.f32"), s.image.height * s.image.width);
    s.mask = load_mask(dir / "mask.pgm");
    return s;
  }

  void remove(const std::string& id) const {
    if (!exists(id)) fail(ErrorKind::not_found, "unknown session '" + id + "'");
    fs::remove_all(root_ / id);
  }

 private:
  fs::path root_;
};

// Loads checkpoints from a directory on first use; shared read-only afterwards.
class ModelRegistry {
 public:
  explicit ModelRegistry(fs::path dir) : dir_(std::move(dir)) {}

  std::shared_ptr<const ModelCheckpoint> get(const std::string& name, ModelRole role) {
    const bool ok = !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    }) && name.find("..") == std::string::npos;
    if (!ok) fail(ErrorKind::validation, "invalid model name '" + name + "'");
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    if (dir_.empty() || !fs::exists(CheckpointFiles::from(dir_ / name).manifest))
      fail(ErrorKind::unavailable, "model '" + name + "' is not available in '" + dir_.string() + "'");
    auto ck = std::make_shared<const ModelCheckpoint>(load_checkpoint(dir_ / name));
    if (ck->role != role)
      fail(ErrorKind::unavailable, "model '" + name + "' is a " + to_string(ck->role) + ", expected " + to_string(role));
    cache_[name] = ck;
    return ck;
  }

 private:
  fs::path dir_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const ModelCheckpoint>> cache_;
};

struct ScribbleEntry {
  Pixel pixel;
  std::int8_t label;
};

inline std::vector<ScribbleEntry> scribbles_from_json(const nlohmann::json& j) {
  std::vector<ScribbleEntry> out;
  try {
    const auto& list = j.is_array() ? j : j.at("scribbles");
    for (const auto& e : list) {
      const int label = e.at("label").get<int>();
      if (label != 0 && label != 1) fail(ErrorKind::validation, "scribble label must be 0 or 1");
      out.push_back({{e.at("y").get<int>(), e.at("x").get<int>()}, static_cast<std::int8_t>(label)});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("scribble payload: ") + e.what());
  }
  return out;
}

// Accumulated scribbles as a set; later entries replace earlier ones.
inline ScribbleSet accumulate_scribbles(const std::vector<ScribbleEntry>& entries) {
  std::map<Pixel, std::int8_t> m;
  for (const auto& e : entries) m[e.pixel] = e.label;
  ScribbleSet s;
  for (const auto& [p, label] : m) (label ? s.foreground : s.background).push_back(p);
  return s;
}

// The interactive loop. Operations on one session are serialized by that
// session's mutex; different sessions proceed concurrently.
class SessionService {
 public:
  SessionService(fs::path model_dir, fs::path store_dir) : models_(std::move(model_dir)), store_(std::move(store_dir)) {}

  SessionStore& store() { return store_; }

  nlohmann::json create(const ImageGrid& image, const std::string& pnet_name = "pnet",
                        const std::string& rnet_name = "rnet") {
    const auto pnet = models_.get(pnet_name, ModelRole::pnet);
    const ImageGrid stored = as_float32(image);
    const Segmentation seg = propose(*pnet, stored, true);
    Session s;
    s.id = boost::uuids::to_string(new_uuid());
    s.pnet_name = pnet_name;
    s.rnet_name = rnet_name;
    s.image = stored;
    s.probability = round_to_float(seg.foreground());
    s.mask = seg.mask;
    s.created = s.updated = utc_now();
    auto lock = lock_session(s.id);
    store_.save(s);
    return s.to_json();
  }

  nlohmann::json get(const std::string& id) {
    auto lock = lock_session(id);
    return store_.load(id).to_json();
  }

  std::string mask_pgm(const std::string& id) {
    auto lock = lock_session(id);
    return encode_mask_pgm(store_.load(id).mask);
  }

  // Whole request is rejected if any entry is out of bounds.
  nlohmann::json submit(const std::string& id, const std::vector<ScribbleEntry>& entries) {
    auto lock = lock_session(id);
    Session s = store_.load(id);
    std::string bad;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& p = entries[i].pixel;
      if (p.y < 0 || p.x < 0 || static_cast<std::size_t>(p.y) >= s.image.height ||
          static_cast<std::size_t>(p.x) >= s.image.width)
        bad += (bad.empty() ? "" : ", ") + std::to_string(i) + " " + to_string(p);
    }
    if (!bad.empty()) fail(ErrorKind::validation, "scribble entries out of bounds: " + bad);
    std::map<Pixel, std::int8_t> incoming;
    for (const auto& e : entries) incoming[e.pixel] = e.label;
    bool changed = false;
    for (const auto& [p, label] : incoming) {
      auto it = s.scribbles.find(p);
      if (it == s.scribbles.end() || it->second != label) changed = true;
      s.scribbles[p] = label;
    }
    if (changed) {
      s.pending = true;
      s.updated = utc_now();
      store_.save(s);
    }
    return {{"accepted", incoming.size()}, {"total", s.scribbles.size()}, {"pending", s.pending}};
  }

  nlohmann::json refine(const std::string& id) {
    auto lock = lock_session(id);
    Session s = store_.load(id);
    if (!s.pending) {
      auto j = s.to_json();
      j["refined"] = false;
      return j;
    }
    const auto rnet = models_.get(s.rnet_name, ModelRole::rnet);
    Segmentation seg;
    try {
      seg = geoseg::refine(*rnet, s.image, s.probability, s.scribble_set(), true);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::unavailable) throw;
      fail(ErrorKind::numeric, std::string("refinement failed: ") + e.what());
    }
    s.probability = round_to_float(seg.foreground());
    s.mask = seg.mask;
    s.pending = false;
    ++s.round;
    s.updated = utc_now();
    store_.save(s);
    auto j = s.to_json();
    j["refined"] = true;
    return j;
  }

  void remove(const std::string& id) {
    auto lock = lock_session(id);
    store_.remove(id);
  }

 private:
  std::unique_lock<std::mutex> lock_session(const std::string& id) {
    std::shared_ptr<std::mutex> m;
    {
      std::lock_guard g(table_mu_);
      auto& slot = locks_[id];
      if (!slot) slot = std::make_shared<std::mutex>();
      m = slot;
    }
    return std::unique_lock<std::mutex>(*m);
  }

  boost::uuids::uuid new_uuid() {
    std::lock_guard g(table_mu_);
    return uuid_gen_();
  }

  ModelRegistry models_;
  SessionStore store_;
  std::mutex table_mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  boost::uuids::random_generator uuid_gen_;
};

}  // namespace geoseg
