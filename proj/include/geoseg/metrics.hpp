#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include "geoseg/geodesic.hpp"
#include "geoseg/image.hpp"

namespace geoseg {

namespace detail {
inline void require_same_extent(const Mask& a, const Mask& b, const char* op) {
  if (a.height != b.height || a.width != b.width)
    fail(ErrorKind::shape, std::string(op) + ": masks differ in extent (" + std::to_string(a.height) +
                               "x" + std::to_string(a.width) + " vs " + std::to_string(b.height) +
                               "x" + std::to_string(b.width) + ")");
}
}  // namespace detail

// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const Mask& a, const Mask& b) {
  detail::require_same_extent(a, b, "dice");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Foreground pixels with at least one background 4-neighbour; outside the
// image counts as background.
inline std::vector<Pixel> extract_surface(const Mask& m) {
  std::vector<Pixel> out;
  const int h = static_cast<int>(m.height), w = static_cast<int>(m.width);
  auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < h && x < w && m.at(y, x) != 0; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
        out.push_back({y, x});
  return out;
}

// Average symmetric surface distance between two point sets, spacing-scaled.
// Distances to each set come from an exact distance transform over the
// bounding box of both sets.
inline double assd(std::span<const Pixel> a, std::span<const Pixel> b, double spacing_y = 1.0,
                   double spacing_x = 1.0) {
  if (a.empty() || b.empty()) fail(ErrorKind::validation, "assd: surface point set is empty");
  int y0 = a[0].y, y1 = a[0].y, x0 = a[0].x, x1 = a[0].x;
  for (auto s : {a, b})
    for (const auto& p : s) {
      y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
    }
  const std::size_t h = static_cast<std::size_t>(y1 - y0 + 1), w = static_cast<std::size_t>(x1 - x0 + 1);
  auto shifted = [&](std::span<const Pixel> s) {
    std::vector<Pixel> out;
    out.reserve(s.size());
    for (const auto& p : s) out.push_back({p.y - y0, p.x - x0});
    return out;
  };
  const auto sa = shifted(a), sb = shifted(b);
  const auto to_a = euclidean_distance_map(std::span<const Pixel>(sa), h, w, spacing_y, spacing_x);
  const auto to_b = euclidean_distance_map(std::span<const Pixel>(sb), h, w, spacing_y, spacing_x);
  double total = 0;
  for (const auto& p : sa) total += to_b.at(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x));
  for (const auto& p : sb) total += to_a.at(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x));
  return total / static_cast<double>(sa.size() + sb.size());
}

// ASSD between mask surfaces; nullopt when either mask is empty.
inline std::optional<double> mask_assd(const Mask& a, const Mask& b, double spacing_y = 1.0,
                                       double spacing_x = 1.0) {
  detail::require_same_extent(a, b, "assd");
  const auto sa = extract_surface(a), sb = extract_surface(b);
  if (sa.empty() || sb.empty()) return std::nullopt;
  return assd(sa, sb, spacing_y, spacing_x);
}

struct PairedTTest {
  double t = 0;
  double df = 0;
  double p_value = 1;
};

// Two-sided paired Student's t-test on a - b.
inline PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    fail(ErrorKind::validation, "t-test: samples differ in length (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
  if (a.size() < 2) fail(ErrorKind::validation, "t-test: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  PairedTTest r;
  r.df = n - 1;
  if (ss == 0) {
    // Degenerate: no spread. Identical samples give p = 1, a constant shift p = 0.
    r.t = mean == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0 ? 1.0 : 0.0;
    return r;
  }
  const double se = std::sqrt(ss / r.df / n);
  r.t = mean / se;
  boost::math::students_t dist(r.df);
  r.p_value = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd m;
  m.count = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct MethodScores {
  std::string name;
  std::vector<double> dice;
  std::vector<std::optional<double>> assd;  // undefined when a surface is empty
};

// Per-sample scores of several methods on the same samples. p-values compare
// every method's Dice against the reference method.
struct EvalReport {
  std::vector<std::string> sample_ids;
  std::vector<MethodScores> methods;
  std::string reference;

  MethodScores& add_method(const std::string& name) {
    methods.push_back({name, {}, {}});
    return methods.back();
  }

  void add_sample(MethodScores& method, const Mask& prediction, const Mask& truth) {
    method.dice.push_back(dice(prediction, truth));
    method.assd.push_back(mask_assd(prediction, truth));
  }

  const MethodScores& method(const std::string& name) const {
    for (const auto& m : methods)
      if (m.name == name) return m;
    fail(ErrorKind::not_found, "report: no method named '" + name + "'");
  }

  static std::vector<double> defined(const std::vector<std::optional<double>>& v) {
    std::vector<double> out;
    for (const auto& x : v)
      if (x) out.push_back(*x);
    return out;
  }

  std::optional<double> dice_p_value(const MethodScores& m) const {
    if (reference.empty() || m.name == reference || m.dice.size() < 2) return std::nullopt;
    const auto& ref = method(reference);
    if (ref.dice.size() != m.dice.size()) return std::nullopt;
    return paired_t_test(m.dice, ref.dice).p_value;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["samples"] = sample_ids;
    j["reference"] = reference;
    j["methods"] = nlohmann::json::array();
    for (const auto& m : methods) {
      nlohmann::json mj;
      mj["name"] = m.name;
      mj["dice"] = m.dice;
      nlohmann::json a = nlohmann::json::array();
      for (const auto& x : m.assd) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
      mj["assd"] = a;
      const auto d = mean_std(m.dice);
      const auto s = mean_std(defined(m.assd));
      mj["dice_mean"] = d.mean;
      mj["dice_std"] = d.std;
      mj["assd_mean"] = s.mean;
      mj["assd_std"] = s.std;
      mj["assd_undefined"] = m.assd.size() - s.count;
      const auto p = dice_p_value(m);
      mj["dice_p_value"] = p ? nlohmann::json(*p) : nlohmann::json(nullptr);
      j["methods"].push_back(mj);
    }
    return j;
  }

  // Dice in percent and ASSD in pixels, mean +- std, one row per method.
  std::string to_table() const {
    std::size_t name_w = 6;
    for (const auto& m : methods) name_w = std::max(name_w, m.name.size());
    auto pad = [](std::string s, std::size_t w) {
      s.resize(std::max(w, s.size()), ' ');
      return s;
    };
    char buf[128];
    std::string out = pad("Method", name_w) + "  " + pad("Dice(%)", 15) + "  " +
                      pad("ASSD(pixels)", 15) + "  p(Dice)\n";
    for (const auto& m : methods) {
      const auto d = mean_std(m.dice);
      const auto s = mean_std(defined(m.assd));
      out += pad(m.name, name_w) + "  ";
      std::snprintf(buf, sizeof buf, "%6.2f +- %5.2f", 100 * d.mean, 100 * d.std);
      out += pad(buf, 15) + "  ";
      std::snprintf(buf, sizeof buf, "%6.2f +- %5.2f", s.mean, s.std);
      out += pad(buf, 15) + "  ";
      const auto p = dice_p_value(m);
      if (p) {
        std::snprintf(buf, sizeof buf, "%.3g", *p);
        out += buf;
      } else {
        out += "-";
      }
      out += "\n";
    }
    return out;
  }
};

}  // namespace geoseg
