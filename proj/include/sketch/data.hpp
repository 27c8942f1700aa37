#pragma once

// Sketch ingestion and representation: stroke-file parsing, the 4-component
// stroke sequence encoding, binary rasterization, synthetic shape families and
// split bookkeeping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sketch/error.hpp"

namespace sketch {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

using Stroke = std::vector<Point>;
using Drawing = std::vector<Stroke>;

/// One parsed line of a stroke file. `class_id`/`sample_id` are -1 for the
/// QuickDraw shape, which carries a class name instead.
struct SketchRecord {
  std::int64_t sample_id = -1;
  int class_id = -1;
  std::string word;
  Drawing strokes;
};

enum class StrokeFormat { quickdraw_simplified, canonical };

struct StrokeStep {
  double dx = 0.0;
  double dy = 0.0;
  std::uint8_t s_continue = 1;
  std::uint8_t s_newstroke = 0;
};

struct StrokeSequence {
  std::vector<StrokeStep> steps;
  int class_id = -1;
  std::int64_t sample_id = -1;
};

/// Square single-channel raster, 0 = ink and 255 = background.
struct RasterSketch {
  int size = 0;
  std::vector<std::uint8_t> pixels;
  int class_id = -1;
  std::int64_t sample_id = -1;

  std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * size + col]; }
};

struct SketchSample {
  RasterSketch raster;
  StrokeSequence sequence;
  int class_id = -1;
  std::int64_t sample_id = -1;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::vector<double> coord_array(const nlohmann::json& j, std::size_t line_no) {
  if (!j.is_array()) fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": coordinate list is not an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": non-numeric coordinate");
    double d = v.get<double>();
    if (!std::isfinite(d)) fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": non-finite coordinate");
    out.push_back(d);
  }
  return out;
}

inline Drawing parse_strokes(const nlohmann::json& arr, std::size_t line_no) {
  if (!arr.is_array()) fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": strokes field is not an array");
  if (arr.empty()) fail(ErrorKind::EmptyDrawing, "line " + std::to_string(line_no));
  Drawing drawing;
  drawing.reserve(arr.size());
  for (const auto& stroke : arr) {
    if (!stroke.is_array() || stroke.size() != 2)
      fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": stroke must be [[x...],[y...]]");
    auto xs = coord_array(stroke[0], line_no);
    auto ys = coord_array(stroke[1], line_no);
    if (xs.size() != ys.size()) fail(ErrorKind::MismatchedArrays, "line " + std::to_string(line_no));
    Stroke s(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) s[i] = {xs[i], ys[i]};
    drawing.push_back(std::move(s));
  }
  return drawing;
}

}  // namespace detail

inline SketchRecord parse_stroke_line(const std::string& line, std::size_t line_no, StrokeFormat format) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": record is not an object");

  SketchRecord rec;
  if (format == StrokeFormat::quickdraw_simplified) {
    if (!j.contains("word") || !j["word"].is_string() || !j.contains("drawing"))
      fail(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": expected \"word\" and \"drawing\"");
    rec.word = j["word"].get<std::string>();
    rec.strokes = detail::parse_strokes(j["drawing"], line_no);
  } else {
    if (!j.contains("sample_id") || !j["sample_id"].is_number_integer() || !j.contains("class_id") ||
        !j["class_id"].is_number_integer() || !j.contains("strokes"))
      fail(ErrorKind::MalformedRecord,
           "line " + std::to_string(line_no) + ": expected integer \"sample_id\", \"class_id\" and \"strokes\"");
    rec.sample_id = j["sample_id"].get<std::int64_t>();
    rec.class_id = j["class_id"].get<int>();
    rec.strokes = detail::parse_strokes(j["strokes"], line_no);
  }
  return rec;
}

/// Reads a line-delimited stroke file. Blank lines are skipped but still
/// counted so error line numbers match the file.
inline std::vector<SketchRecord> parse_stroke_file(const std::string& path, StrokeFormat format) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingInput, path);
  std::vector<SketchRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_stroke_line(line, line_no, format));
  }
  return out;
}

inline std::string to_canonical_line(const SketchRecord& rec) {
  nlohmann::json strokes = nlohmann::json::array();
  for (const auto& s : rec.strokes) {
    nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
    for (const auto& p : s) {
      xs.push_back(p.x);
      ys.push_back(p.y);
    }
    strokes.push_back(nlohmann::json::array({xs, ys}));
  }
  nlohmann::ordered_json j;
  j["sample_id"] = rec.sample_id;
  j["class_id"] = rec.class_id;
  j["strokes"] = strokes;
  return j.dump();
}

inline void write_canonical(std::ostream& out, const std::vector<SketchRecord>& records) {
  for (const auto& r : records) out << to_canonical_line(r) << '\n';
}

// ---------------------------------------------------------------------------
// Geometry helpers

struct BoundingBox {
  double min_x, min_y, max_x, max_y;
  double extent() const { return std::max(max_x - min_x, max_y - min_y); }
};

inline std::size_t point_count(const Drawing& d) {
  std::size_t n = 0;
  for (const auto& s : d) n += s.size();
  return n;
}

inline BoundingBox bounding_box(const Drawing& d) {
  if (point_count(d) == 0) fail(ErrorKind::EmptyDrawing, "drawing has no points");
  BoundingBox b{1e300, 1e300, -1e300, -1e300};
  for (const auto& s : d)
    for (const auto& p : s) {
      b.min_x = std::min(b.min_x, p.x);
      b.min_y = std::min(b.min_y, p.y);
      b.max_x = std::max(b.max_x, p.x);
      b.max_y = std::max(b.max_y, p.y);
    }
  return b;
}

/// Longer bbox side, clamped to 1 for zero-extent drawings.
inline double normalization_divisor(const BoundingBox& b) {
  double e = b.extent();
  return e > 0.0 ? e : 1.0;
}

/// Offsets from the previous point after mapping the bbox's longer side to
/// [0, 1]; the first offset is taken from the origin. Empty strokes are
/// ignored.
inline StrokeSequence encode_sequence(const Drawing& strokes, int class_id = -1, std::int64_t sample_id = -1) {
  const BoundingBox box = bounding_box(strokes);
  const double div = normalization_divisor(box);
  StrokeSequence seq;
  seq.class_id = class_id;
  seq.sample_id = sample_id;
  seq.steps.reserve(point_count(strokes));
  double px = 0.0, py = 0.0;
  bool first_stroke = true;
  for (const auto& s : strokes) {
    if (s.empty()) continue;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double x = (s[i].x - box.min_x) / div;
      const double y = (s[i].y - box.min_y) / div;
      StrokeStep st;
      st.dx = x - px;
      st.dy = y - py;
      const bool new_stroke = (i == 0 && !first_stroke);
      st.s_newstroke = new_stroke ? 1 : 0;
      st.s_continue = new_stroke ? 0 : 1;
      seq.steps.push_back(st);
      px = x;
      py = y;
    }
    first_stroke = false;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Rasterization

/// Integer midpoint (Bresenham) line covering both endpoints, all octants.
template <class Plot>
void draw_line(int x0, int y0, int x1, int y1, Plot&& plot) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    plot(x0, y0);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

/// Fits the drawing into a centered box spanning 90% of the canvas (aspect
/// preserved) and renders every consecutive point pair as a 1-pixel line.
inline RasterSketch rasterize(const Drawing& strokes, int size, int class_id = -1, std::int64_t sample_id = -1) {
  if (size < 8) fail(ErrorKind::DimensionMismatch, "raster size must be >= 8");
  const BoundingBox box = bounding_box(strokes);
  const double scale = 0.9 * (size - 1) / normalization_divisor(box);
  const double cx = 0.5 * (box.min_x + box.max_x);
  const double cy = 0.5 * (box.min_y + box.max_y);
  const double mid = 0.5 * (size - 1);

  RasterSketch r;
  r.size = size;
  r.class_id = class_id;
  r.sample_id = sample_id;
  r.pixels.assign(static_cast<std::size_t>(size) * size, 255);

  auto to_pixel = [&](const Point& p) {
    int col = static_cast<int>(std::lround((p.x - cx) * scale + mid));
    int row = static_cast<int>(std::lround((p.y - cy) * scale + mid));
    return std::pair{std::clamp(col, 0, size - 1), std::clamp(row, 0, size - 1)};
  };
  auto plot = [&](int col, int row) { r.pixels[static_cast<std::size_t>(row) * size + col] = 0; };

  for (const auto& s : strokes) {
    if (s.empty()) continue;
    auto [c0, r0] = to_pixel(s[0]);
    plot(c0, r0);
    for (std::size_t i = 1; i < s.size(); ++i) {
      auto [c1, r1] = to_pixel(s[i]);
      draw_line(c0, r0, c1, r1, plot);
      c0 = c1;
      r0 = r1;
    }
  }
  return r;
}

inline SketchSample make_sample(const SketchRecord& rec, int raster_size) {
  SketchSample s;
  s.class_id = rec.class_id;
  s.sample_id = rec.sample_id;
  s.raster = rasterize(rec.strokes, raster_size, rec.class_id, rec.sample_id);
  s.sequence = encode_sequence(rec.strokes, rec.class_id, rec.sample_id);
  return s;
}

inline std::vector<SketchSample> make_samples(const std::vector<SketchRecord>& recs, int raster_size) {
  std::vector<SketchSample> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(make_sample(r, raster_size));
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class Split { train, val, gallery, query };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::gallery: return "gallery";
    case Split::query: return "query";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "gallery") return Split::gallery;
  if (s == "query") return Split::query;
  fail(ErrorKind::MalformedRecord, "unknown split '" + std::string(s) + "'");
}

struct SplitQuotas {
  int train = 60;
  int val = 20;
  int gallery = 15;
  int query = 5;
  int total() const { return train + val + gallery + query; }
};

struct DatasetSplit {
  SplitQuotas quotas;
  std::map<std::int64_t, Split> assignment;

  Split of(std::int64_t sample_id) const {
    auto it = assignment.find(sample_id);
    if (it == assignment.end()) fail(ErrorKind::MissingInput, "sample " + std::to_string(sample_id) + " has no split");
    return it->second;
  }
};

inline void write_split_csv(std::ostream& out, const DatasetSplit& split) {
  out << "sample_id,split\n";
  for (const auto& [id, s] : split.assignment) out << id << ',' << to_string(s) << '\n';
}

inline DatasetSplit read_split_csv(std::istream& in) {
  DatasetSplit split;
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,split") fail(ErrorKind::MalformedRecord, "split file header");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto comma = line.find(',');
    if (comma == std::string::npos) fail(ErrorKind::MalformedRecord, "split file line " + std::to_string(line_no));
    std::int64_t id = std::stoll(line.substr(0, comma));
    if (!split.assignment.emplace(id, parse_split(line.substr(comma + 1))).second)
      fail(ErrorKind::MalformedRecord, "duplicate sample " + std::to_string(id) + " in split file");
  }
  return split;
}

/// Records of one split, in input order.
inline std::vector<SketchRecord> select_split(const std::vector<SketchRecord>& recs, const DatasetSplit& split, Split which) {
  std::vector<SketchRecord> out;
  for (const auto& r : recs)
    if (split.of(r.sample_id) == which) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shape families

inline constexpr std::array<const char*, 10> kShapeFamilies = {"circle", "square", "triangle", "star",  "zigzag",
                                                               "spiral", "cross",  "arrow",    "wave", "grid"};

struct JitterOptions {
  double rotation_deg = 10.0;
  double scale = 0.1;        // per-axis scale drawn from [1 - scale, 1 + scale]
  double point_noise = 0.02; // gaussian sigma in unit-shape coordinates
  double split_prob = 0.3;   // chance of breaking a stroke into two
};

inline constexpr JitterOptions kNoJitter{0.0, 0.0, 0.0, 0.0};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline Stroke polyline(std::initializer_list<Point> corners, int per_edge, bool closed) {
  std::vector<Point> c(corners);
  if (closed) c.push_back(c.front());
  Stroke s;
  for (std::size_t i = 0; i + 1 < c.size(); ++i)
    for (int k = 0; k < per_edge; ++k) {
      double t = static_cast<double>(k) / per_edge;
      s.push_back({c[i].x + t * (c[i + 1].x - c[i].x), c[i].y + t * (c[i + 1].y - c[i].y)});
    }
  s.push_back(c.back());
  return s;
}

inline Stroke arc(double r0, double r1, double a0, double turns, int n) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    double t = static_cast<double>(i) / n;
    double a = a0 + 2.0 * std::numbers::pi * turns * t;
    double r = r0 + (r1 - r0) * t;
    s.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return s;
}

/// Unit-scale prototype of a family, roughly inside [-1, 1]^2.
inline Drawing family_shape(int family) {
  using P = Point;
  switch (family) {
    case 0: return {arc(1.0, 1.0, 0.0, 1.0, 24)};
    case 1: return {polyline({P{-1, -1}, P{1, -1}, P{1, 1}, P{-1, 1}}, 4, true)};
    case 2: return {polyline({P{0, -1}, P{1, 0.8}, P{-1, 0.8}}, 5, true)};
    case 3: {
      Stroke s;
      for (int i = 0; i <= 10; ++i) {
        double a = -std::numbers::pi / 2 + i * std::numbers::pi / 5;
        double r = (i % 2 == 0) ? 1.0 : 0.4;
        s.push_back({r * std::cos(a), r * std::sin(a)});
      }
      Stroke dense;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        dense.push_back(s[i]);
        dense.push_back({0.5 * (s[i].x + s[i + 1].x), 0.5 * (s[i].y + s[i + 1].y)});
      }
      dense.push_back(s.back());
      return {dense};
    }
    case 4: return {polyline({P{-1, 0.5}, P{-0.6, -0.5}, P{-0.2, 0.5}, P{0.2, -0.5}, P{0.6, 0.5}, P{1, -0.5}}, 3, false)};
    case 5: return {arc(0.05, 1.0, 0.0, 2.0, 32)};
    case 6: return {polyline({P{-1, 0}, P{1, 0}}, 6, false), polyline({P{0, -1}, P{0, 1}}, 6, false)};
    case 7:
      return {polyline({P{-1, 0}, P{1, 0}}, 8, false), polyline({P{0.4, -0.5}, P{1, 0}, P{0.4, 0.5}}, 3, false)};
    case 8: {
      Stroke s;
      for (int i = 0; i <= 24; ++i) {
        double t = static_cast<double>(i) / 24;
        s.push_back({-1.0 + 2.0 * t, 0.5 * std::sin(3.0 * std::numbers::pi * t)});
      }
      return {s};
    }
    case 9: {
      Drawing d;
      for (double v : {-0.33, 0.33}) d.push_back(polyline({P{-1, v}, P{1, v}}, 4, false));
      for (double v : {-0.33, 0.33}) d.push_back(polyline({P{v, -1}, P{v, 1}}, 4, false));
      return d;
    }
    default: fail(ErrorKind::TooFewClasses, "unknown shape family " + std::to_string(family));
  }
}

}  // namespace detail

/// One jittered drawing of `family`, mapped to a 0..255-like coordinate frame.
inline Drawing render_family(int family, std::uint64_t sample_seed, const JitterOptions& jitter) {
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  Drawing d = detail::family_shape(family);
  const double angle = jitter.rotation_deg * std::numbers::pi / 180.0 * unit(rng);
  const double sx = 1.0 + jitter.scale * unit(rng);
  const double sy = 1.0 + jitter.scale * unit(rng);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (auto& s : d)
    for (auto& p : s) {
      double x = p.x * sx + jitter.point_noise * noise(rng);
      double y = p.y * sy + jitter.point_noise * noise(rng);
      p = {ca * x - sa * y, sa * x + ca * y};
    }

  if (jitter.split_prob > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < jitter.split_prob) {
    std::size_t which = std::uniform_int_distribution<std::size_t>(0, d.size() - 1)(rng);
    if (d[which].size() >= 4) {
      std::size_t cut = std::uniform_int_distribution<std::size_t>(2, d[which].size() - 2)(rng);
      Stroke tail(d[which].begin() + static_cast<std::ptrdiff_t>(cut), d[which].end());
      d[which].resize(cut);
      d.insert(d.begin() + static_cast<std::ptrdiff_t>(which) + 1, std::move(tail));
    }
  }

  for (auto& s : d)
    for (auto& p : s) {
      p.x = std::round((p.x * 100.0 + 128.0) * 100.0) / 100.0;
      p.y = std::round((p.y * 100.0 + 128.0) * 100.0) / 100.0;
    }
  return d;
}

struct SyntheticSet {
  std::vector<SketchRecord> records;  // shuffled class order, sample_id = position
  DatasetSplit split;
  std::vector<std::string> class_names;
};

/// Seeded synthetic dataset. Each sample draws from its own derived seed, so
/// output depends only on (seed, classes, per_class, quotas, jitter).
inline SyntheticSet generate_synthetic(int classes, int per_class, std::uint64_t seed, const SplitQuotas& quotas,
                                       const JitterOptions& jitter = {}) {
  if (classes < 2 || classes > static_cast<int>(kShapeFamilies.size()))
    fail(ErrorKind::TooFewClasses, "classes must be in [2, " + std::to_string(kShapeFamilies.size()) + "]");
  if (per_class < 4) fail(ErrorKind::TooFewSamples, "per_class must be >= 4");
  if (quotas.train < 0 || quotas.val < 0 || quotas.gallery < 0 || quotas.query < 0)
    fail(ErrorKind::QuotaMismatch, "negative split quota");
  if (quotas.total() > per_class)
    fail(ErrorKind::QuotaExceedsPerClass,
         "quotas sum to " + std::to_string(quotas.total()) + " > per_class " + std::to_string(per_class));
  if (quotas.total() < per_class)
    fail(ErrorKind::QuotaMismatch,
         "quotas sum to " + std::to_string(quotas.total()) + " < per_class " + std::to_string(per_class));

  struct Slot {
    int cls;
    int index;
  };
  std::vector<Slot> slots;
  slots.reserve(static_cast<std::size_t>(classes) * per_class);
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) slots.push_back({c, i});
  std::mt19937_64 order_rng(detail::splitmix64(seed ^ 0xA5A5A5A5ULL));
  std::shuffle(slots.begin(), slots.end(), order_rng);

  SyntheticSet out;
  out.split.quotas = quotas;
  for (int c = 0; c < classes; ++c) out.class_names.emplace_back(kShapeFamilies[static_cast<std::size_t>(c)]);
  out.records.reserve(slots.size());
  for (std::size_t pos = 0; pos < slots.size(); ++pos) {
    const auto [cls, index] = slots[pos];
    const std::uint64_t sample_seed =
        detail::splitmix64(seed * 0x100000001B3ULL + static_cast<std::uint64_t>(cls) * 1000003ULL + index);
    SketchRecord rec;
    rec.sample_id = static_cast<std::int64_t>(pos);
    rec.class_id = cls;
    rec.word = out.class_names[static_cast<std::size_t>(cls)];
    rec.strokes = render_family(cls, sample_seed, jitter);
    out.records.push_back(std::move(rec));

    Split s = Split::query;
    if (index < quotas.train)
      s = Split::train;
    else if (index < quotas.train + quotas.val)
      s = Split::val;
    else if (index < quotas.train + quotas.val + quotas.gallery)
      s = Split::gallery;
    out.split.assignment.emplace(static_cast<std::int64_t>(pos), s);
  }
  return out;
}

/// Clean renderings of every class family: the auxiliary domain the
/// zero-shot prototypes are built from.
inline std::vector<SketchRecord> auxiliary_renderings(int classes, int per_class, std::uint64_t seed,
                                                      const JitterOptions& jitter = kNoJitter) {
  std::vector<SketchRecord> out;
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      SketchRecord rec;
      rec.sample_id = static_cast<std::int64_t>(out.size());
      rec.class_id = c;
      rec.word = kShapeFamilies[static_cast<std::size_t>(c)];
      rec.strokes = render_family(c, detail::splitmix64(seed ^ (0xC0FFEEULL + out.size())), jitter);
      out.push_back(std::move(rec));
    }
  return out;
}

}  // namespace sketch
