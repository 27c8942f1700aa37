#pragma once

// Two-symbol image entropy of binary rasters and the per-class percentile band
// that decides which samples contribute to a class center.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "sketch/data.hpp"
#include "sketch/error.hpp"

namespace sketch {

struct EntropyRecord {
  std::int64_t sample_id = -1;
  int class_id = -1;
  double entropy = 0.0;  // bits
};

/// Percentile band of one class. `phi`/`varphi` are fractions in [0, 1].
struct ClassEntropyBand {
  int class_id = -1;
  double h_lower = 0.0;
  double h_upper = 0.0;
  double phi = 0.05;
  double varphi = 0.95;
  double gamma = 0.9;
};

/// H = -sum over {0, 255} of p_i log2 p_i.
inline double image_entropy(const RasterSketch& raster) {
  if (raster.pixels.empty()) return 0.0;
  std::size_t ink = 0;
  for (auto p : raster.pixels) ink += (p == 0);
  const double n = static_cast<double>(raster.pixels.size());
  double h = 0.0;
  for (double p : {ink / n, (n - ink) / n})
    if (p > 0.0) h -= p * std::log2(p);
  return h;
}

/// Linear interpolation between closest ranks, rank = q * (n - 1) over the
/// ascending sample.
inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline ClassEntropyBand class_entropy_band(std::span<const EntropyRecord> records, double phi, double varphi) {
  if (records.size() < 2) fail(ErrorKind::TooFewSamples, "entropy band needs at least 2 records");
  if (!(phi >= 0.0 && phi < varphi && varphi <= 1.0))
    fail(ErrorKind::ConfigError, "percentiles must satisfy 0 <= phi < varphi <= 1");
  const int cls = records.front().class_id;
  std::vector<double> h;
  h.reserve(records.size());
  for (const auto& r : records) {
    if (r.class_id != cls) fail(ErrorKind::MixedClasses, "records span classes " + std::to_string(cls) + " and " +
                                                             std::to_string(r.class_id));
    h.push_back(r.entropy);
  }
  ClassEntropyBand band;
  band.class_id = cls;
  band.phi = phi;
  band.varphi = varphi;
  band.gamma = varphi - phi;
  band.h_lower = percentile(h, phi);
  band.h_upper = percentile(std::move(h), varphi);
  return band;
}

/// Strict on both sides. A bound sitting at the 0th / 100th percentile is
/// open-ended, so the (0, 1) band keeps the whole class.
inline bool gate(const EntropyRecord& record, const ClassEntropyBand& band) {
  if (record.class_id != band.class_id)
    fail(ErrorKind::ClassMismatch,
         "record class " + std::to_string(record.class_id) + " vs band class " + std::to_string(band.class_id));
  const bool above = band.phi == 0.0 || band.h_lower < record.entropy;
  const bool below = band.varphi == 1.0 || record.entropy < band.h_upper;
  return above && below;
}

inline std::vector<EntropyRecord> entropy_records(std::span<const SketchSample> samples) {
  std::vector<EntropyRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.sample_id, s.class_id, image_entropy(s.raster)});
  return out;
}

/// Bands for every class present, ordered by class id.
inline std::vector<ClassEntropyBand> class_bands(std::span<const EntropyRecord> records, double phi, double varphi) {
  std::map<int, std::vector<EntropyRecord>> by_class;
  for (const auto& r : records) by_class[r.class_id].push_back(r);
  std::vector<ClassEntropyBand> out;
  for (const auto& [cls, recs] : by_class) out.push_back(class_entropy_band(recs, phi, varphi));
  return out;
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max]; the last bin is closed.
inline std::vector<HistogramBin> entropy_histogram(std::span<const EntropyRecord> records, int bins) {
  std::vector<HistogramBin> out;
  if (records.empty() || bins < 1) return out;
  double lo = records.front().entropy, hi = lo;
  for (const auto& r : records) {
    lo = std::min(lo, r.entropy);
    hi = std::max(hi, r.entropy);
  }
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  for (int b = 0; b < bins; ++b) out.push_back({lo + b * width, lo + (b + 1) * width, 0});
  for (const auto& r : records) {
    auto b = static_cast<int>((r.entropy - lo) / width);
    out[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))].count++;
  }
  return out;
}

}  // namespace sketch
