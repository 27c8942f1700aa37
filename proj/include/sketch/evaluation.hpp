#pragma once

// Retrieval and recognition metrics: average precision, precision@k,
// precision-recall curves, centroid-based intra/inter-class distances,
// hit@k and plain accuracy, plus their CSV reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sketch/error.hpp"
#include "sketch/hashing.hpp"
#include "sketch/objectives.hpp"

namespace sketch {

struct RankedItem {
  std::int64_t sample_id = -1;
  int class_id = -1;
  double distance = 0.0;
};

struct RetrievalResult {
  std::int64_t query_id = -1;
  int query_class = -1;
  std::vector<RankedItem> ranking;

  std::size_t relevant_count() const {
    return static_cast<std::size_t>(
        std::count_if(ranking.begin(), ranking.end(), [&](const RankedItem& r) { return r.class_id == query_class; }));
  }
};

inline RetrievalResult to_result(const HashCode& query, std::span<const RetrievalHit> hits) {
  RetrievalResult r{query.sample_id, query.class_id, {}};
  r.ranking.reserve(hits.size());
  for (const auto& h : hits) r.ranking.push_back({h.sample_id, h.class_id, static_cast<double>(h.distance)});
  return r;
}

/// Mean of precision at each relevant rank, over all relevant gallery items.
inline double average_precision(const RetrievalResult& result) {
  const std::size_t R = result.relevant_count();
  if (R == 0) fail(ErrorKind::NoRelevantItems, "query " + std::to_string(result.query_id));
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < result.ranking.size(); ++i) {
    if (result.ranking[i].class_id != result.query_class) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(R);
}

inline double mean_average_precision(std::span<const RetrievalResult> results) {
  if (results.empty()) fail(ErrorKind::EmptyBatch, "no queries");
  double sum = 0.0;
  for (const auto& r : results) sum += average_precision(r);
  return sum / static_cast<double>(results.size());
}

/// Fraction of the top min(k, gallery size) items sharing the query class.
inline double precision_at_k(const RetrievalResult& result, std::size_t k) {
  if (k == 0) fail(ErrorKind::ConfigError, "k must be >= 1");
  const std::size_t n = std::min(k, result.ranking.size());
  if (n == 0) return 0.0;
  std::size_t rel = 0;
  for (std::size_t i = 0; i < n; ++i) rel += result.ranking[i].class_id == result.query_class;
  return static_cast<double>(rel) / static_cast<double>(n);
}

struct PrPoint {
  std::size_t rank = 0;
  double recall = 0.0;
  double precision = 0.0;
};

/// One point per rank.
inline std::vector<PrPoint> precision_recall_curve(const RetrievalResult& result) {
  const std::size_t R = result.relevant_count();
  if (R == 0) fail(ErrorKind::NoRelevantItems, "query " + std::to_string(result.query_id));
  std::vector<PrPoint> out;
  out.reserve(result.ranking.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < result.ranking.size(); ++i) {
    hits += result.ranking[i].class_id == result.query_class;
    out.push_back({i + 1, static_cast<double>(hits) / static_cast<double>(R), static_cast<double>(hits) / static_cast<double>(i + 1)});
  }
  return out;
}

/// Rank-wise mean of per-query curves; all rankings must have equal length.
inline std::vector<PrPoint> mean_precision_recall(std::span<const RetrievalResult> results) {
  if (results.empty()) fail(ErrorKind::EmptyBatch, "no queries");
  std::vector<PrPoint> acc;
  for (const auto& r : results) {
    auto curve = precision_recall_curve(r);
    if (acc.empty()) acc.assign(curve.size(), {});
    if (curve.size() != acc.size()) fail(ErrorKind::LengthMismatch, "rankings of different length");
    for (std::size_t i = 0; i < curve.size(); ++i) {
      acc[i].rank = curve[i].rank;
      acc[i].recall += curve[i].recall;
      acc[i].precision += curve[i].precision;
    }
  }
  const double n = static_cast<double>(results.size());
  for (auto& p : acc) {
    p.recall /= n;
    p.precision /= n;
  }
  return acc;
}

/// Ranks every query code against the gallery store.
inline std::vector<RetrievalResult> retrieve_all(const CodeStore& queries, const CodeStore& gallery) {
  std::vector<RetrievalResult> out;
  out.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const HashCode q = queries.code(i);
    out.push_back(to_result(q, retrieve(q, gallery)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature-space statistics

struct DistanceStats {
  double d1 = 0.0;  // mean distance of a sample to its class centroid
  double d2 = 0.0;  // mean distance between class centroids
  std::optional<double> ratio;
};

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::DimensionMismatch, "vectors of different length");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline DistanceStats distance_stats(std::span<const LabeledFeature> features) {
  if (features.empty()) fail(ErrorKind::EmptyBatch, "no features");
  const std::size_t dim = features.front().values.size();
  std::map<int, std::pair<std::vector<double>, std::size_t>> sums;
  for (const auto& f : features) {
    if (f.values.size() != dim) fail(ErrorKind::DimensionMismatch, "ragged features");
    auto& [s, n] = sums[f.class_id];
    if (s.empty()) s.assign(dim, 0.0);
    for (std::size_t k = 0; k < dim; ++k) s[k] += f.values[k];
    ++n;
  }
  if (sums.size() < 2) fail(ErrorKind::SingleClass, "inter-class distance needs at least two classes");
  std::map<int, std::vector<double>> centroid;
  for (auto& [cls, sn] : sums) {
    for (auto& v : sn.first) v /= static_cast<double>(sn.second);
    centroid[cls] = std::move(sn.first);
  }
  DistanceStats st;
  for (const auto& f : features) st.d1 += euclidean(f.values, centroid.at(f.class_id));
  st.d1 /= static_cast<double>(features.size());
  std::size_t pairs = 0;
  for (auto a = centroid.begin(); a != centroid.end(); ++a)
    for (auto b = std::next(a); b != centroid.end(); ++b) {
      st.d2 += euclidean(a->second, b->second);
      ++pairs;
    }
  st.d2 /= static_cast<double>(pairs);
  if (st.d2 > 0.0) st.ratio = st.d1 / st.d2;
  return st;
}

// ---------------------------------------------------------------------------
// Recognition

/// Fraction of samples whose true class is within the first k of its ranking.
inline double hit_at_k(const std::vector<std::vector<int>>& rankings, std::span<const int> truths, std::size_t k) {
  if (k == 0) fail(ErrorKind::ConfigError, "k must be >= 1");
  if (rankings.empty()) fail(ErrorKind::EmptyBatch, "no rankings");
  if (rankings.size() != truths.size()) fail(ErrorKind::LengthMismatch, "rankings vs truths");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const auto& r = rankings[i];
    const auto end = r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
    hits += std::find(r.begin(), end, truths[i]) != end;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

inline double classification_accuracy(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size())
    fail(ErrorKind::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " + std::to_string(truths.size()));
  if (predictions.empty()) fail(ErrorKind::EmptyBatch, "no predictions");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) ok += predictions[i] == truths[i];
  return static_cast<double>(ok) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string metric;
  int code_bits = 0;
  double value = 0.0;
};

inline void write_metrics_csv(std::ostream& out, std::span<const MetricRow> rows) {
  out << "metric,code_bits,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.10g", r.value);
    out << r.metric << ',' << r.code_bits << ',' << buf << '\n';
  }
}

inline void write_pr_csv(std::ostream& out, std::span<const PrPoint> curve) {
  out << "rank,recall,precision\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", p.rank, p.recall, p.precision);
    out << buf;
  }
}

}  // namespace sketch
