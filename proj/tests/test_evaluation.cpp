#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "sketch/sketch.hpp"

using namespace sketch;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::StageFailure;
}

/// Ranking from a relevance string: '1' is the query's class, '0' another.
RetrievalResult ranked(const std::string& rel) {
  RetrievalResult r{0, 1, {}};
  for (std::size_t i = 0; i < rel.size(); ++i)
    r.ranking.push_back({static_cast<std::int64_t>(i), rel[i] == '1' ? 1 : 2, static_cast<double>(i)});
  return r;
}

RetrievalResult random_ranking(std::mt19937_64& rng, std::size_t n) {
  std::string s(n, '0');
  for (auto& c : s) c = rng() % 4 == 0 ? '1' : '0';
  s[rng() % n] = '1';
  return ranked(s);
}

/// AP from its definition: mean over relevant positions of precision@position.
double ap_oracle(const RetrievalResult& r) {
  double sum = 0.0;
  int rel = 0;
  for (std::size_t i = 0; i < r.ranking.size(); ++i)
    if (r.ranking[i].class_id == r.query_class) {
      int hits = 0;
      for (std::size_t j = 0; j <= i; ++j) hits += r.ranking[j].class_id == r.query_class;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
      ++rel;
    }
  return sum / rel;
}

}  // namespace

TEST(AveragePrecision, Examples) {
  EXPECT_NEAR(average_precision(ranked("101")), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(average_precision(ranked("101")), 0.833333, 1e-6);
  EXPECT_DOUBLE_EQ(average_precision(ranked("1100")), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(ranked("0011")), (1.0 / 3.0 + 2.0 / 4.0) / 2.0);
  std::vector<RetrievalResult> two{ranked("11"), ranked("01")};
  EXPECT_DOUBLE_EQ(mean_average_precision(two), 0.75);
  EXPECT_EQ(kind_of([&] { average_precision(ranked("000")); }), ErrorKind::NoRelevantItems);
  std::vector<RetrievalResult> none;
  EXPECT_EQ(kind_of([&] { mean_average_precision(none); }), ErrorKind::EmptyBatch);
}

TEST(AveragePrecision, MatchesDefinition) {
  std::mt19937_64 rng(1);
  std::vector<RetrievalResult> all;
  double sum = 0.0;
  for (int q = 0; q < 200; ++q) {
    all.push_back(random_ranking(rng, 1 + rng() % 120));
    sum += ap_oracle(all.back());
    EXPECT_NEAR(average_precision(all.back()), ap_oracle(all.back()), 1e-12);
  }
  EXPECT_NEAR(mean_average_precision(all), sum / 200.0, 1e-12);
}

TEST(PrecisionAtK, Examples) {
  auto r = ranked("1010");
  EXPECT_DOUBLE_EQ(precision_at_k(r, 1), 1.0);
  EXPECT_DOUBLE_EQ(precision_at_k(r, 2), 0.5);
  EXPECT_DOUBLE_EQ(precision_at_k(r, 3), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(precision_at_k(r, 100), 0.5);  // truncated to the ranking
  EXPECT_EQ(kind_of([&] { precision_at_k(r, 0); }), ErrorKind::ConfigError);
}

TEST(PrecisionRecall, CurvePoints) {
  auto c = precision_recall_curve(ranked("101"));
  ASSERT_EQ(c.size(), 3u);
  EXPECT_DOUBLE_EQ(c[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(c[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(c[1].recall, 0.5);
  EXPECT_DOUBLE_EQ(c[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(c[2].recall, 1.0);
  EXPECT_DOUBLE_EQ(c[2].precision, 2.0 / 3.0);
}

TEST(PrecisionRecall, AreaMatchesAveragePrecision) {
  std::mt19937_64 rng(2);
  std::vector<RetrievalResult> all;
  for (int q = 0; q < 50; ++q) all.push_back(random_ranking(rng, 400));
  for (const auto& r : all) {
    auto c = precision_recall_curve(r);
    // step area: precision times each recall increment
    double step = 0.0, trap = 0.0, prev_r = 0.0, prev_p = 1.0;
    for (const auto& p : c) {
      step += (p.recall - prev_r) * p.precision;
      trap += (p.recall - prev_r) * 0.5 * (p.precision + prev_p);
      prev_r = p.recall;
      prev_p = p.precision;
    }
    EXPECT_NEAR(step, average_precision(r), 1e-12);
    EXPECT_NEAR(trap, average_precision(r), 0.02);
  }
  auto mean = mean_precision_recall(all);
  ASSERT_EQ(mean.size(), 400u);
  double avg_p = 0.0;
  for (const auto& r : all) avg_p += precision_recall_curve(r)[9].precision;
  EXPECT_NEAR(mean[9].precision, avg_p / 50.0, 1e-12);
  all.push_back(ranked("1"));
  EXPECT_EQ(kind_of([&] { mean_precision_recall(all); }), ErrorKind::LengthMismatch);
}

TEST(RetrieveAll, SelfRetrievalIsPerfectForSeparatedCodes) {
  CodeStore store(16);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 5; ++i) {
      std::vector<double> f(16, 0.0);
      for (int j = 4 * c; j < 4 * c + 4; ++j) f[static_cast<std::size_t>(j)] = 1.0;
      f[static_cast<std::size_t>((4 * c + 4 + i) % 16)] = i == 0 ? 0.0 : 1.0;  // small intra-class jitter
      store.add(quantize(f, c * 5 + i, c));
    }
  auto res = retrieve_all(store, store);
  ASSERT_EQ(res.size(), 20u);
  EXPECT_DOUBLE_EQ(mean_average_precision(res), 1.0);
  for (const auto& r : res) EXPECT_EQ(r.ranking.front().sample_id, r.query_id);
}

TEST(DistanceStats, Examples) {
  std::vector<LabeledFeature> f{{0, 0, {0.0, 0.0}}, {1, 0, {2.0, 0.0}}, {2, 1, {10.0, 0.0}}, {3, 1, {10.0, 2.0}}};
  auto s = distance_stats(f);
  EXPECT_DOUBLE_EQ(s.d1, 1.0);
  EXPECT_DOUBLE_EQ(s.d2, std::sqrt(81.0 + 1.0));
  EXPECT_DOUBLE_EQ(*s.ratio, 1.0 / std::sqrt(82.0));
  std::vector<LabeledFeature> one{{0, 3, {1.0}}, {1, 3, {2.0}}};
  EXPECT_EQ(kind_of([&] { distance_stats(one); }), ErrorKind::SingleClass);
  std::vector<LabeledFeature> same{{0, 0, {1.0}}, {1, 1, {1.0}}};
  EXPECT_FALSE(distance_stats(same).ratio.has_value());
}

TEST(DistanceStats, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<LabeledFeature> f;
  for (int i = 0; i < 300; ++i) {
    std::vector<double> v(6);
    for (auto& x : v) x = n(rng);
    f.push_back({i, i % 5, v});
  }
  std::vector<std::vector<double>> cen(5, std::vector<double>(6, 0.0));
  for (const auto& x : f)
    for (std::size_t k = 0; k < 6; ++k) cen[static_cast<std::size_t>(x.class_id)][k] += x.values[k] / 60.0;
  double d1 = 0.0;
  for (const auto& x : f) d1 += euclidean(x.values, cen[static_cast<std::size_t>(x.class_id)]) / 300.0;
  double d2 = 0.0;
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = a + 1; b < 5; ++b) d2 += euclidean(cen[a], cen[b]) / 10.0;
  auto s = distance_stats(f);
  EXPECT_NEAR(s.d1, d1, 1e-12);
  EXPECT_NEAR(s.d2, d2, 1e-12);
}

TEST(Recognition, HitAtKAndAccuracy) {
  std::vector<std::vector<int>> r{{3, 1, 2}, {1, 2, 3}, {2, 3, 1}};
  std::vector<int> t{3, 3, 3};
  EXPECT_DOUBLE_EQ(hit_at_k(r, t, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(hit_at_k(r, t, 2), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(hit_at_k(r, t, 3), 1.0);
  EXPECT_DOUBLE_EQ(hit_at_k(r, t, 10), 1.0);
  EXPECT_EQ(kind_of([&] { hit_at_k(r, t, 0); }), ErrorKind::ConfigError);
  std::vector<int> short_truth{3};
  EXPECT_EQ(kind_of([&] { hit_at_k(r, short_truth, 1); }), ErrorKind::LengthMismatch);

  std::vector<int> p{1, 2, 3, 4}, y{1, 0, 3, 0};
  EXPECT_DOUBLE_EQ(classification_accuracy(p, y), 0.5);
  std::vector<int> y3{1, 2, 3};
  EXPECT_EQ(kind_of([&] { classification_accuracy(p, y3); }), ErrorKind::LengthMismatch);
}

TEST(Csv, Formats) {
  std::vector<MetricRow> rows{{"map", 16, 0.8125}, {"precision@10", 16, 1.0}};
  std::stringstream m;
  write_metrics_csv(m, rows);
  EXPECT_EQ(m.str(), "metric,code_bits,value\nmap,16,0.8125\nprecision@10,16,1\n");
  std::vector<PrPoint> pts{{1, 0.5, 1.0}, {2, 1.0, 1.0}};
  std::stringstream p;
  write_pr_csv(p, pts);
  EXPECT_EQ(p.str(), "rank,recall,precision\n1,0.5,1\n2,1,1\n");
}
