#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "sketch/data.hpp"

using namespace sketch;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / ("sketch_test_" + name);
  std::ofstream(p) << content;
  return p;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::StageFailure;
}

std::set<std::pair<int, int>> ink_pixels(const RasterSketch& r) {
  std::set<std::pair<int, int>> out;
  for (int row = 0; row < r.size; ++row)
    for (int col = 0; col < r.size; ++col)
      if (r.at(row, col) == 0) out.insert({row, col});
  return out;
}

}  // namespace

TEST(Parse, MinimalQuickDrawRecord) {
  auto rec = parse_stroke_line(R"({"word":"star","drawing":[[[0,10],[0,10]]]})", 1, StrokeFormat::quickdraw_simplified);
  EXPECT_EQ(rec.word, "star");
  ASSERT_EQ(rec.strokes.size(), 1u);
  EXPECT_EQ(rec.strokes[0].size(), 2u);
  EXPECT_DOUBLE_EQ(rec.strokes[0][1].x, 10.0);
}

TEST(Parse, MismatchedArrays) {
  EXPECT_EQ(kind_of([] { parse_stroke_line(R"({"word":"a","drawing":[[[0],[0,1]]]})", 1, StrokeFormat::quickdraw_simplified); }),
            ErrorKind::MismatchedArrays);
}

TEST(Parse, EmptyDrawingAndMalformed) {
  EXPECT_EQ(kind_of([] { parse_stroke_line(R"({"word":"a","drawing":[]})", 1, StrokeFormat::quickdraw_simplified); }),
            ErrorKind::EmptyDrawing);
  EXPECT_EQ(kind_of([] { parse_stroke_line("{not json", 1, StrokeFormat::quickdraw_simplified); }), ErrorKind::MalformedRecord);
  EXPECT_EQ(kind_of([] { parse_stroke_line(R"({"drawing":[[[0],[0]]]})", 1, StrokeFormat::quickdraw_simplified); }),
            ErrorKind::MalformedRecord);
  EXPECT_EQ(kind_of([] { parse_stroke_line(R"({"word":"a","drawing":[[[0,"x"],[0,1]]]})", 1, StrokeFormat::quickdraw_simplified); }),
            ErrorKind::MalformedRecord);
}

TEST(Parse, FilePreservesOrderAndReportsLine) {
  auto p = write_temp("three.ndjson",
                      "{\"word\":\"a\",\"drawing\":[[[0],[0]]]}\n"
                      "{\"word\":\"b\",\"drawing\":[[[1],[1]]]}\n"
                      "\n"
                      "{\"word\":\"c\",\"drawing\":[[[2],[2]]]}\n");
  auto recs = parse_stroke_file(p.string(), StrokeFormat::quickdraw_simplified);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].word, "a");
  EXPECT_EQ(recs[1].word, "b");
  EXPECT_EQ(recs[2].word, "c");

  auto bad = write_temp("bad.ndjson", "{\"word\":\"a\",\"drawing\":[[[0],[0]]]}\n\n{\"word\":\"b\",\"drawing\":[[[0],[0,1]]]}\n");
  try {
    parse_stroke_file(bad.string(), StrokeFormat::quickdraw_simplified);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MismatchedArrays);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_EQ(kind_of([] { parse_stroke_file("/nonexistent/file", StrokeFormat::canonical); }), ErrorKind::MissingInput);
}

TEST(Parse, CanonicalRoundTripIsByteExact) {
  auto set = generate_synthetic(3, 4, 11, {2, 1, 1, 0});
  std::ostringstream a;
  write_canonical(a, set.records);
  auto p = write_temp("canon.jsonl", a.str());
  auto back = parse_stroke_file(p.string(), StrokeFormat::canonical);
  std::ostringstream b;
  write_canonical(b, back);
  EXPECT_EQ(a.str(), b.str());
  ASSERT_EQ(back.size(), set.records.size());
  EXPECT_EQ(back[5].class_id, set.records[5].class_id);
  EXPECT_EQ(back[5].sample_id, 5);
}

TEST(Sequence, HandComputedNormalization) {
  auto seq = encode_sequence({{{0, 0}, {3, 4}}});
  ASSERT_EQ(seq.steps.size(), 2u);
  EXPECT_DOUBLE_EQ(seq.steps[0].dx, 0.0);
  EXPECT_DOUBLE_EQ(seq.steps[0].dy, 0.0);
  EXPECT_EQ(seq.steps[0].s_continue, 1);
  EXPECT_EQ(seq.steps[0].s_newstroke, 0);
  EXPECT_DOUBLE_EQ(seq.steps[1].dx, 0.75);
  EXPECT_DOUBLE_EQ(seq.steps[1].dy, 1.0);
  EXPECT_EQ(seq.steps[1].s_continue, 1);
}

TEST(Sequence, NewStrokeFlag) {
  auto seq = encode_sequence({{{0, 0}}, {{1, 1}}});
  ASSERT_EQ(seq.steps.size(), 2u);
  EXPECT_EQ(seq.steps[1].s_newstroke, 1);
  EXPECT_EQ(seq.steps[1].s_continue, 0);
  EXPECT_DOUBLE_EQ(seq.steps[1].dx, 1.0);
}

TEST(Sequence, SinglePointAndEmpty) {
  auto seq = encode_sequence({{{5, 7}}});
  ASSERT_EQ(seq.steps.size(), 1u);
  EXPECT_EQ(seq.steps[0].dx, 0.0);
  EXPECT_EQ(seq.steps[0].dy, 0.0);
  EXPECT_EQ(seq.steps[0].s_continue, 1);
  EXPECT_EQ(kind_of([] { encode_sequence({{}}); }), ErrorKind::EmptyDrawing);
}

TEST(Sequence, PrefixSumReconstructsNormalizedPoints) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto d = render_family(trial % 10, rng(), {});
    auto seq = encode_sequence(d);
    auto box = bounding_box(d);
    const double div = normalization_divisor(box);
    double x = 0, y = 0;
    std::size_t k = 0;
    for (const auto& s : d)
      for (const auto& p : s) {
        x += seq.steps[k].dx;
        y += seq.steps[k].dy;
        EXPECT_NEAR(x, (p.x - box.min_x) / div, 1e-9);
        EXPECT_NEAR(y, (p.y - box.min_y) / div, 1e-9);
        EXPECT_EQ(seq.steps[k].s_continue + seq.steps[k].s_newstroke, 1);
        ++k;
      }
    EXPECT_EQ(k, seq.steps.size());
  }
}

TEST(Raster, HorizontalStrokeMatchesReference) {
  auto r = rasterize({{{0, 0}, {10, 0}}}, 16);
  // 90% box: scale 1.35, x in [0.75, 14.25] -> columns 1..14, y at 7.5 -> row 8.
  std::set<std::pair<int, int>> expected;
  for (int c = 1; c <= 14; ++c) expected.insert({8, c});
  EXPECT_EQ(ink_pixels(r), expected);
}

TEST(Raster, SinglePointIsOneCenterPixel) {
  auto r = rasterize({{{3, 3}}}, 16);
  auto ink = ink_pixels(r);
  ASSERT_EQ(ink.size(), 1u);
  EXPECT_EQ(*ink.begin(), std::make_pair(8, 8));
  EXPECT_EQ(kind_of([] { rasterize({{}}, 16); }), ErrorKind::EmptyDrawing);
}

// Independent check of the discrete line: exactly one pixel per step along
// the major axis, each within half a pixel of the ideal line.
TEST(Raster, DrawLineAgainstIdealLine) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> u(0, 40);
  for (int trial = 0; trial < 500; ++trial) {
    const int x0 = u(rng), y0 = u(rng), x1 = u(rng), y1 = u(rng);
    std::vector<std::pair<int, int>> px;
    draw_line(x0, y0, x1, y1, [&](int x, int y) { px.push_back({x, y}); });
    const bool x_major = std::abs(x1 - x0) >= std::abs(y1 - y0);
    const int n = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    ASSERT_EQ(static_cast<int>(px.size()), n);
    EXPECT_EQ(px.front(), std::make_pair(x0, y0));
    EXPECT_EQ(px.back(), std::make_pair(x1, y1));
    std::set<int> major;
    for (auto [x, y] : px) {
      major.insert(x_major ? x : y);
      if (x0 == x1 && y0 == y1) continue;
      const double ideal = x_major ? y0 + double(y1 - y0) * (x - x0) / (x1 - x0) : x0 + double(x1 - x0) * (y - y0) / (y1 - y0);
      EXPECT_LE(std::abs((x_major ? y : x) - ideal), 0.5 + 1e-12);
    }
    EXPECT_EQ(static_cast<int>(major.size()), n);
  }
}

TEST(Raster, BinaryDeterministicAndInked) {
  auto set = generate_synthetic(10, 4, 5, {4, 0, 0, 0});
  for (const auto& rec : set.records) {
    auto a = rasterize(rec.strokes, 32);
    auto b = rasterize(rec.strokes, 32);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_FALSE(ink_pixels(a).empty());
    for (auto p : a.pixels) EXPECT_TRUE(p == 0 || p == 255);
  }
  EXPECT_EQ(kind_of([] { rasterize({{{0, 0}}}, 4); }), ErrorKind::DimensionMismatch);
}

TEST(Sample, CarriesIds) {
  SketchRecord rec{42, 3, "x", {{{0, 0}, {1, 2}}}};
  auto s = make_sample(rec, 16);
  EXPECT_EQ(s.sample_id, 42);
  EXPECT_EQ(s.raster.sample_id, 42);
  EXPECT_EQ(s.sequence.sample_id, 42);
  EXPECT_EQ(s.raster.class_id, 3);
  EXPECT_EQ(s.sequence.class_id, 3);
}

TEST(Synthetic, Deterministic) {
  auto a = generate_synthetic(2, 4, 7, {2, 1, 1, 0});
  auto b = generate_synthetic(2, 4, 7, {2, 1, 1, 0});
  std::ostringstream sa, sb;
  write_canonical(sa, a.records);
  write_canonical(sb, b.records);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.split.assignment, b.split.assignment);
  auto c = generate_synthetic(2, 4, 8, {2, 1, 1, 0});
  std::ostringstream sc;
  write_canonical(sc, c.records);
  EXPECT_NE(sa.str(), sc.str());
}

TEST(Synthetic, CountsAndPartition) {
  auto set = generate_synthetic(10, 100, 1, {60, 20, 15, 5});
  ASSERT_EQ(set.records.size(), 1000u);
  std::map<int, int> per_class;
  std::map<int, std::map<Split, int>> per_split;
  for (const auto& r : set.records) {
    per_class[r.class_id]++;
    per_split[r.class_id][set.split.of(r.sample_id)]++;
  }
  EXPECT_EQ(set.split.assignment.size(), 1000u);
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(per_class[c], 100);
    EXPECT_EQ(per_split[c][Split::train], 60);
    EXPECT_EQ(per_split[c][Split::val], 20);
    EXPECT_EQ(per_split[c][Split::gallery], 15);
    EXPECT_EQ(per_split[c][Split::query], 5);
  }
}

TEST(Synthetic, Errors) {
  EXPECT_EQ(kind_of([] { generate_synthetic(1, 10, 1, {10, 0, 0, 0}); }), ErrorKind::TooFewClasses);
  EXPECT_EQ(kind_of([] { generate_synthetic(11, 10, 1, {10, 0, 0, 0}); }), ErrorKind::TooFewClasses);
  EXPECT_EQ(kind_of([] { generate_synthetic(2, 10, 1, {10, 1, 0, 0}); }), ErrorKind::QuotaExceedsPerClass);
  EXPECT_EQ(kind_of([] { generate_synthetic(2, 10, 1, {5, 0, 0, 0}); }), ErrorKind::QuotaMismatch);
  EXPECT_EQ(kind_of([] { generate_synthetic(2, 3, 1, {3, 0, 0, 0}); }), ErrorKind::TooFewSamples);
}

TEST(Split, CsvRoundTripAndSelect) {
  auto set = generate_synthetic(2, 4, 1, {2, 1, 1, 0});
  std::stringstream io;
  write_split_csv(io, set.split);
  auto back = read_split_csv(io);
  EXPECT_EQ(back.assignment, set.split.assignment);
  auto g = select_split(set.records, back, Split::gallery);
  EXPECT_EQ(g.size(), 2u);
  for (const auto& r : g) EXPECT_EQ(back.of(r.sample_id), Split::gallery);

  std::stringstream bad("sample_id,split\n1,train\n1,query\n");
  EXPECT_EQ(kind_of([&] { read_split_csv(bad); }), ErrorKind::MalformedRecord);
  std::stringstream header("id,split\n");
  EXPECT_EQ(kind_of([&] { read_split_csv(header); }), ErrorKind::MalformedRecord);
}

TEST(Auxiliary, DeterministicOnePerClass) {
  auto a = auxiliary_renderings(10, 1, 7);
  auto b = auxiliary_renderings(10, 1, 7);
  ASSERT_EQ(a.size(), 10u);
  std::ostringstream sa, sb;
  write_canonical(sa, a);
  write_canonical(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  for (int c = 0; c < 10; ++c) EXPECT_EQ(a[static_cast<std::size_t>(c)].class_id, c);
}
