#include <gtest/gtest.h>

#include <sstream>

#include "sketch/config.hpp"
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

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

}  // namespace

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.data.quotas.total(), c.data.per_class);
  EXPECT_EQ(c.encoder.fusion_dim, 16);
}

TEST(Config, ParsesSectionsCommentsAndWhitespace) {
  auto c = parse(
      "# comment\n"
      "; another\n"
      "[run]\n"
      "  seed = 42  \n"
      "\n"
      "[encoder]\n"
      "code_bits=32\n"
      "[schedule]\n"
      "variant = cel_scl\n"
      "lr = 0.003\n"
      "normalization = actual_count\n"
      "[zsl]\n"
      "unseen = 1, 4 ,6\n"
      "direction = visual_to_semantic\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.encoder.fusion_dim, 32);
  EXPECT_EQ(c.schedule.variant, HashVariant::cel_scl);
  EXPECT_DOUBLE_EQ(c.schedule.optimizer.lr, 0.003);
  EXPECT_EQ(c.schedule.normalization, CenterNormalization::actual_count);
  EXPECT_EQ(c.zsl.unseen, (std::vector<int>{1, 4, 6}));
  EXPECT_EQ(c.zsl.direction, EmbedDirection::visual_to_semantic);
  c.sync();
  EXPECT_EQ(c.schedule.seed, 42u);
  EXPECT_EQ(c.zsl.schedule.seed, 42u);
}

TEST(Config, RejectsUnknownAndMalformed) {
  EXPECT_EQ(kind_of([] { parse("[run]\nsede = 1\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[nosuch]\nseed = 1\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("seed = 1\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[run\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[run]\nseed\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[run]\nseed = 1x\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[schedule]\nlr = fast\n"); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse("[schedule]\nvariant = best\n"); }), ErrorKind::ConfigError);
}

TEST(Config, ValidateCatchesBadValues) {
  auto c = parse("[data]\nper_class = 100\n");
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
  c = parse("[eval]\ncode_bits = 16,300\n");
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
  c = parse("[schedule]\nphi = 0.9\nvarphi = 0.1\n");
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
  c = parse("[run]\nthreads = 0\n");
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
}

TEST(Config, DumpRoundTrips) {
  auto c = parse("[run]\nseed = 7\n[schedule]\nlr = 0.1\nphi = 0.05\n[data]\nrotation_deg = 12.5\n[eval]\nhit_k = 1,10\n");
  const std::string d = dump_config(c);
  EXPECT_NE(d.find("lr = 0.1\n"), std::string::npos);
  auto back = parse(d);
  EXPECT_EQ(dump_config(back), d);
  EXPECT_EQ(back.eval.hit_k, (std::vector<int>{1, 10}));
  EXPECT_DOUBLE_EQ(back.data.jitter.rotation_deg, 12.5);
  EXPECT_EQ(fnv1a(d), fnv1a(dump_config(back)));
  EXPECT_NE(fnv1a(d), fnv1a(dump_config(RunConfig{})));
}

TEST(Config, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
}
