#include <gtest/gtest.h>

#include <set>

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

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.raster_size = 16;
  c.cnn_stages = 2;
  c.cnn_channels = 2;
  c.cnn_out = 8;
  c.rnn_layers = 1;
  c.rnn_hidden = 4;
  c.fusion_dim = 8;
  c.num_classes = 3;
  return c;
}

const std::vector<SketchSample>& fixture() {
  static const auto samples = [] {
    auto set = generate_synthetic(3, 12, 5, {12, 0, 0, 0});
    return make_samples(set.records, 16);
  }();
  return samples;
}

TrainSchedule quick() {
  TrainSchedule s;
  s.pretrain_cnn_epochs = 2;
  s.pretrain_rnn_epochs = 2;
  s.fuse_epochs = 2;
  s.scl_epochs = 1;
  s.alt_iterations = 1;
  s.batch_size = 6;
  s.optimizer.lr = 0.01;
  return s;
}

}  // namespace

TEST(Schedule, Validation) {
  TrainSchedule s;
  s.phi = 0.5;
  s.varphi = 0.5;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::ConfigError);
  s = {};
  s.batch_size = 0;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::ConfigError);
  s = {};
  s.optimizer.lr = 0;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::ConfigError);
}

TEST(TrainHashing, ZeroEpochsKeepsInitialWeights) {
  TrainSchedule s;
  s.pretrain_cnn_epochs = s.pretrain_rnn_epochs = s.fuse_epochs = s.scl_epochs = s.alt_iterations = 0;
  auto cfg = small_encoder();
  auto m = train_hashing<double>(fixture(), cfg, s);
  auto init = init_encoder<double>(cfg, s.seed);
  for (std::size_t i = 0; i < init.size(); ++i) EXPECT_EQ(m.params[i].values, init[i].values) << init.name(i);
  EXPECT_TRUE(m.log.empty());
  EXPECT_EQ(m.codes.size(), fixture().size());
  EXPECT_EQ(m.centers.size(), 3u);
}

TEST(TrainHashing, StagesRunInOrderAndReduceLoss) {
  std::vector<std::string> stages;
  auto m = train_hashing<double>(fixture(), small_encoder(), quick(),
                                 [&](const std::string& st, const ad::ParameterSet<double>&) { stages.push_back(st); });
  EXPECT_EQ(stages, (std::vector<std::string>{"pretrain_cnn", "pretrain_rnn", "fuse", "center", "alternate"}));
  // two epochs per classifier stage: the second sees lower mean loss
  for (const char* st : {"pretrain_cnn", "pretrain_rnn", "fuse"}) {
    std::vector<double> v;
    for (const auto& e : m.log)
      if (e.stage == st) v.push_back(e.total);
    ASSERT_EQ(v.size(), 2u) << st;
    EXPECT_LT(v[1], v[0]) << st;
  }
  const auto& last = m.log.back();
  EXPECT_EQ(last.stage, "alternate");
  EXPECT_GT(last.ql, 0.0);
  EXPECT_NEAR(last.total, last.cel + 0.01 * last.scl + 1e-4 * last.ql, 1e-9);
}

TEST(TrainHashing, Deterministic) {
  auto a = train_hashing<double>(fixture(), small_encoder(), quick());
  auto b = train_hashing<double>(fixture(), small_encoder(), quick());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].values, b.params[i].values);
  EXPECT_EQ(a.codes, b.codes);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
}

TEST(TrainHashing, VariantsUseTheirTerms) {
  for (auto v : {HashVariant::cel, HashVariant::cel_cl, HashVariant::cel_scl}) {
    auto s = quick();
    s.variant = v;
    auto m = train_hashing<double>(fixture(), small_encoder(), s);
    const auto& last = m.log.back();
    const double cl_w = v == HashVariant::cel_cl ? 0.01 : 0.0;
    const double scl_w = v == HashVariant::cel_scl ? 0.01 : 0.0;
    EXPECT_NEAR(last.total, last.cel + scl_w * last.scl + cl_w * last.cl, 1e-9) << to_string(v);
    if (v == HashVariant::cel_cl) {
      EXPECT_GT(last.cl, 0.0);
    }
  }
}

TEST(TrainHashing, Rejections) {
  auto cfg = small_encoder();
  cfg.fusion_activation = ad::Activation::relu;
  EXPECT_EQ(kind_of([&] { train_hashing<double>(fixture(), cfg, quick()); }), ErrorKind::ConfigError);
  cfg = small_encoder();
  cfg.num_classes = 2;
  EXPECT_EQ(kind_of([&] { train_hashing<double>(fixture(), cfg, quick()); }), ErrorKind::LabelOutOfRange);
  std::vector<SketchSample> none;
  EXPECT_EQ(kind_of([&] { train_hashing<double>(none, small_encoder(), quick()); }), ErrorKind::EmptyBatch);
}

TEST(EncodeGallery, MatchesTrainingCodesAndHandlesEmpty) {
  auto cfg = small_encoder();
  auto m = train_hashing<double>(fixture(), cfg, quick());
  EXPECT_EQ(encode_gallery(fixture(), m.params, cfg), m.codes);
  EXPECT_EQ(encode_gallery(fixture(), m.params, cfg, 3), m.codes);
  std::vector<SketchSample> none;
  EXPECT_TRUE(encode_gallery(none, m.params, cfg).empty());
}

TEST(TrainHashing, ThreadCountDoesNotChangeResult) {
  auto s = quick();
  auto a = train_hashing<double>(fixture(), small_encoder(), s);
  s.threads = 3;
  auto b = train_hashing<double>(fixture(), small_encoder(), s);
  // per-worker gradient partial sums reorder additions, so compare loosely
  for (std::size_t i = 0; i < a.params.size(); ++i)
    for (std::size_t k = 0; k < a.params[i].size(); ++k) EXPECT_NEAR(a.params[i].values[k], b.params[i].values[k], 1e-9);
}
