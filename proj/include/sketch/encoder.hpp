#pragma once

// Dual-branch sketch encoder: a conv/pool stack over the raster, a
// bidirectional GRU over the stroke sequence, and a late-fusion dense layer
// over their concatenation. Each branch also owns a temporary classifier head
// used when it is pretrained alone.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sketch/autodiff.hpp"
#include "sketch/data.hpp"
#include "sketch/error.hpp"

namespace sketch {

struct EncoderConfig {
  int raster_size = 64;
  int cnn_stages = 3;
  int cnn_channels = 4;  // channels of the first stage, doubled per stage
  int cnn_out = 64;      // width of the CNN branch's final fully connected layer
  int rnn_layers = 2;
  int rnn_hidden = 16;
  int fusion_dim = 128;
  ad::Activation fusion_activation = ad::Activation::sigmoid;
  int num_classes = 10;

  int stage_channels(int stage) const { return cnn_channels << stage; }
  int cnn_flat_dim() const {
    const int side = raster_size >> cnn_stages;
    return stage_channels(cnn_stages - 1) * side * side;
  }
  int rnn_out() const { return 2 * rnn_hidden; }
  int fusion_input_dim() const { return cnn_out + rnn_out(); }

  void validate() const {
    if (raster_size < 8) fail(ErrorKind::ConfigError, "raster_size must be >= 8");
    if (cnn_stages < 1 || (raster_size >> cnn_stages) < 1 || raster_size % (1 << cnn_stages) != 0)
      fail(ErrorKind::ConfigError, "raster_size must be divisible by 2^cnn_stages");
    if (cnn_channels < 1 || cnn_out < 1 || rnn_layers < 1 || rnn_hidden < 1 || fusion_dim < 1)
      fail(ErrorKind::ConfigError, "encoder widths must be >= 1");
    if (num_classes < 2) fail(ErrorKind::ConfigError, "num_classes must be >= 2");
    if (fusion_activation != ad::Activation::sigmoid && fusion_activation != ad::Activation::relu)
      fail(ErrorKind::ConfigError, "fusion_activation must be sigmoid or relu");
  }
};

enum class Branch { cnn, rnn };

/// Model-ready tensors for one sample: the raster as ink = 1 / background = 0
/// and the stroke steps as 4-vectors.
template <class T>
struct EncoderInput {
  std::vector<T> raster;
  int raster_size = 0;
  std::vector<std::array<T, 4>> steps;
  int class_id = -1;
  std::int64_t sample_id = -1;
};

template <class T>
EncoderInput<T> prepare_input(const SketchSample& s) {
  EncoderInput<T> in;
  in.raster_size = s.raster.size;
  in.raster.resize(s.raster.pixels.size());
  for (std::size_t i = 0; i < in.raster.size(); ++i) in.raster[i] = static_cast<T>(255 - s.raster.pixels[i]) / T(255);
  in.steps.reserve(s.sequence.steps.size());
  for (const auto& st : s.sequence.steps)
    in.steps.push_back({static_cast<T>(st.dx), static_cast<T>(st.dy), static_cast<T>(st.s_continue),
                        static_cast<T>(st.s_newstroke)});
  in.class_id = s.class_id;
  in.sample_id = s.sample_id;
  return in;
}

template <class T>
std::vector<EncoderInput<T>> prepare_inputs(std::span<const SketchSample> samples) {
  std::vector<EncoderInput<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare_input<T>(s));
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

inline std::string gru_name(int layer, int dir, const char* what) {
  return "rnn.l" + std::to_string(layer) + (dir == 0 ? ".fwd." : ".bwd.") + what;
}

/// Expected (name, shape) list for a config, in creation order.
inline std::vector<std::pair<std::string, ad::Shape>> encoder_layout(const EncoderConfig& cfg) {
  using S = ad::Shape;
  auto u = [](int v) { return static_cast<std::size_t>(v); };
  std::vector<std::pair<std::string, S>> out;
  int in_ch = 1;
  for (int s = 0; s < cfg.cnn_stages; ++s) {
    const int oc = cfg.stage_channels(s);
    out.push_back({"cnn.conv" + std::to_string(s) + ".w", S{u(oc), u(in_ch), 3, 3}});
    out.push_back({"cnn.conv" + std::to_string(s) + ".b", S{u(oc)}});
    in_ch = oc;
  }
  out.push_back({"cnn.fc.w", S{u(cfg.cnn_out), u(cfg.cnn_flat_dim())}});
  out.push_back({"cnn.fc.b", S{u(cfg.cnn_out)}});
  const std::size_t H = u(cfg.rnn_hidden);
  for (int l = 0; l < cfg.rnn_layers; ++l) {
    const std::size_t in = l == 0 ? 4 : 2 * H;
    for (int d = 0; d < 2; ++d) {
      out.push_back({gru_name(l, d, "wx"), S{3 * H, in}});
      out.push_back({gru_name(l, d, "wh"), S{3 * H, H}});
      out.push_back({gru_name(l, d, "bx"), S{3 * H}});
      out.push_back({gru_name(l, d, "bh"), S{3 * H}});
    }
  }
  const std::size_t L = u(cfg.num_classes);
  out.push_back({"cnn_head.w", S{L, u(cfg.cnn_out)}});
  out.push_back({"cnn_head.b", S{L}});
  out.push_back({"rnn_head.w", S{L, u(cfg.rnn_out())}});
  out.push_back({"rnn_head.b", S{L}});
  out.push_back({"fusion.w", S{u(cfg.fusion_dim), u(cfg.fusion_input_dim())}});
  out.push_back({"fusion.b", S{u(cfg.fusion_dim)}});
  out.push_back({"head.w", S{L, u(cfg.fusion_dim)}});
  out.push_back({"head.b", S{L}});
  return out;
}

/// Seeded fan-in uniform weights, zero biases.
template <class T>
ad::ParameterSet<T> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ad::ParameterSet<T> params;
  for (auto& [name, shape] : encoder_layout(cfg)) {
    ad::Tensor<T> t(shape);
    const bool is_bias = name.size() >= 2 && (name.ends_with(".b") || name.ends_with(".bx") || name.ends_with(".bh"));
    if (!is_bias) {
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      ad::init_uniform(t, fan_in, rng);
    }
    params.add(name, std::move(t));
  }
  return params;
}

template <class T>
void check_topology(const ad::ParameterSet<T>& params, const EncoderConfig& cfg) {
  for (const auto& [name, shape] : encoder_layout(cfg)) {
    if (!params.contains(name)) fail(ErrorKind::TopologyMismatch, "checkpoint lacks '" + name + "'");
    if (params.at(name).shape != shape)
      fail(ErrorKind::TopologyMismatch,
           "'" + name + "' is " + ad::shape_str(params.at(name).shape) + ", config expects " + ad::shape_str(shape));
  }
}

// ---------------------------------------------------------------------------
// Graph construction

template <class T>
ad::Var cnn_branch(ad::Binder<T>& bind, const EncoderInput<T>& in, const EncoderConfig& cfg) {
  auto& tape = bind.tape();
  if (in.raster_size != cfg.raster_size)
    fail(ErrorKind::TopologyMismatch, "raster " + std::to_string(in.raster_size) + " vs config " +
                                          std::to_string(cfg.raster_size));
  const auto side = static_cast<std::size_t>(cfg.raster_size);
  ad::Var x = tape.constant({1, side, side}, in.raster);
  for (int s = 0; s < cfg.cnn_stages; ++s) {
    const std::string p = "cnn.conv" + std::to_string(s);
    x = ad::conv2d(tape, x, bind(p + ".w"), bind(p + ".b"));
    x = ad::relu(tape, x);
    x = ad::maxpool2(tape, x);
  }
  x = ad::reshape(tape, x, {tape.value(x).size()});
  return ad::relu(tape, ad::dense(tape, x, bind("cnn.fc.w"), bind("cnn.fc.b")));
}

template <class T>
ad::Var rnn_branch(ad::Binder<T>& bind, const EncoderInput<T>& in, const EncoderConfig& cfg) {
  auto& tape = bind.tape();
  if (in.steps.empty()) fail(ErrorKind::EmptySequence, "sample " + std::to_string(in.sample_id));
  std::vector<ad::Var> steps;
  steps.reserve(in.steps.size());
  for (const auto& s : in.steps) steps.push_back(tape.constant({4}, std::vector<T>(s.begin(), s.end())));
  std::vector<std::array<ad::GruWeights, 2>> w(static_cast<std::size_t>(cfg.rnn_layers));
  for (int l = 0; l < cfg.rnn_layers; ++l)
    for (int d = 0; d < 2; ++d)
      w[static_cast<std::size_t>(l)][static_cast<std::size_t>(d)] = {
          bind(gru_name(l, d, "wx")), bind(gru_name(l, d, "wh")), bind(gru_name(l, d, "bx")), bind(gru_name(l, d, "bh"))};
  return ad::gru_bidirectional(tape, steps, w, static_cast<std::size_t>(cfg.rnn_hidden));
}

template <class T>
ad::Var fuse(ad::Binder<T>& bind, ad::Var cnn, ad::Var rnn, const EncoderConfig& cfg) {
  auto& tape = bind.tape();
  ad::Var joint = ad::concat(tape, {cnn, rnn});
  return ad::activate(tape, ad::dense(tape, joint, bind("fusion.w"), bind("fusion.b")), cfg.fusion_activation);
}

template <class T>
ad::Var fused_feature(ad::Binder<T>& bind, const EncoderInput<T>& in, const EncoderConfig& cfg) {
  return fuse(bind, cnn_branch(bind, in, cfg), rnn_branch(bind, in, cfg), cfg);
}

/// Logits of a head: prefix is "head", "cnn_head" or "rnn_head".
template <class T>
ad::Var head_logits(ad::Binder<T>& bind, ad::Var feature, const std::string& prefix) {
  return ad::dense(bind.tape(), feature, bind(prefix + ".w"), bind(prefix + ".b"));
}

// ---------------------------------------------------------------------------
// Inference

struct FusionFeature {
  std::vector<double> values;
  std::int64_t sample_id = -1;
  int class_id = -1;
};

template <class T>
FusionFeature encode(const EncoderInput<T>& in, const ad::ParameterSet<T>& params, const EncoderConfig& cfg) {
  ad::Tape<T> tape;
  ad::Binder<T> bind(tape, params);
  ad::Var f = fused_feature(bind, in, cfg);
  auto v = tape.value(f);
  return {std::vector<double>(v.begin(), v.end()), in.sample_id, in.class_id};
}

template <class T>
FusionFeature encode(const SketchSample& sample, const ad::ParameterSet<T>& params, const EncoderConfig& cfg) {
  check_topology(params, cfg);
  return encode(prepare_input<T>(sample), params, cfg);
}

/// Output of a single branch (before its temporary head).
template <class T>
std::vector<double> encode_branch(const SketchSample& sample, Branch branch, const ad::ParameterSet<T>& params,
                                  const EncoderConfig& cfg) {
  check_topology(params, cfg);
  auto in = prepare_input<T>(sample);
  ad::Tape<T> tape;
  ad::Binder<T> bind(tape, params);
  ad::Var v = branch == Branch::cnn ? cnn_branch(bind, in, cfg) : rnn_branch(bind, in, cfg);
  auto vals = tape.value(v);
  return {vals.begin(), vals.end()};
}

/// Classifier head as W [L, D] (row j is the weight vector of class j) and
/// bias [L].
struct ClassifierHead {
  std::vector<double> weights;
  std::vector<double> bias;
  std::size_t dim = 0;

  std::size_t classes() const { return bias.size(); }
};

template <class T>
ClassifierHead extract_head(const ad::ParameterSet<T>& params, const std::string& prefix = "head") {
  const auto& w = params.at(prefix + ".w");
  const auto& b = params.at(prefix + ".b");
  return {std::vector<double>(w.values.begin(), w.values.end()), std::vector<double>(b.values.begin(), b.values.end()),
          w.shape.at(1)};
}

/// Softmax class probabilities.
inline std::vector<double> classify(std::span<const double> feature, const ClassifierHead& head) {
  if (feature.size() != head.dim || head.weights.size() != head.dim * head.classes())
    fail(ErrorKind::DimensionMismatch,
         "feature of " + std::to_string(feature.size()) + " values vs head input " + std::to_string(head.dim));
  std::vector<double> logits(head.classes());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double a = head.bias[j];
    for (std::size_t i = 0; i < head.dim; ++i) a += head.weights[j * head.dim + i] * feature[i];
    logits[j] = a;
  }
  return ad::softmax<double>(logits);
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace sketch
