#pragma once

// Zero-shot recognition: class prototypes, the two-layer prototype embedding
// subnet (EVE), its training against frozen sketch features, and
// nearest-prototype classification over unseen or all classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sketch/autodiff.hpp"
#include "sketch/encoder.hpp"
#include "sketch/objectives.hpp"
#include "sketch/training.hpp"

namespace sketch {

enum class PrototypeSource { file, synthetic_mean };

struct ClassPrototype {
  int class_id = -1;
  std::vector<double> values;
  PrototypeSource source = PrototypeSource::synthetic_mean;
};

/// Per-class arithmetic mean, sorted by class id. Every id in `expected`
/// must have at least one feature.
inline std::vector<ClassPrototype> build_prototypes(std::span<const LabeledFeature> features, std::span<const int> expected = {},
                                                    PrototypeSource source = PrototypeSource::synthetic_mean) {
  std::map<int, std::pair<std::vector<double>, std::size_t>> sums;
  for (const auto& f : features) {
    if (f.values.size() != features.front().values.size()) fail(ErrorKind::DimensionMismatch, "ragged auxiliary features");
    auto& [s, n] = sums[f.class_id];
    if (s.empty()) s.assign(f.values.size(), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += f.values[k];
    ++n;
  }
  for (int c : expected)
    if (!sums.count(c)) fail(ErrorKind::EmptyClass, "no auxiliary features for class " + std::to_string(c));
  if (sums.empty()) fail(ErrorKind::EmptyClass, "no auxiliary features");
  std::vector<ClassPrototype> out;
  for (auto& [cls, sn] : sums) {
    for (auto& v : sn.first) v /= static_cast<double>(sn.second);
    out.push_back({cls, std::move(sn.first), source});
  }
  return out;
}

inline void write_prototypes(std::ostream& out, std::span<const ClassPrototype> protos) {
  for (const auto& p : protos) {
    nlohmann::ordered_json j;
    j["class_id"] = p.class_id;
    j["dim"] = p.values.size();
    j["values"] = p.values;
    out << j.dump() << '\n';
  }
}

inline std::vector<ClassPrototype> read_prototypes(std::istream& in) {
  std::vector<ClassPrototype> out;
  std::set<int> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "prototype line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::MalformedRecord, where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("class_id") || !j.contains("dim") || !j.contains("values") ||
        !j["class_id"].is_number_integer() || !j["dim"].is_number_integer() || !j["values"].is_array())
      fail(ErrorKind::MalformedRecord, where + ": need class_id, dim, values");
    ClassPrototype p;
    p.class_id = j["class_id"].get<int>();
    p.source = PrototypeSource::file;
    for (const auto& v : j["values"]) {
      if (!v.is_number()) fail(ErrorKind::MalformedRecord, where + ": non-numeric value");
      p.values.push_back(v.get<double>());
      if (!std::isfinite(p.values.back())) fail(ErrorKind::MalformedRecord, where + ": non-finite value");
    }
    if (j["dim"].get<long long>() != static_cast<long long>(p.values.size()))
      fail(ErrorKind::DimensionMismatch, where + ": dim disagrees with values");
    if (!out.empty() && p.values.size() != out.front().values.size())
      fail(ErrorKind::DimensionMismatch, where + ": prototype dims differ");
    if (!seen.insert(p.class_id).second) fail(ErrorKind::MalformedRecord, where + ": duplicate class " + std::to_string(p.class_id));
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding subnet

enum class EmbedDirection { semantic_to_visual, visual_to_semantic };

struct EveConfig {
  int semantic_dim = 16;
  int hidden = 32;
  int visual_dim = 16;
  EmbedDirection direction = EmbedDirection::semantic_to_visual;

  int in_dim() const { return direction == EmbedDirection::semantic_to_visual ? semantic_dim : visual_dim; }
  int out_dim() const { return direction == EmbedDirection::semantic_to_visual ? visual_dim : semantic_dim; }

  void validate() const {
    if (semantic_dim < 1 || hidden < 1 || visual_dim < 1) fail(ErrorKind::ConfigError, "embedding dims must be >= 1");
  }
};

inline std::vector<std::pair<std::string, ad::Shape>> eve_layout(const EveConfig& cfg) {
  auto u = [](int v) { return static_cast<std::size_t>(v); };
  return {{"eve.fc0.w", {u(cfg.hidden), u(cfg.in_dim())}},
          {"eve.fc0.b", {u(cfg.hidden)}},
          {"eve.fc1.w", {u(cfg.out_dim()), u(cfg.hidden)}},
          {"eve.fc1.b", {u(cfg.out_dim())}}};
}

/// Fan-in uniform weights. With `near_identity` every dim must agree and the
/// weights start at I plus small noise.
template <class T>
ad::ParameterSet<T> init_eve(const EveConfig& cfg, std::uint64_t seed, bool near_identity = false) {
  cfg.validate();
  if (near_identity && !(cfg.in_dim() == cfg.hidden && cfg.hidden == cfg.out_dim()))
    fail(ErrorKind::ConfigError, "near-identity init needs equal embedding dims");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-1e-3, 1e-3);
  ad::ParameterSet<T> params;
  for (auto& [name, shape] : eve_layout(cfg)) {
    ad::Tensor<T> t(shape);
    if (shape.size() == 2) {
      if (near_identity) {
        for (std::size_t i = 0; i < shape[0]; ++i)
          for (std::size_t j = 0; j < shape[1]; ++j) t.values[i * shape[1] + j] = static_cast<T>((i == j ? 1.0 : 0.0) + noise(rng));
      } else {
        ad::init_uniform(t, shape[1], rng);
      }
    }
    params.add(name, std::move(t));
  }
  return params;
}

template <class T>
void check_eve(const ad::ParameterSet<T>& params, const EveConfig& cfg) {
  for (const auto& [name, shape] : eve_layout(cfg)) {
    if (!params.contains(name)) fail(ErrorKind::TopologyMismatch, "embedding checkpoint lacks '" + name + "'");
    if (params.at(name).shape != shape)
      fail(ErrorKind::DimensionMismatch, "'" + name + "' is " + ad::shape_str(params.at(name).shape) + ", config expects " +
                                             ad::shape_str(shape));
  }
}

template <class T>
ad::Var eve_forward(ad::Binder<T>& bind, ad::Var x) {
  auto& tape = bind.tape();
  ad::Var h = ad::relu(tape, ad::dense(tape, x, bind("eve.fc0.w"), bind("eve.fc0.b")));
  return ad::relu(tape, ad::dense(tape, h, bind("eve.fc1.w"), bind("eve.fc1.b")));
}

/// Maps a vector from the config's input space to its output space.
template <class T>
std::vector<double> embed(std::span<const double> x, const ad::ParameterSet<T>& params, const EveConfig& cfg) {
  check_eve(params, cfg);
  if (x.size() != static_cast<std::size_t>(cfg.in_dim()))
    fail(ErrorKind::DimensionMismatch, "input of " + std::to_string(x.size()) + " values, embedding expects " +
                                           std::to_string(cfg.in_dim()));
  ad::Tape<T> tape;
  ad::Binder<T> bind(tape, params);
  ad::Var y = eve_forward(bind, tape.constant({x.size()}, std::vector<T>(x.begin(), x.end())));
  auto v = tape.value(y);
  return {v.begin(), v.end()};
}

template <class T>
std::vector<double> embed_prototype(const ClassPrototype& p, const ad::ParameterSet<T>& params, const EveConfig& cfg) {
  if (cfg.direction != EmbedDirection::semantic_to_visual)
    fail(ErrorKind::ConfigError, "prototypes are embedded only in the semantic_to_visual direction");
  return embed<T>(p.values, params, cfg);
}

/// One sample's embedding loss: squared distance between the sketch feature
/// and the embedded prototype (or the embedded sketch and the raw prototype
/// in the reverse direction), plus lambda times the squared weights.
template <class T>
ad::Var zsl_sample_term(ad::Binder<T>& bind, std::span<const double> sketch_feature, std::span<const double> prototype,
                        const EveConfig& cfg, double lambda) {
  auto& tape = bind.tape();
  auto as_const = [&](std::span<const double> v) { return tape.constant({v.size()}, std::vector<T>(v.begin(), v.end())); };
  ad::Var lhs, rhs;
  if (cfg.direction == EmbedDirection::semantic_to_visual) {
    lhs = as_const(sketch_feature);
    rhs = eve_forward(bind, as_const(prototype));
  } else {
    lhs = eve_forward(bind, as_const(sketch_feature));
    rhs = as_const(prototype);
  }
  std::vector<ad::Var> weights{bind("eve.fc0.w"), bind("eve.fc0.b"), bind("eve.fc1.w"), bind("eve.fc1.b")};
  return zsl_embedding_term(tape, lhs, rhs, weights, lambda);
}

struct ZslSchedule {
  int epochs = 20;
  int batch_size = 32;
  ad::OptimizerConfig optimizer{ad::OptimizerKind::rmsprop, 1e-3};
  double lambda = 1e-4;
  std::uint64_t seed = 1;
  bool near_identity_init = false;

  void validate() const {
    if (epochs < 0) fail(ErrorKind::ConfigError, "epochs must be >= 0");
    if (batch_size < 1) fail(ErrorKind::ConfigError, "batch_size must be >= 1");
    if (!(optimizer.lr > 0.0)) fail(ErrorKind::ConfigError, "learning rate must be > 0");
    if (!std::isfinite(lambda) || lambda < 0.0) fail(ErrorKind::ConfigError, "lambda must be finite and >= 0");
  }
};

/// Mean embedding loss over (feature, class) pairs at the given parameters.
template <class T>
double zsl_embedding_loss(const Matrix& features, std::span<const int> labels, const std::map<int, std::vector<double>>& prototypes,
                          const ad::ParameterSet<T>& params, const EveConfig& cfg, double lambda) {
  detail::check_batch(features, labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    ad::Tape<T> tape;
    ad::Binder<T> bind(tape, params);
    auto it = prototypes.find(labels[i]);
    if (it == prototypes.end()) fail(ErrorKind::MissingPrototype, "class " + std::to_string(labels[i]));
    total += static_cast<double>(tape.scalar(zsl_sample_term(bind, features[i], it->second, cfg, lambda)));
  }
  return total / static_cast<double>(features.size());
}

inline std::map<int, std::vector<double>> prototype_map(std::span<const ClassPrototype> prototypes) {
  std::map<int, std::vector<double>> m;
  for (const auto& p : prototypes) m[p.class_id] = p.values;
  return m;
}

/// Trains the embedding subnet against fixed sketch features. The sketch
/// encoder is never updated.
template <class T>
ad::ParameterSet<T> train_eve(const Matrix& features, std::span<const int> labels, std::span<const ClassPrototype> prototypes,
                              const EveConfig& cfg, const ZslSchedule& schedule, std::vector<TrainLogEntry>* log = nullptr) {
  cfg.validate();
  schedule.validate();
  const auto protos = prototype_map(prototypes);
  for (const auto& [cls, v] : protos)
    if (v.size() != static_cast<std::size_t>(cfg.semantic_dim))
      fail(ErrorKind::DimensionMismatch, "prototype of class " + std::to_string(cls) + " has " + std::to_string(v.size()) +
                                             " values, config says " + std::to_string(cfg.semantic_dim));
  if (features.size() != labels.size()) fail(ErrorKind::DimensionMismatch, "feature/label count");
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!protos.count(labels[i])) fail(ErrorKind::MissingPrototype, "class " + std::to_string(labels[i]));
    if (features[i].size() != static_cast<std::size_t>(cfg.visual_dim))
      fail(ErrorKind::DimensionMismatch, "sketch feature dim vs embedding visual_dim");
  }

  auto params = init_eve<T>(cfg, schedule.seed, schedule.near_identity_init);
  ad::Optimizer<T> opt(schedule.optimizer);
  std::mt19937_64 rng(detail::splitmix64(schedule.seed ^ 0xE7EULL));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto B = static_cast<std::size_t>(schedule.batch_size);
  for (int e = 0; e < schedule.epochs && !order.empty(); ++e) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += B) {
      const std::size_t n = std::min(B, order.size() - b);
      std::vector<std::vector<T>> grads(params.size());
      for (std::size_t j = b; j < b + n; ++j) {
        ad::Tape<T> tape;
        ad::Binder<T> bind(tape, params, &grads);
        const std::size_t i = order[j];
        ad::Var l = zsl_sample_term(bind, features[i], protos.at(labels[i]), cfg, schedule.lambda);
        sum += static_cast<double>(tape.scalar(l));
        tape.backward(l, T(1) / static_cast<T>(n));
      }
      params.zero_grad();
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < grads[i].size(); ++k) params[i].grad[k] += grads[i][k];
      opt.step(params);
    }
    if (log) {
      TrainLogEntry entry;
      entry.stage = "eve";
      entry.epoch = e;
      entry.total = sum / static_cast<double>(order.size());
      entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log->push_back(entry);
    }
  }
  return params;
}

/// Sketch-encoder (SE) network trained with cross entropy on seen classes.
/// Class ids are mapped to head indices in ascending order.
template <class T>
struct SketchEncoderModel {
  ad::ParameterSet<T> params;
  std::vector<int> classes;  // head index -> class id
  std::vector<TrainLogEntry> log;
};

template <class T>
SketchEncoderModel<T> train_sketch_encoder(std::span<const SketchSample> seen, const EncoderConfig& cfg,
                                           const TrainSchedule& schedule, const StageCallback<T>& on_stage = {}) {
  cfg.validate();
  schedule.validate();
  if (cfg.fusion_activation != ad::Activation::relu)
    fail(ErrorKind::TopologyMismatch, "the zero-shot sketch encoder uses relu fusion");
  if (seen.empty()) fail(ErrorKind::EmptyBatch, "no seen-class training samples");
  SketchEncoderModel<T> model;
  std::set<int> ids;
  for (const auto& s : seen) ids.insert(s.class_id);
  model.classes.assign(ids.begin(), ids.end());
  if (static_cast<int>(model.classes.size()) != cfg.num_classes)
    fail(ErrorKind::ConfigError, "num_classes is " + std::to_string(cfg.num_classes) + " but " +
                                     std::to_string(model.classes.size()) + " seen classes are present");
  std::vector<int> labels;
  for (const auto& s : seen)
    labels.push_back(static_cast<int>(std::lower_bound(model.classes.begin(), model.classes.end(), s.class_id) - model.classes.begin()));
  model.params = init_encoder<T>(cfg, schedule.seed);
  auto inputs = prepare_inputs<T>(seen);
  StageTrainer<T> trainer(model.params, inputs, schedule, model.log);
  train_classifier_stages<T>(trainer, model.params, labels, cfg, schedule, on_stage);
  return model;
}

/// Checks the zero-shot split: no seen sample may belong to an unseen class.
inline void check_disjoint(std::span<const SketchSample> seen, std::span<const int> unseen) {
  const std::set<int> u(unseen.begin(), unseen.end());
  for (const auto& s : seen)
    if (u.count(s.class_id))
      fail(ErrorKind::SplitOverlap, "class " + std::to_string(s.class_id) + " is both seen and unseen");
}

template <class T>
struct ZslModel {
  ad::ParameterSet<T> eve;
  std::vector<TrainLogEntry> log;
};

/// Fixes the sketch encoder, extracts seen-class features once, and trains
/// the embedding subnet on them.
template <class T>
ZslModel<T> train_zsl(std::span<const SketchSample> seen, std::span<const ClassPrototype> prototypes,
                      const ad::ParameterSet<T>& se_params, const EncoderConfig& se_cfg, const EveConfig& cfg,
                      const ZslSchedule& schedule, std::span<const int> unseen, int threads = 1) {
  check_disjoint(seen, unseen);
  if (se_cfg.fusion_activation != ad::Activation::relu)
    fail(ErrorKind::TopologyMismatch, "the zero-shot sketch encoder uses relu fusion");
  check_topology(se_params, se_cfg);
  if (cfg.visual_dim != se_cfg.fusion_dim)
    fail(ErrorKind::DimensionMismatch, "visual_dim " + std::to_string(cfg.visual_dim) + " vs sketch feature dim " +
                                           std::to_string(se_cfg.fusion_dim));
  auto inputs = prepare_inputs<T>(seen);
  Matrix features = extract_features<T>(inputs, se_params, se_cfg, threads);
  std::vector<int> labels;
  for (const auto& s : seen) labels.push_back(s.class_id);
  ZslModel<T> model;
  model.eve = train_eve<T>(features, labels, prototypes, cfg, schedule, &model.log);
  return model;
}

// ---------------------------------------------------------------------------
// Nearest-prototype classification

enum class ZslMode { zsl, gzsl };

struct RankedClass {
  int class_id = -1;
  double distance = 0.0;
};

/// A candidate class in the space where distances are measured.
struct EmbeddedPrototype {
  int class_id = -1;
  std::vector<double> values;
};

/// Candidates in comparison space: embedded prototypes for
/// semantic_to_visual, raw prototypes for visual_to_semantic.
template <class T>
std::vector<EmbeddedPrototype> embed_candidates(std::span<const ClassPrototype> prototypes, const ad::ParameterSet<T>& eve,
                                                const EveConfig& cfg) {
  std::vector<EmbeddedPrototype> out;
  for (const auto& p : prototypes)
    out.push_back({p.class_id, cfg.direction == EmbedDirection::semantic_to_visual ? embed<T>(p.values, eve, cfg) : p.values});
  return out;
}

/// A sketch feature in comparison space.
template <class T>
std::vector<double> query_vector(std::span<const double> sketch_feature, const ad::ParameterSet<T>& eve, const EveConfig& cfg) {
  if (cfg.direction == EmbedDirection::semantic_to_visual) return {sketch_feature.begin(), sketch_feature.end()};
  return embed<T>(sketch_feature, eve, cfg);
}

/// Candidates by ascending squared distance, ties by ascending class id. In
/// zsl mode only classes listed in `unseen` are ranked.
inline std::vector<RankedClass> classify_zsl(std::span<const double> query, std::span<const EmbeddedPrototype> candidates,
                                             ZslMode mode, std::span<const int> unseen = {}) {
  const std::set<int> u(unseen.begin(), unseen.end());
  std::vector<RankedClass> out;
  for (const auto& c : candidates) {
    if (mode == ZslMode::zsl && !u.count(c.class_id)) continue;
    if (c.values.size() != query.size())
      fail(ErrorKind::DimensionMismatch, "candidate " + std::to_string(c.class_id) + " has " + std::to_string(c.values.size()) +
                                             " values, query has " + std::to_string(query.size()));
    double d = 0.0;
    for (std::size_t k = 0; k < query.size(); ++k) d += (query[k] - c.values[k]) * (query[k] - c.values[k]);
    out.push_back({c.class_id, d});
  }
  if (out.empty()) fail(ErrorKind::EmptyCandidateSet, mode == ZslMode::zsl ? "no unseen candidates" : "no candidates");
  std::sort(out.begin(), out.end(), [](const RankedClass& a, const RankedClass& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.class_id < b.class_id;
  });
  return out;
}

/// End to end for one sample: encode with the frozen SE network, move to
/// comparison space, rank.
template <class T>
std::vector<RankedClass> classify_zsl(const SketchSample& sample, std::span<const EmbeddedPrototype> candidates,
                                      const ad::ParameterSet<T>& se_params, const EncoderConfig& se_cfg,
                                      const ad::ParameterSet<T>& eve, const EveConfig& cfg, ZslMode mode,
                                      std::span<const int> unseen = {}) {
  auto f = encode<T>(sample, se_params, se_cfg).values;
  return classify_zsl(query_vector<T>(f, eve, cfg), candidates, mode, unseen);
}

}  // namespace sketch
