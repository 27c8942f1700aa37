#pragma once

// Loss functions over fusion features: softmax cross entropy, the sketch
// center loss against fixed entropy-gated class centers, the mini-batch
// common center loss baseline, the quantization loss, their weighted sum,
// and the zero-shot embedding loss.
//
// The batch functions here return the value plus gradients with respect to
// their real-valued inputs; the training loop uses the per-sample tape terms
// (`*_term`) directly.

#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <vector>

#include "sketch/autodiff.hpp"
#include "sketch/encoder.hpp"
#include "sketch/entropy.hpp"
#include "sketch/error.hpp"

namespace sketch {

using Matrix = std::vector<std::vector<double>>;

struct LossWeights {
  double lambda_scl = 0.01;
  double lambda_ql = 0.0001;
  double lambda_zsl = 1e-4;

  void validate() const {
    for (double v : {lambda_scl, lambda_ql, lambda_zsl})
      if (!std::isfinite(v) || v < 0.0) fail(ErrorKind::ConfigError, "loss weights must be finite and >= 0");
  }
};

enum class CenterNormalization { literal_gamma, actual_count };

struct ClassCenter {
  int class_id = -1;
  std::vector<double> center;
  std::size_t kept_count = 0;
  std::size_t class_size = 0;
  double gamma = 1.0;
  CenterNormalization normalization = CenterNormalization::literal_gamma;
};

using CenterMap = std::map<int, ClassCenter>;

struct LossValue {
  double value = 0.0;
  Matrix feature_grads;  // d value / d features, one row per sample
};

namespace detail {

inline void check_batch(const Matrix& features, std::size_t labels) {
  if (features.empty()) fail(ErrorKind::EmptyBatch, "loss over an empty batch");
  if (labels != features.size()) fail(ErrorKind::DimensionMismatch, "feature/label count");
  for (const auto& f : features)
    if (f.size() != features.front().size()) fail(ErrorKind::DimensionMismatch, "ragged feature batch");
}

/// Runs `term(tape, feature_var, i)` per sample and averages; gradients come
/// from one tape per sample seeded with 1/N.
template <class Term>
LossValue batch_mean(const Matrix& features, Term&& term) {
  LossValue out;
  const double inv_n = 1.0 / static_cast<double>(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    ad::Tape<double> tape;
    ad::Var f = tape.leaf({features[i].size()}, features[i]);
    ad::Var l = term(tape, f, i);
    out.value += tape.scalar(l) * inv_n;
    tape.backward(l, inv_n);
    auto g = tape.grad(f);
    out.feature_grads.emplace_back(g.begin(), g.end());
    if (out.feature_grads.back().empty()) out.feature_grads.back().assign(features[i].size(), 0.0);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-sample tape terms

template <class T>
ad::Var cross_entropy_term(ad::Binder<T>& bind, ad::Var feature, int label, const std::string& head = "head") {
  if (label < 0) fail(ErrorKind::LabelOutOfRange, "negative label");
  return ad::softmax_cross_entropy(bind.tape(), head_logits(bind, feature, head), static_cast<std::size_t>(label));
}

/// ||f - c||^2 with c held constant.
template <class T>
ad::Var distance_to_constant(ad::Tape<T>& tape, ad::Var feature, std::span<const double> target) {
  return ad::squared_distance(tape, feature, tape.constant({target.size()}, std::vector<T>(target.begin(), target.end())));
}

// ---------------------------------------------------------------------------
// Cross entropy

struct CrossEntropyValue : LossValue {
  std::vector<double> weight_grads;  // d/dW, same layout as ClassifierHead::weights
  std::vector<double> bias_grads;
};

inline CrossEntropyValue cross_entropy_loss(const Matrix& features, std::span<const int> labels, const ClassifierHead& head) {
  detail::check_batch(features, labels.size());
  if (features.front().size() != head.dim) fail(ErrorKind::DimensionMismatch, "feature dim vs head dim");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= head.classes())
      fail(ErrorKind::LabelOutOfRange, "label " + std::to_string(y));

  ad::ParameterSet<double> hp;
  hp.add("head.w", ad::Tensor<double>({head.classes(), head.dim}, head.weights));
  hp.add("head.b", ad::Tensor<double>({head.classes()}, head.bias));
  std::vector<std::vector<double>> grads(2);
  CrossEntropyValue out;
  const double inv_n = 1.0 / static_cast<double>(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    ad::Tape<double> tape;
    ad::Binder<double> bind(tape, hp, &grads);
    ad::Var f = tape.leaf({head.dim}, features[i]);
    ad::Var l = cross_entropy_term(bind, f, labels[i]);
    out.value += tape.scalar(l) * inv_n;
    tape.backward(l, inv_n);
    auto g = tape.grad(f);
    out.feature_grads.emplace_back(g.begin(), g.end());
  }
  out.weight_grads = std::move(grads[0]);
  out.bias_grads = std::move(grads[1]);
  return out;
}

// ---------------------------------------------------------------------------
// Sketch center loss with fixed centers

struct LabeledFeature {
  std::int64_t sample_id = -1;
  int class_id = -1;
  std::vector<double> values;
};

/// Per class: gated sum of pretrained features divided by gamma * |K^y|
/// (literal_gamma) or by the number of gated samples (actual_count).
inline std::vector<ClassCenter> compute_class_centers(std::span<const LabeledFeature> features,
                                                      std::span<const EntropyRecord> entropies,
                                                      std::span<const ClassEntropyBand> bands,
                                                      CenterNormalization normalization) {
  std::map<std::int64_t, const EntropyRecord*> by_id;
  for (const auto& e : entropies) by_id[e.sample_id] = &e;
  if (by_id.size() != features.size())
    fail(ErrorKind::DimensionMismatch, "entropy records and features cover different sample sets");
  std::map<int, const ClassEntropyBand*> band_of;
  for (const auto& b : bands) band_of[b.class_id] = &b;

  std::map<int, ClassCenter> acc;
  for (const auto& f : features) {
    auto it = by_id.find(f.sample_id);
    if (it == by_id.end())
      fail(ErrorKind::DimensionMismatch, "no entropy record for sample " + std::to_string(f.sample_id));
    auto bit = band_of.find(f.class_id);
    if (bit == band_of.end()) fail(ErrorKind::MissingCenter, "no entropy band for class " + std::to_string(f.class_id));
    auto& c = acc[f.class_id];
    if (c.center.empty()) {
      c.class_id = f.class_id;
      c.center.assign(f.values.size(), 0.0);
      c.gamma = bit->second->gamma;
      c.normalization = normalization;
    }
    if (f.values.size() != c.center.size()) fail(ErrorKind::DimensionMismatch, "ragged features");
    c.class_size++;
    if (gate(*it->second, *bit->second)) {
      c.kept_count++;
      for (std::size_t k = 0; k < c.center.size(); ++k) c.center[k] += f.values[k];
    }
  }
  std::vector<ClassCenter> out;
  for (auto& [cls, c] : acc) {
    if (c.kept_count == 0) fail(ErrorKind::EmptyClassAfterGating, "class " + std::to_string(cls));
    const double div = normalization == CenterNormalization::literal_gamma
                           ? c.gamma * static_cast<double>(c.class_size)
                           : static_cast<double>(c.kept_count);
    for (auto& v : c.center) v /= div;
    out.push_back(std::move(c));
  }
  return out;
}

inline CenterMap to_center_map(std::span<const ClassCenter> centers) {
  CenterMap m;
  for (const auto& c : centers) m[c.class_id] = c;
  return m;
}

inline const ClassCenter& center_of(const CenterMap& centers, int class_id) {
  auto it = centers.find(class_id);
  if (it == centers.end()) fail(ErrorKind::MissingCenter, "class " + std::to_string(class_id));
  return it->second;
}

/// Mean squared distance to the fixed center of each sample's class.
inline LossValue sketch_center_loss(const Matrix& features, std::span<const int> labels, const CenterMap& centers) {
  detail::check_batch(features, labels.size());
  for (int y : labels) {
    const auto& c = center_of(centers, y);
    if (c.center.size() != features.front().size()) fail(ErrorKind::DimensionMismatch, "center dim");
  }
  return detail::batch_mean(features, [&](ad::Tape<double>& tape, ad::Var f, std::size_t i) {
    return distance_to_constant(tape, f, center_of(centers, labels[i]).center);
  });
}

// ---------------------------------------------------------------------------
// Common center loss (mini-batch updated centers)

class CommonCenters {
 public:
  explicit CommonCenters(double alpha = 0.5) : alpha_(alpha) {}

  double alpha() const { return alpha_; }
  bool has(int class_id) const { return centers_.count(class_id) != 0; }
  const std::vector<double>& at(int class_id) const { return centers_.at(class_id); }
  const std::map<int, std::vector<double>>& all() const { return centers_; }

  /// Classes without a center start at their mean over this batch.
  void init_missing(const Matrix& features, std::span<const int> labels) {
    std::map<int, std::pair<std::vector<double>, std::size_t>> sums;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (has(labels[i])) continue;
      auto& [s, n] = sums[labels[i]];
      if (s.empty()) s.assign(features[i].size(), 0.0);
      for (std::size_t k = 0; k < s.size(); ++k) s[k] += features[i][k];
      ++n;
    }
    for (auto& [cls, sn] : sums) {
      for (auto& v : sn.first) v /= static_cast<double>(sn.second);
      centers_[cls] = std::move(sn.first);
    }
  }

  /// c_j <- c_j - alpha * sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)
  void update(const Matrix& features, std::span<const int> labels) {
    std::map<int, std::pair<std::vector<double>, std::size_t>> delta;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const auto& c = centers_.at(labels[i]);
      auto& [d, n] = delta[labels[i]];
      if (d.empty()) d.assign(c.size(), 0.0);
      for (std::size_t k = 0; k < c.size(); ++k) d[k] += c[k] - features[i][k];
      ++n;
    }
    for (auto& [cls, dn] : delta) {
      auto& c = centers_.at(cls);
      for (std::size_t k = 0; k < c.size(); ++k) c[k] -= alpha_ * dn.first[k] / (1.0 + static_cast<double>(dn.second));
    }
  }

 private:
  double alpha_;
  std::map<int, std::vector<double>> centers_;
};

/// Loss against the current running centers (initialising unseen classes at
/// the batch mean), then moves the centers toward this batch.
inline LossValue common_center_loss(const Matrix& features, std::span<const int> labels, CommonCenters& centers) {
  detail::check_batch(features, labels.size());
  centers.init_missing(features, labels);
  auto out = detail::batch_mean(features, [&](ad::Tape<double>& tape, ad::Var f, std::size_t i) {
    return distance_to_constant(tape, f, centers.at(labels[i]));
  });
  centers.update(features, labels);
  return out;
}

// ---------------------------------------------------------------------------
// Quantization loss

inline void check_binary(std::span<const double> code) {
  for (double b : code)
    if (b != 0.0 && b != 1.0) fail(ErrorKind::NonBinaryCode, "code component " + std::to_string(b));
}

/// Mean ||b_n - f_n||^2 with codes fixed.
inline LossValue quantization_loss(const Matrix& features, const Matrix& codes) {
  detail::check_batch(features, codes.size());
  for (const auto& c : codes) {
    if (c.size() != features.front().size()) fail(ErrorKind::DimensionMismatch, "code dim vs feature dim");
    check_binary(c);
  }
  return detail::batch_mean(features, [&](ad::Tape<double>& tape, ad::Var f, std::size_t i) {
    return distance_to_constant(tape, f, codes[i]);
  });
}

// ---------------------------------------------------------------------------
// Full hashing loss

/// L_cel + lambda_scl * L_scl + lambda_ql * L_ql.
inline double combine_hashing_loss(double cel, double scl, double ql, const LossWeights& w) {
  return cel + w.lambda_scl * scl + w.lambda_ql * ql;
}

struct FullLossValue {
  double total = 0.0;
  double cel = 0.0;
  double scl = 0.0;
  double ql = 0.0;
  Matrix feature_grads;
};

inline FullLossValue full_hashing_loss(const Matrix& features, std::span<const int> labels, const ClassifierHead& head,
                                       const CenterMap& centers, const Matrix& codes, const LossWeights& w) {
  w.validate();
  auto ce = cross_entropy_loss(features, labels, head);
  auto sc = sketch_center_loss(features, labels, centers);
  auto q = quantization_loss(features, codes);
  FullLossValue out;
  out.cel = ce.value;
  out.scl = sc.value;
  out.ql = q.value;
  out.total = combine_hashing_loss(out.cel, out.scl, out.ql, w);
  out.feature_grads = ce.feature_grads;
  for (std::size_t i = 0; i < features.size(); ++i)
    for (std::size_t k = 0; k < features[i].size(); ++k)
      out.feature_grads[i][k] += w.lambda_scl * sc.feature_grads[i][k] + w.lambda_ql * q.feature_grads[i][k];
  return out;
}

// ---------------------------------------------------------------------------
// Zero-shot embedding loss term

/// ||sketch_feature - embedded_prototype||^2 + lambda * sum ||theta||^2.
template <class T>
ad::Var zsl_embedding_term(ad::Tape<T>& tape, ad::Var sketch_feature, ad::Var embedded_prototype,
                           const std::vector<ad::Var>& eve_params, double lambda) {
  ad::Var d = ad::squared_distance(tape, sketch_feature, embedded_prototype);
  if (lambda == 0.0 || eve_params.empty()) return d;
  std::vector<ad::Var> terms{d};
  std::vector<T> coefs{T(1)};
  for (ad::Var p : eve_params) {
    terms.push_back(ad::sum_squares(tape, p));
    coefs.push_back(static_cast<T>(lambda));
  }
  return ad::weighted_sum(tape, terms, coefs);
}

// ---------------------------------------------------------------------------
// Centers file: "SFCN", u32 count, then per class
//   u32 class_id, u32 dim, f64 values[dim], u32 kept_count.

inline void save_centers(std::ostream& out, std::span<const ClassCenter> centers) {
  out.write("SFCN", 4);
  ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(centers.size()));
  for (const auto& c : centers) {
    ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.class_id));
    ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.center.size()));
    for (double v : c.center) ad::io::put<double>(out, v);
    ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.kept_count));
  }
}

inline std::vector<ClassCenter> load_centers(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "SFCN") fail(ErrorKind::BadCheckpoint, "centers: bad magic");
  const auto n = ad::io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint);
  std::vector<ClassCenter> out(n);
  for (auto& c : out) {
    c.class_id = static_cast<int>(ad::io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint));
    c.center.resize(ad::io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint));
    for (auto& v : c.center) v = ad::io::get<double>(in, ErrorKind::BadCheckpoint);
    c.kept_count = ad::io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint);
  }
  return out;
}

}  // namespace sketch
