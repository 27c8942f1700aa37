#pragma once

// Staged training of the dual-branch encoder: branch pretraining, fusion
// fine-tuning, the center-loss stage, and the alternating loop that holds
// binary codes fixed while updating the network and then re-quantizes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sketch/autodiff.hpp"
#include "sketch/encoder.hpp"
#include "sketch/entropy.hpp"
#include "sketch/hashing.hpp"
#include "sketch/objectives.hpp"

namespace sketch {

/// Which loss terms the post-fusion stages use (the ablation ladder).
enum class HashVariant { cel, cel_cl, cel_scl, full };

inline std::string_view to_string(HashVariant v) {
  switch (v) {
    case HashVariant::cel: return "cel";
    case HashVariant::cel_cl: return "cel_cl";
    case HashVariant::cel_scl: return "cel_scl";
    case HashVariant::full: return "full";
  }
  return "?";
}

struct TrainSchedule {
  int pretrain_cnn_epochs = 2;
  int pretrain_rnn_epochs = 2;
  int fuse_epochs = 2;
  int scl_epochs = 2;
  int alt_iterations = 2;
  int inner_epochs = 1;
  int batch_size = 32;
  LossWeights weights;
  ad::OptimizerConfig optimizer;
  std::uint64_t seed = 1;
  double phi = 0.05;
  double varphi = 0.95;
  CenterNormalization normalization = CenterNormalization::literal_gamma;
  HashVariant variant = HashVariant::full;
  double cl_alpha = 0.5;
  int threads = 1;

  void validate() const {
    for (int v : {pretrain_cnn_epochs, pretrain_rnn_epochs, fuse_epochs, scl_epochs, alt_iterations})
      if (v < 0) fail(ErrorKind::ConfigError, "epoch counts must be >= 0");
    if (alt_iterations > 0 && inner_epochs < 1) fail(ErrorKind::ConfigError, "inner_epochs must be >= 1");
    if (batch_size < 1) fail(ErrorKind::ConfigError, "batch_size must be >= 1");
    if (threads < 1) fail(ErrorKind::ConfigError, "threads must be >= 1");
    if (!(optimizer.lr > 0.0)) fail(ErrorKind::ConfigError, "learning rate must be > 0");
    if (!(phi >= 0.0 && phi < varphi && varphi <= 1.0)) fail(ErrorKind::ConfigError, "need 0 <= phi < varphi <= 1");
    if (cl_alpha < 0.0 || cl_alpha > 1.0) fail(ErrorKind::ConfigError, "cl_alpha must be in [0, 1]");
    weights.validate();
  }
};

struct TrainLogEntry {
  std::string stage;
  int iteration = 0;
  int epoch = 0;
  double total = 0.0;
  double cel = 0.0;
  double scl = 0.0;
  double cl = 0.0;
  double ql = 0.0;
  double wall_seconds = 0.0;
};

template <class T>
using StageCallback = std::function<void(const std::string& stage, const ad::ParameterSet<T>& params)>;

/// Loss terms of one sample; `total` is what gets differentiated.
struct SampleTerms {
  ad::Var total;
  double cel = 0.0;
  double scl = 0.0;
  double cl = 0.0;
  double ql = 0.0;
  std::vector<double> feature;
};

namespace detail {

/// Calls fn(worker, begin, end) over contiguous chunks; worker 0 runs inline.
template <class Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = std::min(n, w * chunk), e = std::min(n, (w + 1) * chunk);
    pool.emplace_back([&fn, w, b, e] { fn(w, b, e); });
  }
  fn(std::size_t{0}, std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

inline bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

}  // namespace detail

/// Fused features of every input (forward only).
template <class T>
std::vector<std::vector<double>> extract_features(std::span<const EncoderInput<T>> inputs, const ad::ParameterSet<T>& params,
                                                  const EncoderConfig& cfg, int threads = 1) {
  check_topology(params, cfg);
  std::vector<std::vector<double>> out(inputs.size());
  detail::parallel_chunks(inputs.size(), threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = encode(inputs[i], params, cfg).values;
  });
  return out;
}

/// Mini-batch gradient descent over `inputs` for one stage.
template <class T>
class StageTrainer {
 public:
  StageTrainer(ad::ParameterSet<T>& params, std::span<const EncoderInput<T>> inputs, const TrainSchedule& schedule,
               std::vector<TrainLogEntry>& log)
      : params_(params),
        inputs_(inputs),
        schedule_(schedule),
        log_(log),
        optimizer_(schedule.optimizer),
        rng_(detail::splitmix64(schedule.seed ^ 0x5EEDULL)),
        order_(inputs.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  using LossFn = std::function<SampleTerms(ad::Binder<T>&, const EncoderInput<T>&, std::size_t)>;
  using BatchHook = std::function<void(std::span<const std::size_t> batch, const Matrix& features)>;

  /// One pass over shuffled inputs. `before` sees the batch before gradients
  /// are computed (features empty), `after` sees the features produced.
  TrainLogEntry epoch(const std::function<bool(const std::string&)>& select, const LossFn& loss,
                      const BatchHook& before = {}, const BatchHook& after = {}) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order_.begin(), order_.end(), rng_);
    TrainLogEntry sums;
    const auto B = static_cast<std::size_t>(schedule_.batch_size);
    for (std::size_t b = 0; b < order_.size(); b += B) {
      std::span<const std::size_t> batch(order_.data() + b, std::min(B, order_.size() - b));
      if (before) before(batch, {});
      Matrix features(batch.size());
      const int threads = schedule_.threads;
      const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), batch.size());
      std::vector<std::vector<std::vector<T>>> grads(workers, std::vector<std::vector<T>>(params_.size()));
      std::vector<TrainLogEntry> partial(workers);
      const T seed = T(1) / static_cast<T>(batch.size());
      detail::parallel_chunks(batch.size(), threads, [&](std::size_t w, std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
          ad::Tape<T> tape;
          ad::Binder<T> bind(tape, params_, &grads[w]);
          SampleTerms terms = loss(bind, inputs_[batch[j]], batch[j]);
          tape.backward(terms.total, seed);
          auto& p = partial[w];
          p.total += static_cast<double>(tape.scalar(terms.total));
          p.cel += terms.cel;
          p.scl += terms.scl;
          p.cl += terms.cl;
          p.ql += terms.ql;
          features[j] = std::move(terms.feature);
        }
      });
      params_.zero_grad();
      for (std::size_t w = 0; w < workers; ++w) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
          const auto& g = grads[w][i];
          auto& dst = params_[i].grad;
          for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
        }
        sums.total += partial[w].total;
        sums.cel += partial[w].cel;
        sums.scl += partial[w].scl;
        sums.cl += partial[w].cl;
        sums.ql += partial[w].ql;
      }
      optimizer_.step(params_, select);
      if (after) after(batch, features);
    }
    const double n = static_cast<double>(std::max<std::size_t>(order_.size(), 1));
    sums.total /= n;
    sums.cel /= n;
    sums.scl /= n;
    sums.cl /= n;
    sums.ql /= n;
    sums.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return sums;
  }

  void run(const std::string& stage, int epochs, const std::function<bool(const std::string&)>& select, const LossFn& loss,
           int iteration = 0, const BatchHook& before = {}, const BatchHook& after = {}) {
    for (int e = 0; e < epochs; ++e) {
      TrainLogEntry entry = epoch(select, loss, before, after);
      entry.stage = stage;
      entry.iteration = iteration;
      entry.epoch = e;
      log_.push_back(entry);
    }
  }

 private:
  ad::ParameterSet<T>& params_;
  std::span<const EncoderInput<T>> inputs_;
  const TrainSchedule& schedule_;
  std::vector<TrainLogEntry>& log_;
  ad::Optimizer<T> optimizer_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
};

inline bool is_cnn_param(const std::string& n) { return detail::starts_with(n, "cnn.") || detail::starts_with(n, "cnn_head."); }
inline bool is_rnn_param(const std::string& n) { return detail::starts_with(n, "rnn.") || detail::starts_with(n, "rnn_head."); }
inline bool is_joint_param(const std::string& n) {
  return !detail::starts_with(n, "cnn_head.") && !detail::starts_with(n, "rnn_head.");
}

/// Branch pretraining and fusion fine-tuning with cross entropy. `labels`
/// are head indices in [0, num_classes), aligned with `inputs`.
template <class T>
void train_classifier_stages(StageTrainer<T>& trainer, ad::ParameterSet<T>& params, std::span<const int> labels,
                             const EncoderConfig& cfg, const TrainSchedule& schedule, const StageCallback<T>& on_stage) {
  auto ce_only = [&](auto branch_fn, const char* head) {
    return [&, branch_fn, head](ad::Binder<T>& b, const EncoderInput<T>& in, std::size_t idx) {
      SampleTerms t;
      t.total = cross_entropy_term(b, branch_fn(b, in), labels[idx], head);
      t.cel = static_cast<double>(b.tape().scalar(t.total));
      return t;
    };
  };
  trainer.run("pretrain_cnn", schedule.pretrain_cnn_epochs, is_cnn_param,
              ce_only([&](ad::Binder<T>& b, const EncoderInput<T>& in) { return cnn_branch(b, in, cfg); }, "cnn_head"));
  if (on_stage) on_stage("pretrain_cnn", params);
  trainer.run("pretrain_rnn", schedule.pretrain_rnn_epochs, is_rnn_param,
              ce_only([&](ad::Binder<T>& b, const EncoderInput<T>& in) { return rnn_branch(b, in, cfg); }, "rnn_head"));
  if (on_stage) on_stage("pretrain_rnn", params);
  trainer.run("fuse", schedule.fuse_epochs, is_joint_param,
              ce_only([&](ad::Binder<T>& b, const EncoderInput<T>& in) { return fused_feature(b, in, cfg); }, "head"));
  if (on_stage) on_stage("fuse", params);
}

template <class T>
struct HashingModel {
  ad::ParameterSet<T> params;
  std::vector<ClassCenter> centers;
  CodeStore codes;
  std::vector<TrainLogEntry> log;
};

template <class T>
CodeStore quantize_features(const std::vector<std::vector<double>>& features, std::span<const EncoderInput<T>> inputs, int bits) {
  CodeStore store(bits);
  for (std::size_t i = 0; i < features.size(); ++i) store.add(quantize(features[i], inputs[i].sample_id, inputs[i].class_id));
  return store;
}

/// The full hashing procedure on the training split. Labels are the samples'
/// class ids and must lie in [0, cfg.num_classes).
template <class T>
HashingModel<T> train_hashing(std::span<const SketchSample> train, const EncoderConfig& cfg, const TrainSchedule& schedule,
                              const StageCallback<T>& on_stage = {}) {
  cfg.validate();
  schedule.validate();
  if (train.empty()) fail(ErrorKind::EmptyBatch, "empty training split");
  if (cfg.fusion_activation != ad::Activation::sigmoid)
    fail(ErrorKind::ConfigError, "hashing needs sigmoid fusion so features can be quantized");

  HashingModel<T> model;
  model.params = init_encoder<T>(cfg, schedule.seed);
  auto inputs = prepare_inputs<T>(train);
  std::vector<int> labels;
  for (const auto& s : train) {
    if (s.class_id < 0 || s.class_id >= cfg.num_classes)
      fail(ErrorKind::LabelOutOfRange, "class " + std::to_string(s.class_id) + " with num_classes " + std::to_string(cfg.num_classes));
    labels.push_back(s.class_id);
  }
  StageTrainer<T> trainer(model.params, inputs, schedule, model.log);
  train_classifier_stages<T>(trainer, model.params, labels, cfg, schedule, on_stage);

  // Fixed centers from the fused model's features, gated by image entropy.
  auto pre = extract_features<T>(inputs, model.params, cfg, schedule.threads);
  std::vector<LabeledFeature> labeled;
  labeled.reserve(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) labeled.push_back({inputs[i].sample_id, labels[i], pre[i]});
  auto entropies = entropy_records(train);
  auto bands = class_bands(entropies, schedule.phi, schedule.varphi);
  model.centers = compute_class_centers(labeled, entropies, bands, schedule.normalization);
  const CenterMap centers = to_center_map(model.centers);

  const auto& w = schedule.weights;
  const HashVariant variant = schedule.variant;
  const double lambda_scl = variant == HashVariant::cel_scl || variant == HashVariant::full ? w.lambda_scl : 0.0;
  const double lambda_cl = variant == HashVariant::cel_cl ? w.lambda_scl : 0.0;
  const double lambda_ql = variant == HashVariant::full ? w.lambda_ql : 0.0;

  CommonCenters common(schedule.cl_alpha);
  Matrix codes;  // 0/1 reals per input, fixed within an inner loop

  auto loss = [&](bool with_codes) {
    return [&, with_codes](ad::Binder<T>& b, const EncoderInput<T>& in, std::size_t idx) {
      auto& tape = b.tape();
      SampleTerms t;
      ad::Var f = fused_feature(b, in, cfg);
      ad::Var ce = cross_entropy_term(b, f, labels[idx], "head");
      ad::Var sc = distance_to_constant(tape, f, center_of(centers, labels[idx]).center);
      std::vector<ad::Var> terms{ce, sc};
      std::vector<T> coefs{T(1), static_cast<T>(lambda_scl)};
      t.cel = static_cast<double>(tape.scalar(ce));
      t.scl = static_cast<double>(tape.scalar(sc));
      if (variant == HashVariant::cel_cl) {
        ad::Var cl = distance_to_constant(tape, f, common.at(labels[idx]));
        terms.push_back(cl);
        coefs.push_back(static_cast<T>(lambda_cl));
        t.cl = static_cast<double>(tape.scalar(cl));
      }
      if (with_codes) {
        ad::Var q = distance_to_constant(tape, f, codes[idx]);
        terms.push_back(q);
        coefs.push_back(static_cast<T>(lambda_ql));
        t.ql = static_cast<double>(tape.scalar(q));
      }
      t.total = ad::weighted_sum(tape, terms, coefs);
      auto fv = tape.value(f);
      t.feature.assign(fv.begin(), fv.end());
      return t;
    };
  };

  typename StageTrainer<T>::BatchHook before, after;
  if (variant == HashVariant::cel_cl) {
    before = [&](std::span<const std::size_t> batch, const Matrix&) {
      Matrix feats;
      std::vector<int> ys;
      for (std::size_t i : batch)
        if (!common.has(labels[i])) {
          feats.push_back(encode(inputs[i], model.params, cfg).values);
          ys.push_back(labels[i]);
        }
      if (!feats.empty()) common.init_missing(feats, ys);
    };
    after = [&](std::span<const std::size_t> batch, const Matrix& feats) {
      std::vector<int> ys;
      for (std::size_t i : batch) ys.push_back(labels[i]);
      common.update(feats, ys);
    };
  }

  trainer.run("center", schedule.scl_epochs, is_joint_param, loss(false), 0, before, after);
  if (on_stage) on_stage("center", model.params);

  auto recompute_codes = [&] {
    auto feats = extract_features<T>(inputs, model.params, cfg, schedule.threads);
    codes.assign(feats.size(), {});
    for (std::size_t i = 0; i < feats.size(); ++i) codes[i] = quantize(feats[i]).as_reals();
    return feats;
  };
  auto feats = recompute_codes();
  for (int it = 0; it < schedule.alt_iterations; ++it) {
    trainer.run("alternate", schedule.inner_epochs, is_joint_param, loss(true), it, before, after);
    feats = recompute_codes();
  }
  if (on_stage && schedule.alt_iterations > 0) on_stage("alternate", model.params);
  model.codes = quantize_features<T>(feats, inputs, cfg.fusion_dim);
  return model;
}

/// Codes for arbitrary samples under a trained model, in input order.
template <class T>
CodeStore encode_gallery(std::span<const SketchSample> samples, const ad::ParameterSet<T>& params, const EncoderConfig& cfg,
                         int threads = 1) {
  check_topology(params, cfg);
  CodeStore store(cfg.fusion_dim);
  if (samples.empty()) return store;
  auto inputs = prepare_inputs<T>(samples);
  auto feats = extract_features<T>(inputs, params, cfg, threads);
  return quantize_features<T>(feats, inputs, cfg.fusion_dim);
}

}  // namespace sketch
