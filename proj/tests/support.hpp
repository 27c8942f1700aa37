#pragma once

// Shared test helpers: central finite-difference gradient checks and the
// catalogue of ops and losses they cover.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sketch/sketch.hpp"

namespace sketch::testing {

struct GradInput {
  ad::Shape shape;
  std::vector<double> values;
};

struct GradResult {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

/// Relative error with an absolute floor so exact-zero gradients compare
/// cleanly.
inline double rel_error(double a, double n) {
  const double diff = std::abs(a - n);
  if (diff < 1e-9) return 0.0;
  return diff / std::max(std::abs(a), std::abs(n));
}

using LeafBuilder = std::function<ad::Var(ad::Tape<double>&, const std::vector<ad::Var>&)>;

/// Analytic gradients of a scalar w.r.t. every input leaf vs central
/// differences with step h.
inline GradResult gradcheck(const std::vector<GradInput>& inputs, const LeafBuilder& f, double h = 1e-5) {
  auto eval = [&](const std::vector<GradInput>& in, std::vector<std::vector<double>>* grads) {
    ad::Tape<double> tape;
    std::vector<ad::Var> leaves;
    for (const auto& x : in) leaves.push_back(tape.leaf(x.shape, x.values));
    ad::Var out = f(tape, leaves);
    if (grads) {
      tape.backward(out);
      for (auto v : leaves) {
        auto g = tape.grad(v);
        grads->emplace_back(g.begin(), g.end());
        if (grads->back().empty()) grads->back().assign(tape.value(v).size(), 0.0);
      }
    }
    return tape.scalar(out);
  };
  std::vector<std::vector<double>> analytic;
  eval(inputs, &analytic);
  GradResult r;
  auto work = inputs;
  for (std::size_t i = 0; i < work.size(); ++i)
    for (std::size_t k = 0; k < work[i].values.size(); ++k) {
      const double x0 = work[i].values[k];
      work[i].values[k] = x0 + h;
      const double up = eval(work, nullptr);
      work[i].values[k] = x0 - h;
      const double dn = eval(work, nullptr);
      work[i].values[k] = x0;
      const double num = (up - dn) / (2 * h);
      r.max_rel = std::max(r.max_rel, rel_error(analytic[i][k], num));
      r.max_abs = std::max(r.max_abs, std::abs(analytic[i][k] - num));
      ++r.checked;
    }
  return r;
}

using ParamBuilder = std::function<ad::Var(ad::Binder<double>&)>;

/// Same check through named parameters and the Binder gradient sinks.
inline GradResult gradcheck_params(ad::ParameterSet<double> params, const ParamBuilder& f, double h = 1e-5) {
  auto eval = [&](const ad::ParameterSet<double>& p, std::vector<std::vector<double>>* grads) {
    ad::Tape<double> tape;
    ad::Binder<double> bind(tape, p, grads);
    ad::Var out = f(bind);
    if (grads) tape.backward(out);
    return tape.scalar(out);
  };
  std::vector<std::vector<double>> analytic(params.size());
  eval(params, &analytic);
  GradResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i];
    if (analytic[i].empty()) analytic[i].assign(t.size(), 0.0);
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double x0 = t.values[k];
      t.values[k] = x0 + h;
      const double up = eval(params, nullptr);
      t.values[k] = x0 - h;
      const double dn = eval(params, nullptr);
      t.values[k] = x0;
      const double num = (up - dn) / (2 * h);
      r.max_rel = std::max(r.max_rel, rel_error(analytic[i][k], num));
      r.max_abs = std::max(r.max_abs, std::abs(analytic[i][k] - num));
      ++r.checked;
    }
  }
  return r;
}

inline std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Values bounded away from zero so relu kinks stay outside the FD stencil.
inline std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n) {
  auto v = random_vec(rng, n, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : v)
    if (sign(rng)) x = -x;
  return v;
}

/// Scalarizes a tensor output with fixed random weights so every component
/// contributes a distinct gradient.
inline ad::Var project(ad::Tape<double>& t, ad::Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xABCDEFULL);
  const auto n = t.value(y).size();
  ad::Var w = t.constant({n}, random_vec(rng, n));
  return ad::sum(t, ad::mul(t, y, w));
}

struct GradCase {
  std::string name;
  std::function<GradResult(std::uint64_t seed)> run;
};

inline EncoderConfig tiny_encoder(ad::Activation fusion = ad::Activation::sigmoid) {
  EncoderConfig c;
  c.raster_size = 8;
  c.cnn_stages = 1;
  c.cnn_channels = 2;
  c.cnn_out = 3;
  c.rnn_layers = 2;
  c.rnn_hidden = 2;
  c.fusion_dim = 4;
  c.fusion_activation = fusion;
  c.num_classes = 3;
  return c;
}

inline EncoderInput<double> random_input(std::mt19937_64& rng, const EncoderConfig& cfg, std::size_t steps = 3) {
  EncoderInput<double> in;
  in.raster_size = cfg.raster_size;
  in.raster = random_vec(rng, static_cast<std::size_t>(cfg.raster_size * cfg.raster_size), 0.0, 1.0);
  for (std::size_t i = 0; i < steps; ++i) {
    auto d = random_vec(rng, 2, -0.5, 0.5);
    in.steps.push_back({d[0], d[1], i == 1 ? 0.0 : 1.0, i == 1 ? 1.0 : 0.0});
  }
  return in;
}

/// Random parameters with biases too, so relu kinks sit at random places.
inline ad::ParameterSet<double> random_params(const std::vector<std::pair<std::string, ad::Shape>>& layout, std::mt19937_64& rng) {
  ad::ParameterSet<double> p;
  for (const auto& [name, shape] : layout) p.add(name, ad::Tensor<double>(shape, random_vec(rng, ad::numel(shape), -0.8, 0.8)));
  return p;
}

/// Every op and loss whose gradient the library relies on.
inline std::vector<GradCase> gradient_cases() {
  using ad::Var;
  std::vector<GradCase> cases;

  cases.push_back({"dense", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return gradcheck({{{4}, random_vec(rng, 4)}, {{3, 4}, random_vec(rng, 12)}, {{3}, random_vec(rng, 3)}},
                                      [seed](ad::Tape<double>& t, const std::vector<Var>& v) {
                                        return project(t, ad::dense(t, v[0], v[1], v[2]), seed);
                                      });
                   }});
  for (auto [name, act] : {std::pair{"sigmoid", ad::Activation::sigmoid}, {"tanh", ad::Activation::tanh}, {"relu", ad::Activation::relu}})
    cases.push_back({name, [act](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       return gradcheck({{{6}, away_from_zero(rng, 6)}}, [act, seed](ad::Tape<double>& t, const std::vector<Var>& v) {
                         return project(t, ad::activate(t, v[0], act), seed);
                       });
                     }});
  cases.push_back({"conv2d", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return gradcheck({{{2, 5, 5}, random_vec(rng, 50)}, {{3, 2, 3, 3}, random_vec(rng, 54)}, {{3}, random_vec(rng, 3)}},
                                      [seed](ad::Tape<double>& t, const std::vector<Var>& v) {
                                        return project(t, ad::conv2d(t, v[0], v[1], v[2]), seed);
                                      });
                   }});
  cases.push_back({"maxpool2", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return gradcheck({{{2, 4, 4}, random_vec(rng, 32)}}, [seed](ad::Tape<double>& t, const std::vector<Var>& v) {
                       return project(t, ad::maxpool2(t, v[0]), seed);
                     });
                   }});
  cases.push_back({"gru_cell", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t I = 3, H = 2;
                     return gradcheck({{{I}, random_vec(rng, I)},
                                       {{H}, random_vec(rng, H)},
                                       {{3 * H, I}, random_vec(rng, 3 * H * I)},
                                       {{3 * H, H}, random_vec(rng, 3 * H * H)},
                                       {{3 * H}, random_vec(rng, 3 * H)},
                                       {{3 * H}, random_vec(rng, 3 * H)}},
                                      [seed](ad::Tape<double>& t, const std::vector<Var>& v) {
                                        return project(t, ad::gru_cell(t, v[0], v[1], v[2], v[3], v[4], v[5]), seed);
                                      });
                   }});
  cases.push_back({"gru_bidirectional", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto cfg = tiny_encoder();
                     auto in = random_input(rng, cfg, 4);
                     std::vector<std::pair<std::string, ad::Shape>> layout;
                     for (const auto& e : encoder_layout(cfg))
                       if (e.first.rfind("rnn.", 0) == 0) layout.push_back(e);
                     return gradcheck_params(random_params(layout, rng), [&in, &cfg, seed](ad::Binder<double>& b) {
                       return project(b.tape(), rnn_branch(b, in, cfg), seed);
                     });
                   }});
  cases.push_back({"fusion_encoder", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto cfg = tiny_encoder(seed % 2 ? ad::Activation::sigmoid : ad::Activation::relu);
                     auto in = random_input(rng, cfg);
                     return gradcheck_params(random_params(encoder_layout(cfg), rng), [&in, &cfg, seed](ad::Binder<double>& b) {
                       return project(b.tape(), fused_feature(b, in, cfg), seed);
                     });
                   }});
  cases.push_back({"cross_entropy", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const int label = static_cast<int>(seed % 5);
                     return gradcheck({{{6}, random_vec(rng, 6, 0.0, 1.0)}, {{5, 6}, random_vec(rng, 30)}, {{5}, random_vec(rng, 5)}},
                                      [label](ad::Tape<double>& t, const std::vector<Var>& v) {
                                        return ad::softmax_cross_entropy(t, ad::dense(t, v[0], v[1], v[2]), static_cast<std::size_t>(label));
                                      });
                   }});
  cases.push_back({"sketch_center", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto c = random_vec(rng, 8, 0.0, 1.0);
                     return gradcheck({{{8}, random_vec(rng, 8, 0.0, 1.0)}}, [c](ad::Tape<double>& t, const std::vector<Var>& v) {
                       return distance_to_constant(t, v[0], c);
                     });
                   }});
  cases.push_back({"quantization", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto f = random_vec(rng, 8, 0.0, 1.0);
                     auto b = quantize(f).as_reals();
                     return gradcheck({{{8}, f}}, [b](ad::Tape<double>& t, const std::vector<Var>& v) {
                       return distance_to_constant(t, v[0], b);
                     });
                   }});
  cases.push_back({"full_hashing_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto c = random_vec(rng, 6, 0.0, 1.0);
                     auto f = random_vec(rng, 6, 0.0, 1.0);
                     auto b = quantize(f).as_reals();
                     const auto label = static_cast<std::size_t>(seed % 4);
                     return gradcheck({{{6}, f}, {{4, 6}, random_vec(rng, 24)}, {{4}, random_vec(rng, 4)}},
                                      [c, b, label](ad::Tape<double>& t, const std::vector<Var>& v) {
                                        Var ce = ad::softmax_cross_entropy(t, ad::dense(t, v[0], v[1], v[2]), label);
                                        return ad::weighted_sum(t, {ce, distance_to_constant(t, v[0], c), distance_to_constant(t, v[0], b)},
                                                                std::vector<double>{1.0, 0.37, 0.21});
                                      });
                   }});
  cases.push_back({"zsl_embedding", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     EveConfig cfg;
                     cfg.semantic_dim = 4;
                     cfg.hidden = 5;
                     cfg.visual_dim = 3;
                     cfg.direction = seed % 2 ? EmbedDirection::semantic_to_visual : EmbedDirection::visual_to_semantic;
                     auto sketch = random_vec(rng, 3, 0.0, 1.0);
                     auto proto = random_vec(rng, 4, 0.0, 1.0);
                     return gradcheck_params(random_params(eve_layout(cfg), rng), [&](ad::Binder<double>& b) {
                       return zsl_sample_term(b, sketch, proto, cfg, 0.3);
                     });
                   }});
  return cases;
}

}  // namespace sketch::testing
