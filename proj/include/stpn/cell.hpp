#pragma once

// The short-term plasticity neuron layer. Each synapse (j, i) carries a
// trace F(j, i) that is added to the long-term weight W(j, i):
//
//   G     = W + F
//   Ĝ, F̂  = G / |G_j|, F / |G_j|           (per neuron row j, optional)
//   h     = σ(Ĝ u)
//   F'    = Γ ⊙ (h uᵀ) + R ⊙ F̂             R = Λ, or 1 − Λ
//
// Rows are postsynaptic neurons, columns presynaptic inputs. In the recurrent
// topology u = [x; h_prev], so recurrent synapses are plastic as well.

#include <algorithm>
#include <cmath>
#include <string>

#include "stpn/tensor.hpp"

namespace stpn {

enum class Topology { feedforward, recurrent };
enum class PlasticityMode { per_synapse, uniform };
enum class RetentionForm { lambda, one_minus_lambda };
enum class Activation { tanh, identity };

inline constexpr double kNormEpsilon = 1e-12;

inline const char* to_string(Topology t) {
  return t == Topology::feedforward ? "feedforward" : "recurrent";
}
inline const char* to_string(PlasticityMode m) {
  return m == PlasticityMode::per_synapse ? "per_synapse" : "uniform";
}
inline const char* to_string(RetentionForm r) {
  return r == RetentionForm::lambda ? "lambda" : "one_minus_lambda";
}
inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

inline Topology topology_from_string(const std::string& s) {
  if (s == "feedforward" || s == "f") return Topology::feedforward;
  if (s == "recurrent" || s == "r") return Topology::recurrent;
  throw Error("unknown topology '" + s + "'");
}
inline PlasticityMode plasticity_from_string(const std::string& s) {
  if (s == "per_synapse") return PlasticityMode::per_synapse;
  if (s == "uniform") return PlasticityMode::uniform;
  throw Error("unknown plasticity mode '" + s + "'");
}
inline RetentionForm retention_from_string(const std::string& s) {
  if (s == "lambda" || s == "alg1") return RetentionForm::lambda;
  if (s == "one_minus_lambda" || s == "eq3") return RetentionForm::one_minus_lambda;
  throw Error("unknown retention form '" + s + "'");
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw Error("unknown activation '" + s + "'");
}

struct StepConfig {
  bool normalize = true;
  RetentionForm retention = RetentionForm::lambda;
  Activation activation = Activation::tanh;
  // Inference-time ablation: keep F at its current value.
  bool freeze_trace = false;
};

struct StpnParams {
  Matrix W;
  Matrix Gamma;
  Matrix Lambda;
  PlasticityMode mode = PlasticityMode::per_synapse;
  Topology topology = Topology::recurrent;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;

  std::size_t presynaptic_dim() const {
    return topology == Topology::recurrent ? input_dim + hidden : input_dim;
  }
  Shape shape() const { return {hidden, presynaptic_dim()}; }

  // W, Γ, Λ in per-synapse mode; W plus one shared (γ, λ) pair in uniform mode.
  std::size_t trainable_count() const {
    const std::size_t n = hidden * presynaptic_dim();
    return mode == PlasticityMode::per_synapse ? 3 * n : n + 2;
  }

  template <class F>
  void for_each_block(F&& f) {
    f("W", W.values(), W.shape());
    f("Gamma", Gamma.values(), Gamma.shape());
    f("Lambda", Lambda.values(), Lambda.shape());
  }
  template <class F>
  void for_each_block(F&& f) const {
    f("W", W.values(), W.shape());
    f("Gamma", Gamma.values(), Gamma.shape());
    f("Lambda", Lambda.values(), Lambda.shape());
  }

  friend bool operator==(const StpnParams&, const StpnParams&) = default;
};

struct SynapticTrace {
  Matrix F;
  std::size_t t = 0;

  static SynapticTrace zeros(const StpnParams& p) { return {Matrix(p.shape()), 0}; }
};

struct CellStep {
  Vector u;       // presynaptic vector actually used
  Vector pre;     // Ĝ u
  Vector h;
  Matrix G_hat;
  Matrix F_hat;
  Vector norms;   // divisor applied per row (1 when passed through)
  std::vector<unsigned char> scaled;  // row was normalized
  Matrix F_next;
};

inline double activate(Activation a, double x) { return a == Activation::tanh ? std::tanh(x) : x; }

// d σ / d pre, expressed through the output h
inline double activation_slope(Activation a, double h) {
  return a == Activation::tanh ? 1.0 - h * h : 1.0;
}

// Sets every entry of Γ and of Λ to its mean.
inline void project_uniform(StpnParams& p) {
  if (p.mode != PlasticityMode::uniform) return;
  for (Matrix* m : {&p.Gamma, &p.Lambda}) {
    if (m->size() == 0) continue;
    const auto vals = m->values();
    if (std::all_of(vals.begin(), vals.end(), [&](double v) { return v == vals[0]; })) continue;
    double s = 0.0;
    for (double v : m->values()) s += v;
    m->fill(s / static_cast<double>(m->size()));
  }
}

// W ~ U(±1/√fan_in), γ ~ U(±0.001/√h), λ ~ U(0, 1).
inline StpnParams init_stpn(Rng& rng, std::size_t input_dim, std::size_t hidden, Topology topology,
                            PlasticityMode mode) {
  if (input_dim == 0 || hidden == 0) throw Error("init_stpn: dimensions must be >= 1");
  StpnParams p;
  p.mode = mode;
  p.topology = topology;
  p.input_dim = input_dim;
  p.hidden = hidden;
  const Shape s = p.shape();
  const double wb = 1.0 / std::sqrt(static_cast<double>(s.cols));
  const double gb = 0.001 / std::sqrt(static_cast<double>(hidden));
  p.W = uniform(rng, -wb, wb, s);
  p.Gamma = uniform(rng, -gb, gb, s);
  p.Lambda = uniform(rng, 0.0, 1.0, s);
  project_uniform(p);
  return p;
}

struct Normalized {
  Matrix G_hat;
  Matrix F_hat;
  Vector norms;
  std::vector<unsigned char> scaled;
};

// Row-wise L2 normalization of total efficacies G, applying the same divisor
// to the short-term component F. Rows with |G_j| < ε pass through unscaled.
inline Normalized normalize(const Matrix& G, const Matrix& F) {
  require_same(G.shape(), F.shape(), "normalize");
  Normalized out{G, F, Vector(G.rows(), 1.0), std::vector<unsigned char>(G.rows(), 0)};
  for (std::size_t j = 0; j < G.rows(); ++j) {
    const double* g = G.row(j);
    double acc = 0.0;
    for (std::size_t i = 0; i < G.cols(); ++i) acc += g[i] * g[i];
    const double n = std::sqrt(acc);
    if (n < kNormEpsilon) continue;
    out.norms[j] = n;
    out.scaled[j] = 1;
    double* gh = out.G_hat.row(j);
    double* fh = out.F_hat.row(j);
    for (std::size_t i = 0; i < G.cols(); ++i) {
      gh[i] /= n;
      fh[i] /= n;
    }
  }
  return out;
}

// One timestep of the layer. `h_prev` is ignored in the feedforward topology.
inline CellStep step(const StpnParams& p, const SynapticTrace& trace, const Vector& x,
                     const Vector& h_prev, const StepConfig& cfg) {
  if (x.size() != p.input_dim)
    throw Error("stpn step: input length " + std::to_string(x.size()) + " != " +
                std::to_string(p.input_dim));
  require_same(trace.F.shape(), p.shape(), "stpn step (trace)");
  CellStep s;
  if (p.topology == Topology::recurrent) {
    if (h_prev.size() != p.hidden) throw Error("stpn step: h_prev length mismatch");
    s.u = concat(x, h_prev);
  } else {
    s.u = x;
  }
  const Matrix G = add(p.W, trace.F);
  if (cfg.normalize) {
    auto n = normalize(G, trace.F);
    s.G_hat = std::move(n.G_hat);
    s.F_hat = std::move(n.F_hat);
    s.norms = std::move(n.norms);
    s.scaled = std::move(n.scaled);
  } else {
    s.G_hat = G;
    s.F_hat = trace.F;
    s.norms = Vector(p.hidden, 1.0);
    s.scaled.assign(p.hidden, 0);
  }
  s.pre = matvec(s.G_hat, s.u);
  s.h = Vector(p.hidden);
  for (std::size_t j = 0; j < p.hidden; ++j) s.h[j] = activate(cfg.activation, s.pre[j]);

  const std::size_t n_in = s.u.size();
  if (cfg.freeze_trace) {
    s.F_next = trace.F;
  } else {
    s.F_next = Matrix(p.shape());
    const bool one_minus = cfg.retention == RetentionForm::one_minus_lambda;
    for (std::size_t j = 0; j < p.hidden; ++j) {
      const double* gam = p.Gamma.row(j);
      const double* lam = p.Lambda.row(j);
      const double* fh = s.F_hat.row(j);
      double* fn = s.F_next.row(j);
      const double hj = s.h[j];
      for (std::size_t i = 0; i < n_in; ++i) {
        const double r = one_minus ? 1.0 - lam[i] : lam[i];
        fn[i] = gam[i] * (hj * s.u[i]) + r * fh[i];
      }
    }
  }
  if (!all_finite(s.h) || !all_finite(s.F_next))
    throw Error("stpn step: non-finite state at timestep " + std::to_string(trace.t));
  return s;
}

}  // namespace stpn
