#pragma once

// SGD and Adam over the flat parameter blocks of a Model, with optional
// global-norm clipping. Uniform-plasticity STPNs treat Γ and Λ as one shared
// scalar each and are projected back onto that after every update.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stpn/bptt.hpp"

namespace stpn {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw Error("unknown optimizer '" + s + "'");
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;  // one per parameter block
  std::vector<std::vector<double>> v;
};

inline OptimizerState make_optimizer(OptimizerKind kind, double lr, const Model& model) {
  OptimizerState s;
  s.kind = kind;
  s.lr = lr;
  model.for_each_block([&](std::string_view, std::span<const double> b, Shape) {
    s.m.emplace_back(b.size(), 0.0);
    s.v.emplace_back(b.size(), 0.0);
  });
  return s;
}

inline double global_norm(const Gradients& g) {
  double acc = 0.0;
  g.for_each_block([&](std::string_view, std::span<const double> b, Shape) {
    for (double x : b) acc += x * x;
  });
  return std::sqrt(acc);
}

// Returns the pre-clipping gradient norm.
inline double optimizer_step(OptimizerState& state, Model& params, Gradients grads,
                             std::optional<double> clip_norm = std::nullopt) {
  bool finite = true;
  grads.for_each_block([&](std::string_view, std::span<const double> b, Shape) {
    finite = finite && all_finite(b);
  });
  if (!finite) throw Error("optimizer_step: non-finite gradient");
  // A shared rate receives the sum of its per-synapse gradients. Every entry
  // then sees identical moments, so the block stays exactly uniform.
  if (grads.spec.kind == CoreKind::stpn && grads.spec.mode == PlasticityMode::uniform) {
    for (Matrix* b : {&grads.stpn().Gamma, &grads.stpn().Lambda}) {
      double total = 0.0;
      for (double x : b->values()) total += x;
      b->fill(total);
    }
  }
  const double norm = global_norm(grads);
  if (clip_norm && norm > *clip_norm && norm > 0.0) {
    const double s = *clip_norm / norm;
    grads.for_each_block([&](std::string_view, std::span<double> b, Shape) {
      for (auto& x : b) x *= s;
    });
  }
  std::vector<std::span<const double>> gblocks;
  grads.for_each_block(
      [&](std::string_view, std::span<const double> b, Shape) { gblocks.push_back(b); });
  if (state.m.size() != gblocks.size()) throw Error("optimizer_step: state/parameter mismatch");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::size_t k = 0;
  params.for_each_block([&](std::string_view name, std::span<double> p, Shape) {
    const auto g = gblocks[k];
    if (g.size() != p.size() || state.m[k].size() != p.size())
      throw Error("optimizer_step: shape mismatch in block " + std::string(name));
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (state.kind == OptimizerKind::sgd) {
        p[i] -= state.lr * g[i];
        continue;
      }
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= state.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
    }
    ++k;
  });
  if (params.spec.kind == CoreKind::stpn) project_uniform(params.stpn());
  return norm;
}

}  // namespace stpn
