#pragma once

// A recurrent core (STPN, RNN or LSTM) followed by a linear readout whose
// logits feed a softmax. All model kinds share this wrapper so training,
// gradient checking, checkpoints and power metering are kind-agnostic.

#include <cstdlib>
#include <limits>
#include <string>
#include <variant>

#include "stpn/baselines.hpp"
#include "stpn/cell.hpp"

namespace stpn {

enum class CoreKind { stpn, rnn, lstm };

inline const char* to_string(CoreKind k) {
  switch (k) {
    case CoreKind::stpn: return "stpn";
    case CoreKind::rnn: return "rnn";
    case CoreKind::lstm: return "lstm";
  }
  return "?";
}

inline CoreKind core_kind_from_string(const std::string& s) {
  if (s == "stpn") return CoreKind::stpn;
  if (s == "rnn") return CoreKind::rnn;
  if (s == "lstm") return CoreKind::lstm;
  throw Error("unknown model kind '" + s + "'");
}

struct ModelSpec {
  CoreKind kind = CoreKind::stpn;
  Topology topology = Topology::recurrent;
  PlasticityMode mode = PlasticityMode::per_synapse;
  std::size_t input_dim = 1;
  std::size_t hidden = 1;
  std::size_t output_dim = 1;
  StepConfig step{};

  friend bool operator==(const ModelSpec& a, const ModelSpec& b) {
    return a.kind == b.kind && a.topology == b.topology && a.mode == b.mode &&
           a.input_dim == b.input_dim && a.hidden == b.hidden && a.output_dim == b.output_dim &&
           a.step.normalize == b.step.normalize && a.step.retention == b.step.retention &&
           a.step.activation == b.step.activation;
  }
};

// Short human-readable label, e.g. "stpn-r-per_synapse".
inline std::string label(const ModelSpec& s) {
  if (s.kind != CoreKind::stpn) return to_string(s.kind);
  return std::string("stpn-") + (s.topology == Topology::recurrent ? "r" : "f") + "-" +
         to_string(s.mode);
}

struct Head {
  Matrix W;  // output_dim x hidden
  Vector b;
  friend bool operator==(const Head&, const Head&) = default;
};

using Core = std::variant<StpnParams, RnnParams, LstmParams>;

struct Model {
  ModelSpec spec;
  Core core;
  Head head;

  StpnParams& stpn() { return std::get<StpnParams>(core); }
  const StpnParams& stpn() const { return std::get<StpnParams>(core); }

  // Visits (name, values, shape) for every stored parameter block in a fixed order.
  template <class F>
  void for_each_block(F&& f) {
    std::visit([&](auto& c) { c.for_each_block(f); }, core);
    f("head.W", head.W.values(), head.W.shape());
    f("head.b", head.b.values(), Shape{head.b.size(), 1});
  }
  template <class F>
  void for_each_block(F&& f) const {
    std::visit([&](const auto& c) { c.for_each_block(f); }, core);
    f("head.W", head.W.values(), head.W.shape());
    f("head.b", head.b.values(), Shape{head.b.size(), 1});
  }

  std::size_t stored_count() const {
    std::size_t n = 0;
    for_each_block([&](std::string_view, std::span<const double> v, Shape) { n += v.size(); });
    return n;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

// Closed-form trainable parameter count. Uniform-mode STPN contributes one
// shared γ and one shared λ instead of full matrices.
inline std::size_t param_count(const ModelSpec& s) {
  const std::size_t head = s.output_dim * s.hidden + s.output_dim;
  const std::size_t n_in = s.input_dim + s.hidden;
  switch (s.kind) {
    case CoreKind::stpn: {
      const std::size_t pre = s.topology == Topology::recurrent ? n_in : s.input_dim;
      const std::size_t n = s.hidden * pre;
      return (s.mode == PlasticityMode::per_synapse ? 3 * n : n + 2) + head;
    }
    case CoreKind::rnn: return s.hidden * n_in + s.hidden + head;
    case CoreKind::lstm: return 4 * (s.hidden * n_in + s.hidden) + head;
  }
  return 0;
}

inline std::size_t trainable_count(const Model& m) {
  const std::size_t core = std::visit([](const auto& c) { return c.trainable_count(); }, m.core);
  return core + m.head.W.size() + m.head.b.size();
}

// Hidden size whose parameter count is closest to `target` (ties go to the
// smaller network). Throws when even h = 1 exceeds the target.
inline std::size_t hidden_size_for_budget(ModelSpec s, std::size_t target,
                                          std::size_t max_hidden = 4096) {
  s.hidden = 1;
  if (param_count(s) > target)
    throw Error("hidden_size_for_budget: budget " + std::to_string(target) +
                " is below the smallest " + label(s) + " (" + std::to_string(param_count(s)) +
                " parameters)");
  std::size_t best = 1;
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  for (std::size_t h = 1; h <= max_hidden; ++h) {
    s.hidden = h;
    const std::size_t n = param_count(s);
    const std::size_t gap = n > target ? n - target : target - n;
    if (gap < best_gap) {
      best_gap = gap;
      best = h;
    }
    if (n > target) break;
  }
  return best;
}

inline Model init_model(Rng& rng, const ModelSpec& spec) {
  if (spec.input_dim == 0 || spec.hidden == 0 || spec.output_dim == 0)
    throw Error("init_model: dimensions must be >= 1");
  Model m;
  m.spec = spec;
  switch (spec.kind) {
    case CoreKind::stpn:
      m.core = init_stpn(rng, spec.input_dim, spec.hidden, spec.topology, spec.mode);
      break;
    case CoreKind::rnn: m.core = init_rnn(rng, spec.input_dim, spec.hidden); break;
    case CoreKind::lstm: m.core = init_lstm(rng, spec.input_dim, spec.hidden); break;
  }
  const double b = 1.0 / std::sqrt(static_cast<double>(spec.hidden));
  m.head.W = uniform(rng, -b, b, {spec.output_dim, spec.hidden});
  m.head.b = Vector(spec.output_dim);
  return m;
}

// Same shapes, all values zero. Used as the gradient accumulator.
inline Model zeros_like(const Model& m) {
  Model z = m;
  z.for_each_block([](std::string_view, std::span<double> v, Shape) {
    for (auto& x : v) x = 0.0;
  });
  return z;
}

// Builds an StpnParams-backed model from explicit matrices (tests and tools).
inline Model make_stpn_model(const ModelSpec& spec, StpnParams p, Head head) {
  Model m;
  m.spec = spec;
  p.mode = spec.mode;
  p.topology = spec.topology;
  p.input_dim = spec.input_dim;
  p.hidden = spec.hidden;
  m.core = std::move(p);
  m.head = std::move(head);
  return m;
}

}  // namespace stpn
