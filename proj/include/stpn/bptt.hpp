#pragma once

// Backpropagation through time for every core kind. The forward pass records
// a tape with everything the backward pass needs; for the STPN this includes
// the normalized efficacies and per-row divisors, so gradients flow through
// the normalization quotient and through the trace recurrence F -> F'.

#include <algorithm>
#include <cmath>
#include <variant>
#include <vector>

#include "json.hpp"
#include "stpn/model.hpp"
#include "stpn/tasks.hpp"

namespace stpn {

// Recurrent state carried between timesteps (and between truncation windows).
struct RecurrentState {
  Matrix F;  // STPN only
  Vector h;
  Vector c;  // LSTM only
};

inline RecurrentState initial_state(const Model& m) {
  RecurrentState s;
  s.h = Vector(m.spec.hidden);
  if (m.spec.kind == CoreKind::stpn) s.F = Matrix(m.stpn().shape());
  if (m.spec.kind == CoreKind::lstm) s.c = Vector(m.spec.hidden);
  return s;
}

using StepRecord = std::variant<CellStep, RnnStep, LstmStep>;

struct TapeStep {
  StepRecord core;
  Vector logits;
};

struct SequenceTape {
  RecurrentState initial;
  std::vector<TapeStep> steps;
  RecurrentState final_state;
};

struct Tape {
  std::vector<SequenceTape> sequences;
};

inline const Vector& hidden_of(const StepRecord& r) {
  return std::visit([](const auto& s) -> const Vector& { return s.h; }, r);
}

inline Vector readout(const Head& head, const Vector& h) {
  Vector z = matvec(head.W, h);
  for (std::size_t k = 0; k < z.size(); ++k) z[k] += head.b[k];
  return z;
}

// Runs one sequence from `init`. Rows of `inputs` are timesteps.
inline SequenceTape forward_sequence(const Model& m, const Matrix& inputs, RecurrentState init) {
  if (inputs.rows() > 0 && inputs.cols() != m.spec.input_dim)
    throw Error("forward_sequence: input width " + std::to_string(inputs.cols()) +
                " != model input_dim " + std::to_string(m.spec.input_dim));
  SequenceTape tape;
  tape.initial = init;
  tape.steps.reserve(inputs.rows());
  RecurrentState s = std::move(init);
  Vector x(m.spec.input_dim);
  for (std::size_t t = 0; t < inputs.rows(); ++t) {
    std::copy(inputs.row(t), inputs.row(t) + inputs.cols(), x.begin());
    TapeStep rec;
    switch (m.spec.kind) {
      case CoreKind::stpn: {
        SynapticTrace tr{std::move(s.F), t};
        CellStep cs = step(m.stpn(), tr, x, s.h, m.spec.step);
        s.F = cs.F_next;
        s.h = cs.h;
        rec.core = std::move(cs);
        break;
      }
      case CoreKind::rnn: {
        RnnStep rs = rnn_step_cached(std::get<RnnParams>(m.core), x, s.h);
        s.h = rs.h;
        rec.core = std::move(rs);
        break;
      }
      case CoreKind::lstm: {
        LstmStep ls = lstm_step_cached(std::get<LstmParams>(m.core), x, s.h, s.c);
        s.h = ls.h;
        s.c = ls.c;
        rec.core = std::move(ls);
        break;
      }
    }
    rec.logits = readout(m.head, s.h);
    if (!all_finite(rec.logits) || !all_finite(s.h))
      throw Error("forward_sequence: non-finite activation at timestep " + std::to_string(t));
    tape.steps.push_back(std::move(rec));
  }
  tape.final_state = std::move(s);
  return tape;
}

inline Tape forward_batch(const Model& m, const TaskBatch& batch) {
  if (batch.input_dim != 0 && batch.input_dim != m.spec.input_dim)
    throw Error("forward_batch: batch input_dim " + std::to_string(batch.input_dim) +
                " != model input_dim " + std::to_string(m.spec.input_dim));
  Tape tape;
  tape.sequences.reserve(batch.size());
  for (const auto& seq : batch.sequences)
    tape.sequences.push_back(forward_sequence(m, seq.inputs, initial_state(m)));
  return tape;
}

// Masked softmax cross-entropy. Returns summed loss over scored steps and
// writes d(loss)/d(logits) per step, multiplied by `grad_scale`.
struct LossResult {
  double loss_sum = 0.0;
  std::size_t scored = 0;
  std::size_t correct = 0;
};

inline LossResult softmax_cross_entropy(const SequenceTape& tape, const Sequence& seq,
                                        std::size_t offset, double grad_scale,
                                        std::vector<Vector>* dlogits) {
  LossResult r;
  if (dlogits) dlogits->assign(tape.steps.size(), Vector());
  for (std::size_t t = 0; t < tape.steps.size(); ++t) {
    const Vector& z = tape.steps[t].logits;
    if (dlogits) (*dlogits)[t] = Vector(z.size());
    const std::size_t st = offset + t;
    if (!seq.mask[st]) continue;
    const int y = seq.targets[st];
    if (y < 0 || static_cast<std::size_t>(y) >= z.size())
      throw Error("softmax_cross_entropy: target out of range");
    double zmax = z[0];
    std::size_t argmax = 0;
    for (std::size_t k = 1; k < z.size(); ++k)
      if (z[k] > zmax) {
        zmax = z[k];
        argmax = k;
      }
    double denom = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) denom += std::exp(z[k] - zmax);
    const double log_denom = std::log(denom);
    r.loss_sum += -(z[static_cast<std::size_t>(y)] - zmax - log_denom);
    r.scored += 1;
    r.correct += argmax == static_cast<std::size_t>(y) ? 1 : 0;
    if (dlogits) {
      Vector& g = (*dlogits)[t];
      for (std::size_t k = 0; k < z.size(); ++k)
        g[k] = grad_scale * (std::exp(z[k] - zmax - log_denom) - (k == static_cast<std::size_t>(y)));
    }
  }
  return r;
}

struct BatchLoss {
  double loss = 0.0;  // mean over scored steps
  double accuracy = 0.0;
  std::size_t scored = 0;
  std::vector<std::vector<Vector>> dlogits;  // per sequence, per step
};

inline BatchLoss batch_loss(const Tape& tape, const TaskBatch& batch, bool want_grads) {
  std::size_t scored = 0;
  for (const auto& s : batch.sequences)
    for (auto v : s.mask) scored += v;
  BatchLoss out;
  out.scored = scored;
  const double scale = scored ? 1.0 / static_cast<double>(scored) : 0.0;
  std::size_t correct = 0;
  double sum = 0.0;
  if (want_grads) out.dlogits.resize(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto r = softmax_cross_entropy(tape.sequences[b], batch.sequences[b], 0, scale,
                                   want_grads ? &out.dlogits[b] : nullptr);
    sum += r.loss_sum;
    correct += r.correct;
  }
  out.loss = sum * scale;
  out.accuracy = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
  return out;
}

using Gradients = Model;

namespace detail {

inline void backward_stpn(const Model& m, const SequenceTape& tape,
                          const std::vector<Vector>& dlogits, Gradients& g) {
  const StpnParams& p = m.stpn();
  StpnParams& gp = g.stpn();
  const StepConfig& cfg = m.spec.step;
  const bool one_minus = cfg.retention == RetentionForm::one_minus_lambda;
  const bool recurrent = p.topology == Topology::recurrent;
  const std::size_t H = p.hidden;
  const std::size_t n_in = p.presynaptic_dim();
  const std::size_t d = p.input_dim;

  Matrix dF_next(p.shape());        // dL/dF(t+1)
  Matrix dF_prev(p.shape());        // dL/dF(t)
  Vector dh_carry(H);               // dL/dh(t) through the next step's input
  Vector dh(H), da(H), du(n_in);
  Vector dFhat_row(n_in);

  for (std::size_t t = tape.steps.size(); t-- > 0;) {
    const auto& s = std::get<CellStep>(tape.steps[t].core);
    const Vector& dz = dlogits[t];
    for (std::size_t j = 0; j < H; ++j) {
      double acc = dh_carry[j];
      for (std::size_t k = 0; k < dz.size(); ++k) acc += m.head.W(k, j) * dz[k];
      dh[j] = acc;
    }
    for (std::size_t k = 0; k < dz.size(); ++k) {
      g.head.b[k] += dz[k];
      double* gw = g.head.W.row(k);
      for (std::size_t j = 0; j < H; ++j) gw[j] += dz[k] * s.h[j];
    }
    du.fill(0.0);

    // Hebbian term: F' = Γ ⊙ (h uᵀ) + R ⊙ F̂
    if (!cfg.freeze_trace) {
      for (std::size_t j = 0; j < H; ++j) {
        const double* dfn = dF_next.row(j);
        const double* gam = p.Gamma.row(j);
        const double* fh = s.F_hat.row(j);
        double* ggam = gp.Gamma.row(j);
        double* glam = gp.Lambda.row(j);
        const double hj = s.h[j];
        double acc = 0.0;
        for (std::size_t i = 0; i < n_in; ++i) {
          const double gd = gam[i] * dfn[i];
          ggam[i] += dfn[i] * hj * s.u[i];
          glam[i] += one_minus ? -dfn[i] * fh[i] : dfn[i] * fh[i];
          acc += gd * s.u[i];
          du[i] += gd * hj;
        }
        dh[j] += acc;
      }
    }

    for (std::size_t j = 0; j < H; ++j) da[j] = dh[j] * activation_slope(cfg.activation, s.h[j]);

    for (std::size_t j = 0; j < H; ++j) {
      const double* gh = s.G_hat.row(j);
      const double* fh = s.F_hat.row(j);
      const double* dfn = dF_next.row(j);
      const double* lam = p.Lambda.row(j);
      double* gw = gp.W.row(j);
      double* dfp = dF_prev.row(j);
      const double aj = da[j];
      for (std::size_t i = 0; i < n_in; ++i) du[i] += gh[i] * aj;
      const bool frozen = cfg.freeze_trace;
      for (std::size_t i = 0; i < n_in; ++i)
        dFhat_row[i] = frozen ? 0.0 : (one_minus ? 1.0 - lam[i] : lam[i]) * dfn[i];
      // with a frozen trace F(t+1) = F(t), so the next step's gradient passes straight back
      const double pass = frozen ? 1.0 : 0.0;
      if (s.scaled[j]) {
        const double n = s.norms[j];
        const double s1 = aj * s.pre[j];  // Ĝ_j · dĜ_j
        double s2 = 0.0;                  // F̂_j · dF̂_j
        for (std::size_t i = 0; i < n_in; ++i) s2 += fh[i] * dFhat_row[i];
        const double c = s1 + s2;
        for (std::size_t i = 0; i < n_in; ++i) {
          const double dG = (aj * s.u[i] - gh[i] * c) / n;
          gw[i] += dG;
          dfp[i] = dG + dFhat_row[i] / n + pass * dfn[i];
        }
      } else {
        for (std::size_t i = 0; i < n_in; ++i) {
          const double dG = aj * s.u[i];
          gw[i] += dG;
          dfp[i] = dG + dFhat_row[i] + pass * dfn[i];
        }
      }
    }
    std::swap(dF_next, dF_prev);
    if (recurrent)
      for (std::size_t j = 0; j < H; ++j) dh_carry[j] = du[d + j];
  }
}

inline void backward_rnn(const Model& m, const SequenceTape& tape,
                         const std::vector<Vector>& dlogits, Gradients& g) {
  const auto& p = std::get<RnnParams>(m.core);
  auto& gp = std::get<RnnParams>(g.core);
  const std::size_t H = p.hidden;
  const std::size_t n_in = p.input_dim + H;
  Vector dh_carry(H), da(H);
  for (std::size_t t = tape.steps.size(); t-- > 0;) {
    const auto& s = std::get<RnnStep>(tape.steps[t].core);
    const Vector& dz = dlogits[t];
    for (std::size_t k = 0; k < dz.size(); ++k) {
      g.head.b[k] += dz[k];
      double* gw = g.head.W.row(k);
      for (std::size_t j = 0; j < H; ++j) gw[j] += dz[k] * s.h[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
      double acc = dh_carry[j];
      for (std::size_t k = 0; k < dz.size(); ++k) acc += m.head.W(k, j) * dz[k];
      da[j] = acc * (1.0 - s.h[j] * s.h[j]);
    }
    Vector du(n_in);
    for (std::size_t j = 0; j < H; ++j) {
      const double* w = p.W.row(j);
      double* gw = gp.W.row(j);
      gp.bias[j] += da[j];
      for (std::size_t i = 0; i < n_in; ++i) {
        gw[i] += da[j] * s.u[i];
        du[i] += w[i] * da[j];
      }
    }
    for (std::size_t j = 0; j < H; ++j) dh_carry[j] = du[p.input_dim + j];
  }
}

inline void backward_lstm(const Model& m, const SequenceTape& tape,
                          const std::vector<Vector>& dlogits, Gradients& g) {
  const auto& p = std::get<LstmParams>(m.core);
  auto& gp = std::get<LstmParams>(g.core);
  const std::size_t H = p.hidden;
  const std::size_t n_in = p.input_dim + H;
  Vector dh_carry(H), dc_carry(H);
  Vector dai(H), daf(H), dao(H), dag(H);
  for (std::size_t t = tape.steps.size(); t-- > 0;) {
    const auto& s = std::get<LstmStep>(tape.steps[t].core);
    const Vector& dz = dlogits[t];
    for (std::size_t k = 0; k < dz.size(); ++k) {
      g.head.b[k] += dz[k];
      double* gw = g.head.W.row(k);
      for (std::size_t j = 0; j < H; ++j) gw[j] += dz[k] * s.h[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
      double dh = dh_carry[j];
      for (std::size_t k = 0; k < dz.size(); ++k) dh += m.head.W(k, j) * dz[k];
      const double dc = dc_carry[j] + dh * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
      dao[j] = dh * s.tanh_c[j] * s.o[j] * (1.0 - s.o[j]);
      dai[j] = dc * s.g[j] * s.i[j] * (1.0 - s.i[j]);
      daf[j] = dc * s.c_prev[j] * s.f[j] * (1.0 - s.f[j]);
      dag[j] = dc * s.i[j] * (1.0 - s.g[j] * s.g[j]);
      dc_carry[j] = dc * s.f[j];
    }
    Vector du(n_in);
    auto gate = [&](const Matrix& W, Matrix& gW, Vector& gb, const Vector& da) {
      for (std::size_t j = 0; j < H; ++j) {
        const double* w = W.row(j);
        double* gw = gW.row(j);
        gb[j] += da[j];
        for (std::size_t i = 0; i < n_in; ++i) {
          gw[i] += da[j] * s.u[i];
          du[i] += w[i] * da[j];
        }
      }
    };
    gate(p.Wi, gp.Wi, gp.bi, dai);
    gate(p.Wf, gp.Wf, gp.bf, daf);
    gate(p.Wo, gp.Wo, gp.bo, dao);
    gate(p.Wc, gp.Wc, gp.bc, dag);
    for (std::size_t j = 0; j < H; ++j) dh_carry[j] = du[p.input_dim + j];
  }
}

}  // namespace detail

// Accumulates into `grads` the gradient of Σ_t dlogits[t] · logits[t] with
// respect to every parameter. The initial state of the tape is a constant.
inline void backward_sequence(const Model& m, const SequenceTape& tape,
                              const std::vector<Vector>& dlogits, Gradients& grads) {
  if (dlogits.size() != tape.steps.size())
    throw Error("backward_sequence: " + std::to_string(dlogits.size()) + " loss gradients for " +
                std::to_string(tape.steps.size()) + " recorded steps");
  for (std::size_t t = 0; t < dlogits.size(); ++t)
    if (dlogits[t].size() != m.spec.output_dim)
      throw Error("backward_sequence: loss gradient width mismatch at timestep " +
                  std::to_string(t));
  switch (m.spec.kind) {
    case CoreKind::stpn: detail::backward_stpn(m, tape, dlogits, grads); break;
    case CoreKind::rnn: detail::backward_rnn(m, tape, dlogits, grads); break;
    case CoreKind::lstm: detail::backward_lstm(m, tape, dlogits, grads); break;
  }
}

// Sequences are reduced in batch order, so the result does not depend on how
// the work was scheduled.
inline Gradients backward_batch(const Model& m, const Tape& tape,
                                const std::vector<std::vector<Vector>>& dlogits) {
  if (dlogits.size() != tape.sequences.size())
    throw Error("backward_batch: loss gradients for " + std::to_string(dlogits.size()) +
                " sequences, tape has " + std::to_string(tape.sequences.size()));
  Gradients g = zeros_like(m);
  for (std::size_t b = 0; b < tape.sequences.size(); ++b)
    backward_sequence(m, tape.sequences[b], dlogits[b], g);
  return g;
}

inline double mean_loss(const Model& m, const TaskBatch& batch) {
  return batch_loss(forward_batch(m, batch), batch, false).loss;
}

struct BlockCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel = 0.0;
  double mean_rel = 0.0;
};

struct GradcheckReport {
  std::vector<BlockCheck> blocks;
  double max_rel = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["max_rel_error"] = max_rel;
    j["blocks"] = nlohmann::json::array();
    for (const auto& b : blocks)
      j["blocks"].push_back(
          {{"name", b.name}, {"count", b.count}, {"max_rel_error", b.max_rel}, {"mean_rel_error", b.mean_rel}});
    return j;
  }
};

// Central differences at ε = 1e-5 carry roughly 1e-11 of rounding noise, so
// relative error is meaningless for entries far below this floor; under it the
// comparison becomes an absolute one at tolerance × floor.
inline constexpr double kGradcheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
}

// Compares analytic gradients of an arbitrary scalar loss with central
// differences. `loss` maps a model to its loss; `analytic` holds the gradient.
template <class LossFn>
GradcheckReport gradcheck_with(const Model& model, const Gradients& analytic, LossFn&& loss,
                               double epsilon = 1e-5) {
  GradcheckReport report;
  Model probe = model;
  std::vector<std::span<double>> probe_blocks;
  probe.for_each_block(
      [&](std::string_view, std::span<double> v, Shape) { probe_blocks.push_back(v); });
  std::size_t block = 0;
  analytic.for_each_block([&](std::string_view name, std::span<const double> a, Shape) {
    BlockCheck bc;
    bc.name = std::string(name);
    bc.count = a.size();
    double sum = 0.0;
    auto values = probe_blocks[block++];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      values[k] = orig + epsilon;
      const double lp = loss(probe);
      values[k] = orig - epsilon;
      const double lm = loss(probe);
      values[k] = orig;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double rel = relative_error(a[k], numeric);
      bc.max_rel = std::max(bc.max_rel, rel);
      sum += rel;
    }
    bc.mean_rel = bc.count ? sum / static_cast<double>(bc.count) : 0.0;
    report.max_rel = std::max(report.max_rel, bc.max_rel);
    report.blocks.push_back(std::move(bc));
  });
  return report;
}

// Gradient check of the masked mean cross-entropy on `batch`.
inline GradcheckReport gradcheck(const Model& model, const TaskBatch& batch,
                                 double epsilon = 1e-5) {
  const Tape tape = forward_batch(model, batch);
  const BatchLoss bl = batch_loss(tape, batch, true);
  const Gradients g = backward_batch(model, tape, bl.dlogits);
  return gradcheck_with(model, g, [&](const Model& m) { return mean_loss(m, batch); }, epsilon);
}

}  // namespace stpn
