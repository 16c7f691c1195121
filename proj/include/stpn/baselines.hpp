#pragma once

// Non-plastic recurrent baselines: Elman RNN and LSTM. Both read the
// concatenated presynaptic vector u = [x; h_prev], like the recurrent STPN.

#include <cmath>

#include "stpn/tensor.hpp"

namespace stpn {

struct RnnParams {
  Matrix W;  // h x (d + h)
  Vector bias;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;

  std::size_t trainable_count() const { return W.size() + bias.size(); }

  template <class F>
  void for_each_block(F&& f) {
    f("W", W.values(), W.shape());
    f("bias", bias.values(), Shape{bias.size(), 1});
  }
  template <class F>
  void for_each_block(F&& f) const {
    f("W", W.values(), W.shape());
    f("bias", bias.values(), Shape{bias.size(), 1});
  }
  friend bool operator==(const RnnParams&, const RnnParams&) = default;
};

struct LstmParams {
  // Gate order: input, forget, output, candidate.
  Matrix Wi, Wf, Wo, Wc;
  Vector bi, bf, bo, bc;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;

  std::size_t trainable_count() const { return 4 * (Wi.size() + bi.size()); }

  template <class F>
  void for_each_block(F&& f) {
    f("Wi", Wi.values(), Wi.shape());
    f("Wf", Wf.values(), Wf.shape());
    f("Wo", Wo.values(), Wo.shape());
    f("Wc", Wc.values(), Wc.shape());
    f("bi", bi.values(), Shape{bi.size(), 1});
    f("bf", bf.values(), Shape{bf.size(), 1});
    f("bo", bo.values(), Shape{bo.size(), 1});
    f("bc", bc.values(), Shape{bc.size(), 1});
  }
  template <class F>
  void for_each_block(F&& f) const {
    f("Wi", Wi.values(), Wi.shape());
    f("Wf", Wf.values(), Wf.shape());
    f("Wo", Wo.values(), Wo.shape());
    f("Wc", Wc.values(), Wc.shape());
    f("bi", bi.values(), Shape{bi.size(), 1});
    f("bf", bf.values(), Shape{bf.size(), 1});
    f("bo", bo.values(), Shape{bo.size(), 1});
    f("bc", bc.values(), Shape{bc.size(), 1});
  }
  friend bool operator==(const LstmParams&, const LstmParams&) = default;
};

inline RnnParams init_rnn(Rng& rng, std::size_t input_dim, std::size_t hidden) {
  if (input_dim == 0 || hidden == 0) throw Error("init_rnn: dimensions must be >= 1");
  const double b = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden));
  return {uniform(rng, -b, b, {hidden, input_dim + hidden}), Vector(hidden), input_dim, hidden};
}

// Biases start at zero except the forget gate, which starts at 1.
inline LstmParams init_lstm(Rng& rng, std::size_t input_dim, std::size_t hidden) {
  if (input_dim == 0 || hidden == 0) throw Error("init_lstm: dimensions must be >= 1");
  const double b = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden));
  const Shape s{hidden, input_dim + hidden};
  LstmParams p;
  p.input_dim = input_dim;
  p.hidden = hidden;
  p.Wi = uniform(rng, -b, b, s);
  p.Wf = uniform(rng, -b, b, s);
  p.Wo = uniform(rng, -b, b, s);
  p.Wc = uniform(rng, -b, b, s);
  p.bi = Vector(hidden);
  p.bf = Vector(hidden, 1.0);
  p.bo = Vector(hidden);
  p.bc = Vector(hidden);
  return p;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct RnnStep {
  Vector u;
  Vector h;
};

inline RnnStep rnn_step_cached(const RnnParams& p, const Vector& x, const Vector& h_prev) {
  if (x.size() != p.input_dim || h_prev.size() != p.hidden)
    throw Error("rnn_step: shape mismatch (x " + std::to_string(x.size()) + ", h_prev " +
                std::to_string(h_prev.size()) + ", params " + to_string(p.W.shape()) + ")");
  RnnStep s{concat(x, h_prev), {}};
  s.h = matvec(p.W, s.u);
  for (std::size_t j = 0; j < p.hidden; ++j) s.h[j] = std::tanh(s.h[j] + p.bias[j]);
  return s;
}

inline Vector rnn_step(const RnnParams& p, const Vector& x, const Vector& h_prev) {
  return rnn_step_cached(p, x, h_prev).h;
}

struct LstmStep {
  Vector u;
  Vector i, f, o, g;
  Vector c_prev;
  Vector c;
  Vector tanh_c;
  Vector h;
};

inline LstmStep lstm_step_cached(const LstmParams& p, const Vector& x, const Vector& h_prev,
                                 const Vector& c_prev) {
  if (x.size() != p.input_dim || h_prev.size() != p.hidden || c_prev.size() != p.hidden)
    throw Error("lstm_step: shape mismatch (x " + std::to_string(x.size()) + ", h_prev " +
                std::to_string(h_prev.size()) + ", c_prev " + std::to_string(c_prev.size()) +
                ", params " + to_string(p.Wi.shape()) + ")");
  LstmStep s;
  s.u = concat(x, h_prev);
  s.i = matvec(p.Wi, s.u);
  s.f = matvec(p.Wf, s.u);
  s.o = matvec(p.Wo, s.u);
  s.g = matvec(p.Wc, s.u);
  s.c_prev = c_prev;
  s.c = Vector(p.hidden);
  s.tanh_c = Vector(p.hidden);
  s.h = Vector(p.hidden);
  for (std::size_t j = 0; j < p.hidden; ++j) {
    s.i[j] = sigmoid(s.i[j] + p.bi[j]);
    s.f[j] = sigmoid(s.f[j] + p.bf[j]);
    s.o[j] = sigmoid(s.o[j] + p.bo[j]);
    s.g[j] = std::tanh(s.g[j] + p.bc[j]);
    s.c[j] = s.f[j] * c_prev[j] + s.i[j] * s.g[j];
    s.tanh_c[j] = std::tanh(s.c[j]);
    s.h[j] = s.o[j] * s.tanh_c[j];
  }
  return s;
}

struct LstmState {
  Vector h;
  Vector c;
};

inline LstmState lstm_step(const LstmParams& p, const Vector& x, const Vector& h_prev,
                           const Vector& c_prev) {
  auto s = lstm_step_cached(p, x, h_prev, c_prev);
  return {std::move(s.h), std::move(s.c)};
}

}  // namespace stpn
