#include <gtest/gtest.h>

#include "stpn/bptt.hpp"

namespace stpn {
namespace {

ModelSpec make_spec(CoreKind kind, Topology topo, PlasticityMode mode, std::size_t d,
                    std::size_t h, std::size_t out) {
  ModelSpec s;
  s.kind = kind;
  s.topology = topo;
  s.mode = mode;
  s.input_dim = d;
  s.hidden = h;
  s.output_dim = out;
  return s;
}

// Random model with plasticity strong enough to matter over a few steps.
Model random_model(Rng& rng, const ModelSpec& spec) {
  Model m = init_model(rng, spec);
  if (spec.kind == CoreKind::stpn) {
    auto& p = m.stpn();
    p.Gamma = uniform(rng, -0.8, 0.8, p.shape());
    p.Lambda = uniform(rng, 0.0, 1.2, p.shape());
    project_uniform(p);
  }
  return m;
}

TaskBatch random_batch(Rng& rng, std::size_t B, std::size_t T, std::size_t d, std::size_t classes) {
  TaskBatch b;
  b.input_dim = d;
  b.num_classes = classes;
  for (std::size_t k = 0; k < B; ++k) {
    Sequence s;
    s.inputs = uniform(rng, -1.0, 1.0, {T, d});
    s.targets.resize(T);
    s.mask.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
      s.targets[t] = static_cast<int>(rng.below(classes));
      s.mask[t] = rng.bernoulli(0.7) || t + 1 == T;
    }
    b.sequences.push_back(std::move(s));
  }
  return b;
}

std::vector<double> flatten(const Model& m) {
  std::vector<double> v;
  m.for_each_block([&](std::string_view, std::span<const double> b, Shape) {
    v.insert(v.end(), b.begin(), b.end());
  });
  return v;
}

TEST(Forward, EmptySequence) {
  Rng rng(0);
  const Model m = init_model(rng, make_spec(CoreKind::stpn, Topology::recurrent,
                                            PlasticityMode::per_synapse, 3, 4, 2));
  const auto tape = forward_sequence(m, Matrix(0, 3), initial_state(m));
  EXPECT_TRUE(tape.steps.empty());
  Gradients g = zeros_like(m);
  backward_sequence(m, tape, {}, g);
  for (double x : flatten(g)) EXPECT_EQ(x, 0.0);
}

TEST(Forward, ReplayIsBitwiseIdentical) {
  Rng rng(1);
  for (auto kind : {CoreKind::stpn, CoreKind::rnn, CoreKind::lstm}) {
    const Model m = random_model(rng, make_spec(kind, Topology::recurrent, PlasticityMode::per_synapse, 3, 5, 4));
    const TaskBatch b = random_batch(rng, 3, 7, 3, 4);
    const Tape t1 = forward_batch(m, b);
    const Tape t2 = forward_batch(m, b);
    for (std::size_t s = 0; s < b.size(); ++s)
      for (std::size_t t = 0; t < 7; ++t) {
        EXPECT_EQ(t1.sequences[s].steps[t].logits, t2.sequences[s].steps[t].logits);
        EXPECT_EQ(hidden_of(t1.sequences[s].steps[t].core), hidden_of(t2.sequences[s].steps[t].core));
      }
  }
}

TEST(Forward, ScalarRecurrenceThroughDriver) {
  ModelSpec spec = make_spec(CoreKind::stpn, Topology::feedforward, PlasticityMode::per_synapse, 1, 1, 1);
  spec.step.normalize = false;
  spec.step.activation = Activation::identity;
  StpnParams p;
  p.W = Matrix{{1.0}};
  p.Gamma = Matrix{{0.5}};
  p.Lambda = Matrix{{0.5}};
  const Model m = make_stpn_model(spec, p, Head{Matrix{{1.0}}, Vector{0.0}});
  const auto tape = forward_sequence(m, Matrix{{1.0}, {1.0}}, initial_state(m));
  ASSERT_EQ(tape.steps.size(), 2u);
  EXPECT_DOUBLE_EQ(tape.steps[0].logits[0], 1.0);
  EXPECT_DOUBLE_EQ(tape.steps[1].logits[0], 1.5);
  EXPECT_DOUBLE_EQ(tape.final_state.F(0, 0), 1.0);
}

TEST(Forward, BatchPermutationPermutesOutputs) {
  Rng rng(6);
  const Model m = random_model(rng, make_spec(CoreKind::stpn, Topology::recurrent, PlasticityMode::per_synapse, 3, 4, 2));
  TaskBatch b = random_batch(rng, 4, 6, 3, 2);
  TaskBatch perm = b;
  const std::vector<std::size_t> order{2, 0, 3, 1};
  for (std::size_t k = 0; k < 4; ++k) perm.sequences[k] = b.sequences[order[k]];
  const Tape ta = forward_batch(m, b);
  const Tape tb = forward_batch(m, perm);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t t = 0; t < 6; ++t)
      EXPECT_EQ(tb.sequences[k].steps[t].logits, ta.sequences[order[k]].steps[t].logits);
}

TEST(Backward, ZeroMaskGivesZeroGradients) {
  Rng rng(2);
  for (auto kind : {CoreKind::stpn, CoreKind::rnn, CoreKind::lstm}) {
    const Model m = random_model(rng, make_spec(kind, Topology::recurrent, PlasticityMode::per_synapse, 3, 4, 3));
    TaskBatch b = random_batch(rng, 2, 5, 3, 3);
    for (auto& s : b.sequences) s.mask.assign(5, 0);
    const Tape tape = forward_batch(m, b);
    const auto loss = batch_loss(tape, b, true);
    const Gradients g = backward_batch(m, tape, loss.dlogits);
    for (double x : flatten(g)) EXPECT_EQ(x, 0.0);
  }
}

TEST(Backward, LengthMismatchThrows) {
  Rng rng(2);
  const Model m = init_model(rng, make_spec(CoreKind::rnn, Topology::recurrent, PlasticityMode::per_synapse, 2, 3, 2));
  const auto tape = forward_sequence(m, Matrix(4, 2), initial_state(m));
  Gradients g = zeros_like(m);
  EXPECT_THROW(backward_sequence(m, tape, std::vector<Vector>(3, Vector(2)), g), Error);
}

// Without plasticity the STPN gradient w.r.t. W must equal the RNN's, computed
// by the separate RNN backward pass.
TEST(Backward, ZeroGammaMatchesRnnBackward) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    ModelSpec ss = make_spec(CoreKind::stpn, Topology::recurrent, PlasticityMode::per_synapse, 4, 5, 3);
    ss.step.normalize = false;
    Model stpn_m = init_model(rng, ss);
    stpn_m.stpn().Gamma.fill(0.0);
    ModelSpec rs = ss;
    rs.kind = CoreKind::rnn;
    Model rnn_m = init_model(rng, rs);
    std::get<RnnParams>(rnn_m.core).W = stpn_m.stpn().W;
    rnn_m.head = stpn_m.head;

    const TaskBatch b = random_batch(rng, 3, 6, 4, 3);
    const Tape ts = forward_batch(stpn_m, b);
    const Tape tr = forward_batch(rnn_m, b);
    const auto ls = batch_loss(ts, b, true);
    const auto lr = batch_loss(tr, b, true);
    EXPECT_NEAR(ls.loss, lr.loss, 1e-12);
    const Gradients gs = backward_batch(stpn_m, ts, ls.dlogits);
    const Gradients gr = backward_batch(rnn_m, tr, lr.dlogits);
    EXPECT_LE(max_abs_diff(gs.stpn().W.values(), std::get<RnnParams>(gr.core).W.values()), 1e-12);
    EXPECT_LE(max_abs_diff(gs.head.W.values(), gr.head.W.values()), 1e-12);
  }
}

TEST(Backward, LinearInLossGradients) {
  Rng rng(4);
  for (auto kind : {CoreKind::stpn, CoreKind::rnn, CoreKind::lstm}) {
    const Model m = random_model(rng, make_spec(kind, Topology::recurrent, PlasticityMode::per_synapse, 3, 4, 2));
    const auto tape = forward_sequence(m, uniform(rng, -1, 1, {5, 3}), initial_state(m));
    std::vector<Vector> g1, g2, g12;
    for (int t = 0; t < 5; ++t) {
      Vector a{rng.uniform(-1, 1), rng.uniform(-1, 1)}, b{rng.uniform(-1, 1), rng.uniform(-1, 1)};
      g12.push_back(add(a, b));
      g1.push_back(std::move(a));
      g2.push_back(std::move(b));
    }
    Gradients r1 = zeros_like(m), r2 = zeros_like(m), r12 = zeros_like(m);
    backward_sequence(m, tape, g1, r1);
    backward_sequence(m, tape, g2, r2);
    backward_sequence(m, tape, g12, r12);
    const auto f1 = flatten(r1), f2 = flatten(r2), f12 = flatten(r12);
    for (std::size_t k = 0; k < f1.size(); ++k) EXPECT_NEAR(f1[k] + f2[k], f12[k], 1e-12);
  }
}

// Squared error on the logits of an identity-activation feedforward model is
// quadratic in any single parameter, so central differences are exact.
TEST(Gradcheck, QuadraticLossIsExact) {
  Rng rng(5);
  ModelSpec spec = make_spec(CoreKind::stpn, Topology::feedforward, PlasticityMode::per_synapse, 4, 3, 2);
  spec.step.normalize = false;
  spec.step.activation = Activation::identity;
  Model m = init_model(rng, spec);
  m.stpn().Gamma.fill(0.0);
  const Matrix x = uniform(rng, -1, 1, {1, 4});
  const Vector y{0.3, -0.2};
  auto loss = [&](const Model& mm) {
    const auto tape = forward_sequence(mm, x, initial_state(mm));
    double l = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
      const double e = tape.steps[0].logits[k] - y[k];
      l += 0.5 * e * e;
    }
    return l;
  };
  const auto tape = forward_sequence(m, x, initial_state(m));
  std::vector<Vector> dl{Vector{tape.steps[0].logits[0] - y[0], tape.steps[0].logits[1] - y[1]}};
  Gradients g = zeros_like(m);
  backward_sequence(m, tape, dl, g);
  const auto report = gradcheck_with(m, g, loss);
  for (const auto& b : report.blocks) {
    if (b.name == "W" || b.name.rfind("head", 0) == 0) {
      EXPECT_LT(b.max_rel, 1e-9) << b.name;
    }
  }
}

TEST(Gradcheck, StpnrWithNormalization) {
  Rng rng(6);
  const Model m = random_model(rng, make_spec(CoreKind::stpn, Topology::recurrent, PlasticityMode::per_synapse, 4, 6, 3));
  const TaskBatch b = random_batch(rng, 2, 5, 4, 3);
  const auto report = gradcheck(m, b);
  EXPECT_LT(report.max_rel, 1e-4) << report.to_json().dump();
  ASSERT_EQ(report.blocks.size(), 5u);
  EXPECT_EQ(report.blocks[1].name, "Gamma");
}

TEST(Gradcheck, Lstm) {
  Rng rng(7);
  const Model m = random_model(rng, make_spec(CoreKind::lstm, Topology::recurrent, PlasticityMode::per_synapse, 4, 6, 3));
  const TaskBatch b = random_batch(rng, 2, 5, 4, 3);
  EXPECT_LT(gradcheck(m, b).max_rel, 1e-4);
}

TEST(Gradcheck, FrozenTraceAndEqThreeForm) {
  Rng rng(8);
  for (bool freeze : {false, true}) {
    ModelSpec spec = make_spec(CoreKind::stpn, Topology::recurrent, PlasticityMode::per_synapse, 3, 4, 2);
    spec.step.retention = RetentionForm::one_minus_lambda;
    spec.step.freeze_trace = freeze;
    Model m = random_model(rng, spec);
    if (freeze) m.stpn().W = uniform(rng, -1, 1, m.stpn().shape());
    const TaskBatch b = random_batch(rng, 2, 4, 3, 2);
    const auto report = gradcheck(m, b);
    EXPECT_LT(report.max_rel, 1e-4) << report.to_json().dump();
  }
}

TEST(Gradcheck, ReportJsonShape) {
  Rng rng(9);
  const Model m = random_model(rng, make_spec(CoreKind::rnn, Topology::recurrent, PlasticityMode::per_synapse, 2, 3, 2));
  const auto j = gradcheck(m, random_batch(rng, 1, 3, 2, 2)).to_json();
  EXPECT_TRUE(j.contains("max_rel_error"));
  ASSERT_EQ(j["blocks"].size(), 4u);
  EXPECT_EQ(j["blocks"][0]["name"], "W");
  EXPECT_TRUE(j["blocks"][0].contains("mean_rel_error"));
}

}  // namespace
}  // namespace stpn
