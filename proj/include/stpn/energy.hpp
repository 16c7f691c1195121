#pragma once

// Analog crossbar power model: a presynaptic activation x_i applied as a
// voltage across a synapse of conductance |g| dissipates x_i² |g|. Efficacy
// matrices use the library layout (rows postsynaptic, columns presynaptic).

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "stpn/bptt.hpp"

namespace stpn {

inline double layer_power(const Vector& x, const Matrix& g) {
  if (g.cols() != x.size())
    throw Error("power: efficacy " + to_string(g.shape()) + " does not match input of length " +
                std::to_string(x.size()));
  double p = 0.0;
  for (std::size_t j = 0; j < g.rows(); ++j) {
    const double* gr = g.row(j);
    for (std::size_t i = 0; i < g.cols(); ++i) p += x[i] * x[i] * std::abs(gr[i]);
  }
  return p;
}

inline double power_step(const std::vector<Vector>& inputs_per_layer,
                         const std::vector<Matrix>& efficacies_per_layer) {
  if (inputs_per_layer.size() != efficacies_per_layer.size())
    throw Error("power_step: " + std::to_string(inputs_per_layer.size()) + " inputs for " +
                std::to_string(efficacies_per_layer.size()) + " layers");
  double p = 0.0;
  for (std::size_t l = 0; l < inputs_per_layer.size(); ++l)
    p += layer_power(inputs_per_layer[l], efficacies_per_layer[l]);
  return p;
}

struct LayerPower {
  double core = 0.0;
  double head = 0.0;
  double total() const { return core + head; }
};

// Power of one recorded timestep. Biases carry no current and are excluded.
// For the STPN the efficacies are the ones the forward pass actually used.
inline LayerPower step_power(const Model& m, const TapeStep& s) {
  LayerPower lp;
  std::visit(
      [&](const auto& rec) {
        using T = std::decay_t<decltype(rec)>;
        if constexpr (std::is_same_v<T, CellStep>) {
          lp.core = layer_power(rec.u, rec.G_hat);
        } else if constexpr (std::is_same_v<T, RnnStep>) {
          lp.core = layer_power(rec.u, std::get<RnnParams>(m.core).W);
        } else {
          const auto& p = std::get<LstmParams>(m.core);
          lp.core = layer_power(rec.u, p.Wi) + layer_power(rec.u, p.Wf) +
                    layer_power(rec.u, p.Wo) + layer_power(rec.u, p.Wc);
        }
        lp.head = layer_power(rec.h, m.head.W);
      },
      s.core);
  return lp;
}

struct PowerRow {
  std::size_t run = 0;
  std::size_t timestep = 0;
  std::string layer;
  double power = 0.0;
};

struct PowerTrace {
  std::vector<PowerRow> rows;       // per run, timestep and layer (batch mean)
  std::vector<double> run_means;    // mean total power per timestep, per run
  double mean = 0.0;                // across runs
  double stddev = 0.0;              // population std across runs

  void write_csv(std::ostream& os, const std::string& model, std::uint64_t seed,
                 bool header = true) const {
    if (header) os << "model,seed,run,timestep,layer,power\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.17g", r.power);
      os << model << ',' << seed << ',' << r.run << ',' << r.timestep << ',' << r.layer << ','
         << buf << '\n';
    }
  }
};

// Timestep-resolved power of a recorded batch, averaged over its sequences.
inline std::vector<LayerPower> tape_power(const Model& m, const Tape& tape) {
  std::vector<LayerPower> per_t;
  std::vector<std::size_t> count;
  for (const auto& seq : tape.sequences) {
    if (seq.steps.size() > per_t.size()) {
      per_t.resize(seq.steps.size());
      count.resize(seq.steps.size(), 0);
    }
    for (std::size_t t = 0; t < seq.steps.size(); ++t) {
      const LayerPower lp = step_power(m, seq.steps[t]);
      per_t[t].core += lp.core;
      per_t[t].head += lp.head;
      count[t] += 1;
    }
  }
  for (std::size_t t = 0; t < per_t.size(); ++t) {
    per_t[t].core /= static_cast<double>(count[t]);
    per_t[t].head /= static_cast<double>(count[t]);
  }
  return per_t;
}

inline void finalize(PowerTrace& trace) {
  if (trace.run_means.empty()) return;
  double s = 0.0;
  for (double v : trace.run_means) s += v;
  trace.mean = s / static_cast<double>(trace.run_means.size());
  double ss = 0.0;
  for (double v : trace.run_means) ss += (v - trace.mean) * (v - trace.mean);
  trace.stddev = std::sqrt(ss / static_cast<double>(trace.run_means.size()));
}

inline void append_run(PowerTrace& trace, std::size_t run, const std::vector<LayerPower>& per_t) {
  double total = 0.0;
  for (std::size_t t = 0; t < per_t.size(); ++t) {
    trace.rows.push_back({run, t, "core", per_t[t].core});
    trace.rows.push_back({run, t, "head", per_t[t].head});
    total += per_t[t].total();
  }
  trace.run_means.push_back(per_t.empty() ? 0.0 : total / static_cast<double>(per_t.size()));
}

// Inference power over one batch per run: plastic traces evolve, parameters don't.
inline PowerTrace measure_inference(const Model& m, const std::vector<TaskBatch>& batches) {
  PowerTrace trace;
  for (std::size_t r = 0; r < batches.size(); ++r)
    append_run(trace, r, tape_power(m, forward_batch(m, batches[r])));
  finalize(trace);
  return trace;
}

}  // namespace stpn
