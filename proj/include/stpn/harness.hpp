#pragma once

// Experiment driver: configuration, the outer training loop, evaluation,
// ablations and mechanics dumps. Every file written here except timing.csv is
// a function of (config, seed) alone.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "stpn/checkpoint.hpp"
#include "stpn/energy.hpp"
#include "stpn/optim.hpp"
#include "stpn/tasks.hpp"

namespace stpn {

using Json = nlohmann::json;
namespace fs = std::filesystem;

enum class TaskKind { art, familiarity };

inline Json default_config_json() {
  return Json::parse(R"({
    "task": "art",
    "art": {"num_pairs": 8, "query_delay": 0, "train_size": 2000, "val_size": 1000,
            "resample": false},
    "familiarity": {"d": 25, "R": 3, "p": 0.5, "T": 500, "mode": "infinite",
                    "constant_input": true, "val_streams": 5},
    "model": {"kind": "stpn", "topology": "recurrent", "plasticity": "per_synapse",
              "hidden": 0, "normalize": true, "retention": "lambda",
              "activation": "tanh", "freeze_trace": false},
    "budget": {"reference_kind": "rnn", "reference_hidden": 30, "params": 0},
    "optimizer": {"kind": "adam", "lr": 0.001, "schedule": "constant", "clip_norm": 0.0},
    "training": {"epochs": 200, "iterations": 1600, "batch_size": 32,
                 "tbptt_window": 64, "eval_every": 10},
    "eval": {"power_runs": 5, "chunk": 100},
    "seeds": [0, 1, 2, 3, 4]
  })");
}

struct ExperimentConfig {
  Json doc;  // fully merged document, echoed into outputs
  TaskKind task = TaskKind::art;
  ArtConfig art;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  bool resample = false;  // fresh ART training set every epoch
  FamiliarityConfig familiarity;
  std::size_t val_streams = 0;
  ModelSpec model;
  std::size_t hidden = 0;
  CoreKind reference_kind = CoreKind::rnn;
  std::size_t reference_hidden = 0;
  std::size_t param_budget = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 0.0;
  bool linear_decay = false;
  double clip_norm = 0.0;
  std::size_t epochs = 0;
  std::size_t iterations = 0;
  std::size_t batch_size = 0;
  std::size_t tbptt_window = 0;
  std::size_t eval_every = 0;
  std::size_t power_runs = 0;
  std::size_t eval_chunk = 0;
  std::vector<std::uint64_t> seeds;
};

namespace detail {

inline void check_keys(const Json& doc, const Json& ref, const std::string& path) {
  if (!doc.is_object()) return;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw Error("config: unknown key '" + p + "'");
    if (ref[it.key()].is_object()) {
      if (!it.value().is_object()) throw Error("config: '" + p + "' must be an object");
      check_keys(it.value(), ref[it.key()], p);
    }
  }
}

inline Json parse_override_value(const std::string& v) {
  try {
    return Json::parse(v);
  } catch (const Json::exception&) {
    return v;
  }
}

}  // namespace detail

// Applies "a.b.c=value" to a document. The value is read as JSON when it
// parses, otherwise taken as a string.
inline void apply_override(Json& doc, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("override '" + kv + "' is not key=value");
  std::string ptr = "/" + kv.substr(0, eq);
  std::replace(ptr.begin(), ptr.end(), '.', '/');
  doc[Json::json_pointer(ptr)] = detail::parse_override_value(kv.substr(eq + 1));
}

inline ExperimentConfig parse_config(const Json& user, const std::vector<std::string>& overrides = {}) {
  const Json ref = default_config_json();
  Json doc = ref;
  detail::check_keys(user, ref, "");
  doc.merge_patch(user);
  for (const auto& o : overrides) apply_override(doc, o);
  detail::check_keys(doc, ref, "");

  ExperimentConfig c;
  c.doc = doc;
  try {
    const std::string task = doc["task"];
    if (task == "art") c.task = TaskKind::art;
    else if (task == "familiarity") c.task = TaskKind::familiarity;
    else throw Error("config: unknown task '" + task + "'");

    const Json& a = doc["art"];
    c.art.num_pairs = a["num_pairs"];
    c.art.query_delay = a["query_delay"];
    c.train_size = a["train_size"];
    c.val_size = a["val_size"];
    c.resample = a["resample"];

    const Json& f = doc["familiarity"];
    c.familiarity.d = f["d"];
    c.familiarity.R = f["R"];
    c.familiarity.p = f["p"];
    c.familiarity.T = f["T"];
    const std::string mode = f["mode"];
    if (mode == "infinite") c.familiarity.mode = FamiliarityMode::infinite;
    else if (mode == "dataset") c.familiarity.mode = FamiliarityMode::dataset;
    else throw Error("config: unknown familiarity mode '" + mode + "'");
    c.familiarity.constant_input = f["constant_input"];
    c.val_streams = f["val_streams"];

    const Json& m = doc["model"];
    c.model.kind = core_kind_from_string(m["kind"]);
    c.model.topology = topology_from_string(m["topology"]);
    c.model.mode = plasticity_from_string(m["plasticity"]);
    c.hidden = m["hidden"];
    c.model.step.normalize = m["normalize"];
    c.model.step.retention = retention_from_string(m["retention"]);
    c.model.step.activation = activation_from_string(m["activation"]);
    c.model.step.freeze_trace = m["freeze_trace"];

    const Json& b = doc["budget"];
    c.reference_kind = core_kind_from_string(b["reference_kind"]);
    c.reference_hidden = b["reference_hidden"];
    c.param_budget = b["params"];

    const Json& o = doc["optimizer"];
    c.optimizer = optimizer_from_string(o["kind"]);
    c.lr = o["lr"];
    const std::string sched = o["schedule"];
    if (sched == "linear") c.linear_decay = true;
    else if (sched != "constant") throw Error("config: unknown schedule '" + sched + "'");
    c.clip_norm = o["clip_norm"];

    const Json& t = doc["training"];
    c.epochs = t["epochs"];
    c.iterations = t["iterations"];
    c.batch_size = t["batch_size"];
    c.tbptt_window = t["tbptt_window"];
    c.eval_every = t["eval_every"];

    c.power_runs = doc["eval"]["power_runs"];
    c.eval_chunk = doc["eval"]["chunk"];
    c.seeds = doc["seeds"].get<std::vector<std::uint64_t>>();
  } catch (const Json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }

  if (c.model.kind != CoreKind::stpn &&
      (c.model.mode != PlasticityMode::per_synapse || c.model.topology != Topology::recurrent))
    throw Error("config: plasticity mode and topology apply to stpn models only");
  if (c.batch_size == 0) throw Error("config: training.batch_size must be >= 1");
  if (c.eval_every == 0) throw Error("config: training.eval_every must be >= 1");
  if (c.eval_chunk == 0 || c.power_runs == 0) throw Error("config: eval.chunk and eval.power_runs must be >= 1");
  if (!(c.lr > 0.0)) throw Error("config: optimizer.lr must be > 0");
  if (c.task == TaskKind::art) {
    if (c.train_size == 0 || c.val_size == 0) throw Error("config: art sizes must be >= 1");
  } else {
    validate(c.familiarity);
    if (c.val_streams == 0) throw Error("config: familiarity.val_streams must be >= 1");
  }
  if (c.seeds.empty()) throw Error("config: seeds must not be empty");
  return c;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  return parse_config(path.empty() ? Json::object() : read_json_file(path), overrides);
}

inline ModelSpec with_task_dims(ModelSpec s, const ExperimentConfig& c) {
  if (c.task == TaskKind::art) {
    s.input_dim = art::kVocab;
    s.output_dim = art::kDigits;
  } else {
    s.input_dim = familiarity_width(c.familiarity);
    s.output_dim = 2;
  }
  return s;
}

// Parameter count the model is matched to; 0 when the hidden size is fixed.
inline std::size_t budget_target(const ExperimentConfig& c) {
  if (c.hidden > 0) return 0;
  if (c.param_budget > 0) return c.param_budget;
  ModelSpec ref;
  ref.kind = c.reference_kind;
  ref.hidden = c.reference_hidden;
  if (ref.hidden == 0) throw Error("config: budget needs reference_hidden or params");
  return param_count(with_task_dims(ref, c));
}

inline ModelSpec resolve_model(const ExperimentConfig& c) {
  ModelSpec s = with_task_dims(c.model, c);
  s.hidden = c.hidden > 0 ? c.hidden : hidden_size_for_budget(s, budget_target(c));
  return s;
}

struct TaskData {
  TaskBatch train;
  TaskBatch val;
  std::unordered_set<std::string> val_keys;  // ART with resampling
};

// Data streams: split(1) of the seed drives the task generators.
inline TaskData make_task_data(const ExperimentConfig& c, std::uint64_t seed) {
  Rng data = Rng(seed).split(1);
  TaskData d;
  if (c.task == TaskKind::art && c.resample) {
    // validation is fixed; every epoch's training set avoids it
    Rng val_rng = data.split(2);
    d.val = gen_art(val_rng, c.art, c.val_size);
    for (const auto& s : d.val.sequences) d.val_keys.insert(art_key(s));
    return d;
  }
  if (c.task == TaskKind::art) {
    auto [tr, va] = make_art_splits(data, c.art, c.train_size, c.val_size);
    d.train = std::move(tr);
    d.val = std::move(va);
    return d;
  }
  if (c.familiarity.mode == FamiliarityMode::dataset) {
    Rng pool = data.split(3);
    auto [tr, va] = dataset_mode_split(pool, c.familiarity, c.familiarity.T, c.familiarity.T);
    d.train = std::move(tr);
  }
  Rng val_rng = data.split(2);
  d.val = gen_familiarity(val_rng, c.familiarity);
  for (std::size_t k = 1; k < c.val_streams; ++k)
    d.val.sequences.push_back(gen_familiarity(val_rng, c.familiarity).sequences[0]);
  return d;
}

inline TaskBatch subset(const TaskBatch& b, std::size_t begin, std::size_t end) {
  TaskBatch out;
  out.input_dim = b.input_dim;
  out.num_classes = b.num_classes;
  out.meta = b.meta;
  out.sequences.assign(b.sequences.begin() + static_cast<std::ptrdiff_t>(begin),
                       b.sequences.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

inline Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  std::copy(m.row(begin), m.row(begin) + (end - begin) * m.cols(), out.values().begin());
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t scored = 0;
  PowerTrace power;
};

// Inference over a batch: plastic traces evolve, parameters stay fixed.
// Sequences are split into `runs` contiguous groups for power statistics and
// processed `chunk` at a time to bound tape memory.
inline EvalResult evaluate_batch(const Model& m, const TaskBatch& batch, std::size_t runs,
                                 std::size_t chunk) {
  EvalResult r;
  runs = std::max<std::size_t>(1, std::min(runs, batch.size()));
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t run = 0; run < runs; ++run) {
    const std::size_t lo = run * batch.size() / runs, hi = (run + 1) * batch.size() / runs;
    std::vector<LayerPower> sum;
    std::vector<std::size_t> count;
    for (std::size_t a = lo; a < hi; a += chunk) {
      const TaskBatch part = subset(batch, a, std::min(hi, a + chunk));
      const Tape tape = forward_batch(m, part);
      for (std::size_t b = 0; b < part.size(); ++b) {
        const auto lr = softmax_cross_entropy(tape.sequences[b], part.sequences[b], 0, 0.0, nullptr);
        loss_sum += lr.loss_sum;
        correct += lr.correct;
        r.scored += lr.scored;
        const auto& steps = tape.sequences[b].steps;
        if (steps.size() > sum.size()) {
          sum.resize(steps.size());
          count.resize(steps.size(), 0);
        }
        for (std::size_t t = 0; t < steps.size(); ++t) {
          const LayerPower lp = step_power(m, steps[t]);
          sum[t].core += lp.core;
          sum[t].head += lp.head;
          count[t] += 1;
        }
      }
    }
    for (std::size_t t = 0; t < sum.size(); ++t) {
      sum[t].core /= static_cast<double>(count[t]);
      sum[t].head /= static_cast<double>(count[t]);
    }
    append_run(r.power, run, sum);
  }
  finalize(r.power);
  if (r.scored) {
    r.loss = loss_sum / static_cast<double>(r.scored);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.scored);
  }
  return r;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Append-only CSV. Each row goes out as one write followed by a flush, so a
// crash leaves at most one trailing line without its newline.
class CsvLog {
 public:
  CsvLog(const fs::path& path, const std::string& header) : os_(path, std::ios::trunc) {
    if (!os_) throw Error("cannot write " + path.string());
    row(header);
  }
  void row(const std::string& line) {
    const std::string s = line + "\n";
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// Complete rows of a CSV written by CsvLog; a trailing partial row is dropped.
inline std::vector<std::string> read_complete_rows(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string all = ss.str();
  std::vector<std::string> rows;
  std::size_t start = 0;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i] == '\n') {
      rows.push_back(all.substr(start, i - start));
      start = i + 1;
    }
  return rows;
}

inline void write_json_file(const fs::path& path, const Json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw Error("cannot write " + tmp.string());
    os << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

struct TrainHooks {
  // Called after every forward pass used for a parameter update.
  std::function<void(const Model&, const Tape&)> on_batch;
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::size_t last_epoch = 0;
  EvalResult final_eval;
  Model model;
};

struct TrainResult {
  ModelSpec spec;
  std::vector<SeedResult> seeds;
  Json summary;
};

inline Json mean_std(const std::vector<double>& v) {
  if (v.empty()) return {{"mean", nullptr}, {"std", nullptr}};
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {{"mean", mean}, {"std", std::sqrt(ss / static_cast<double>(v.size()))}};
}

namespace detail {

inline void shuffle(Rng& rng, std::vector<std::size_t>& idx) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

inline double scheduled_lr(const ExperimentConfig& c, std::size_t step, std::size_t total) {
  if (!c.linear_decay || total == 0) return c.lr;
  return c.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

inline void update(const ExperimentConfig& c, OptimizerState& opt, Model& m, const Gradients& g,
                   std::size_t step, std::size_t total) {
  opt.lr = scheduled_lr(c, step, total);
  optimizer_step(opt, m, g, c.clip_norm > 0.0 ? std::optional<double>(c.clip_norm) : std::nullopt);
}

inline void require_finite_loss(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) throw Error("non-finite loss at epoch " + std::to_string(epoch));
}

// One pass over a familiarity stream in truncated windows, one update per window.
inline LossResult familiarity_iteration(const ExperimentConfig& c, Model& m, OptimizerState& opt,
                                        const Sequence& seq, const TrainHooks& hooks,
                                        std::size_t& step, std::size_t total) {
  const std::size_t T = seq.length();
  const std::size_t w = c.tbptt_window == 0 || T <= 64 ? T : c.tbptt_window;
  LossResult acc;
  RecurrentState state = initial_state(m);
  for (std::size_t a = 0; a < T; a += w) {
    const std::size_t b = std::min(T, a + w);
    SequenceTape tape = forward_sequence(m, slice_rows(seq.inputs, a, b), state);
    state = tape.final_state;
    std::size_t scored = 0;
    for (std::size_t t = a; t < b; ++t) scored += seq.mask[t];
    std::vector<Vector> dl;
    const auto r = softmax_cross_entropy(tape, seq, a, scored ? 1.0 / static_cast<double>(scored) : 0.0, &dl);
    acc.loss_sum += r.loss_sum;
    acc.scored += r.scored;
    acc.correct += r.correct;
    if (hooks.on_batch) {
      Tape one;
      one.sequences.push_back(tape);
      hooks.on_batch(m, one);
    }
    Gradients g = zeros_like(m);
    backward_sequence(m, tape, dl, g);
    update(c, opt, m, g, step++, total);
  }
  return acc;
}

}  // namespace detail

// Trains every seed of `c`, writing metrics.csv, timing.csv, power.csv,
// checkpoint_seed<k>.json and summary.json into `out_dir`.
inline TrainResult train(const ExperimentConfig& c, const fs::path& out_dir, const TrainHooks& hooks = {}) {
  fs::create_directories(out_dir);
  TrainResult result;
  result.spec = resolve_model(c);
  const ModelSpec& spec = result.spec;
  const std::string name = label(spec);
  CsvLog metrics(out_dir / "metrics.csv", "seed,epoch,split,loss,accuracy,mean_power");
  CsvLog timing(out_dir / "timing.csv", "seed,epoch,wall_seconds");
  std::ofstream power_os(out_dir / "power.csv");
  bool power_header = true;
  const bool is_art = c.task == TaskKind::art;

  for (std::uint64_t seed : c.seeds) {
    SeedResult sr;
    sr.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng = Rng(seed).split(2);
    Rng order_rng = Rng(seed).split(3);
    sr.model = init_model(init_rng, spec);
    Model& m = sr.model;
    const fs::path ckpt = out_dir / ("checkpoint_seed" + std::to_string(seed) + ".json");
    auto save = [&](std::size_t epoch) {
      save_checkpoint(ckpt.string(), m, {{"seed", seed}, {"epoch", epoch}, {"config", c.doc}});
    };
    try {
      TaskData data = make_task_data(c, seed);
      Rng art_stream = Rng(seed).split(1).split(1);
      const std::size_t train_n = is_art ? c.train_size : 0;
      OptimizerState opt = make_optimizer(c.optimizer, c.lr, m);
      save(0);
      const std::size_t epochs = is_art ? c.epochs : c.iterations;
      const std::size_t per_epoch =
          is_art ? (train_n + c.batch_size - 1) / c.batch_size
                 : (c.familiarity.T + c.tbptt_window - 1) / std::max<std::size_t>(1, c.tbptt_window);
      const std::size_t total = epochs * per_epoch;
      std::size_t step = 0;
      std::vector<std::size_t> order(train_n);
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng stream = Rng(seed).split(1).split(1);

      for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t scored = 0, correct = 0;
        if (is_art) {
          if (c.resample) data.train = gen_art_excluding(art_stream, c.art, c.train_size, data.val_keys);
          detail::shuffle(order_rng, order);
          for (std::size_t a = 0; a < order.size(); a += c.batch_size) {
            TaskBatch mb;
            mb.input_dim = data.train.input_dim;
            mb.num_classes = data.train.num_classes;
            for (std::size_t k = a; k < std::min(order.size(), a + c.batch_size); ++k)
              mb.sequences.push_back(data.train.sequences[order[k]]);
            const Tape tape = forward_batch(m, mb);
            if (hooks.on_batch) hooks.on_batch(m, tape);
            const BatchLoss bl = batch_loss(tape, mb, true);
            detail::require_finite_loss(bl.loss, epoch);
            loss_sum += bl.loss * static_cast<double>(bl.scored);
            scored += bl.scored;
            correct += static_cast<std::size_t>(std::llround(bl.accuracy * static_cast<double>(bl.scored)));
            detail::update(c, opt, m, backward_batch(m, tape, bl.dlogits), step++, total);
          }
        } else {
          const Sequence seq = c.familiarity.mode == FamiliarityMode::dataset
                                   ? data.train.sequences[0]
                                   : gen_familiarity_sequence(stream, c.familiarity, c.familiarity.T);
          const auto r = detail::familiarity_iteration(c, m, opt, seq, hooks, step, total);
          detail::require_finite_loss(r.loss_sum, epoch);
          loss_sum = r.loss_sum;
          scored = r.scored;
          correct = r.correct;
        }
        const double tl = scored ? loss_sum / static_cast<double>(scored) : 0.0;
        const double ta = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
        metrics.row(std::to_string(seed) + "," + std::to_string(epoch) + ",train," + fmt(tl) + "," +
                    fmt(ta) + ",");
        sr.last_epoch = epoch;
        if (epoch % c.eval_every == 0 || epoch == epochs) {
          sr.final_eval = evaluate_batch(m, data.val, c.power_runs, c.eval_chunk);
          metrics.row(std::to_string(seed) + "," + std::to_string(epoch) + ",val," +
                      fmt(sr.final_eval.loss) + "," + fmt(sr.final_eval.accuracy) + "," +
                      fmt(sr.final_eval.power.mean));
          save(epoch);
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          timing.row(std::to_string(seed) + "," + std::to_string(epoch) + "," + fmt(secs));
        }
      }
      if (epochs > 0) {
        sr.final_eval.power.write_csv(power_os, name, seed, power_header);
        power_header = false;
      }
    } catch (const Error& e) {
      sr.ok = false;
      sr.error = e.what();
    }
    result.seeds.push_back(std::move(sr));
  }
  if (power_header) power_os << "model,seed,run,timestep,layer,power\n";

  const std::size_t n = param_count(spec);
  const std::size_t target = budget_target(c);
  Json s;
  s["model"] = name;
  s["spec"] = spec_to_json(spec);
  s["param_count"] = n;
  s["budget_target"] = target > 0 ? Json(target) : Json(nullptr);
  s["budget_gap"] = target > 0 ? Json((static_cast<double>(n) - static_cast<double>(target)) /
                                      static_cast<double>(target))
                               : Json(nullptr);
  s["seeds"] = Json::array();
  s["aborted"] = Json::array();
  std::vector<double> acc, loss, power;
  for (const auto& sr : result.seeds) {
    if (!sr.ok) {
      s["aborted"].push_back({{"seed", sr.seed}, {"epoch", sr.last_epoch + 1}, {"error", sr.error}});
      continue;
    }
    s["seeds"].push_back({{"seed", sr.seed},
                          {"epoch", sr.last_epoch},
                          {"val_loss", sr.final_eval.loss},
                          {"val_accuracy", sr.final_eval.accuracy},
                          {"power_mean", sr.final_eval.power.mean},
                          {"power_std", sr.final_eval.power.stddev}});
    if (sr.last_epoch > 0) {
      acc.push_back(sr.final_eval.accuracy);
      loss.push_back(sr.final_eval.loss);
      power.push_back(sr.final_eval.power.mean);
    }
  }
  s["val_accuracy"] = mean_std(acc);
  s["val_loss"] = mean_std(loss);
  s["power"] = mean_std(power);
  s["config"] = c.doc;
  write_json_file(out_dir / "summary.json", s);
  result.summary = s;
  return result;
}

struct LoadedRun {
  Model model;
  ExperimentConfig config;
  std::uint64_t seed = 0;
};

inline LoadedRun load_run(const std::string& checkpoint, const std::vector<std::string>& overrides = {}) {
  const Json j = read_json_file(checkpoint);
  LoadedRun r{model_from_json(j), {}, 0};
  if (!j.contains("run")) throw Error("checkpoint " + checkpoint + " has no run record");
  r.config = parse_config(j["run"].at("config"), overrides);
  r.seed = j["run"].at("seed").get<std::uint64_t>();
  ModelSpec expect = resolve_model(r.config);
  if (!(expect == r.model.spec))
    throw Error("checkpoint/model mismatch: config describes " + label(expect) + " h=" +
                std::to_string(expect.hidden) + ", checkpoint holds " + label(r.model.spec) +
                " h=" + std::to_string(r.model.spec.hidden));
  r.model.spec.step.freeze_trace = r.config.model.step.freeze_trace;
  return r;
}

// Re-creates the validation data of the checkpoint's run and measures it.
inline EvalResult evaluate_checkpoint(const std::string& checkpoint, const fs::path& out_dir,
                                      const std::vector<std::string>& overrides = {}) {
  const LoadedRun run = load_run(checkpoint, overrides);
  const TaskData data = make_task_data(run.config, run.seed);
  EvalResult r = evaluate_batch(run.model, data.val, run.config.power_runs, run.config.eval_chunk);
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "power.csv");
    r.power.write_csv(os, label(run.model.spec), run.seed);
  }
  write_json_file(out_dir / "eval.json", {{"model", label(run.model.spec)},
                                          {"seed", run.seed},
                                          {"val_loss", r.loss},
                                          {"val_accuracy", r.accuracy},
                                          {"scored", r.scored},
                                          {"power_mean", r.power.mean},
                                          {"power_std", r.power.stddev},
                                          {"freeze_trace", run.model.spec.step.freeze_trace}});
  return r;
}

struct AblationVariant {
  CoreKind kind;
  Topology topology;
  PlasticityMode mode;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{CoreKind::stpn, Topology::recurrent, PlasticityMode::per_synapse},
          {CoreKind::stpn, Topology::recurrent, PlasticityMode::uniform},
          {CoreKind::stpn, Topology::feedforward, PlasticityMode::per_synapse},
          {CoreKind::stpn, Topology::feedforward, PlasticityMode::uniform},
          {CoreKind::rnn, Topology::recurrent, PlasticityMode::per_synapse},
          {CoreKind::lstm, Topology::recurrent, PlasticityMode::per_synapse}};
}

inline ExperimentConfig variant_config(const ExperimentConfig& base, const AblationVariant& v,
                                       std::size_t target) {
  Json doc = base.doc;
  doc["model"]["kind"] = to_string(v.kind);
  doc["model"]["topology"] = to_string(v.topology);
  doc["model"]["plasticity"] = to_string(v.mode);
  doc["model"]["hidden"] = 0;
  doc["budget"]["params"] = target;
  return parse_config(doc);
}

// Trains the six comparison models at one parameter budget and writes
// ablation.csv with one row per model.
inline std::vector<TrainResult> ablation_suite(const ExperimentConfig& base, const fs::path& out_dir) {
  const std::size_t target = base.hidden > 0 ? param_count(resolve_model(base)) : budget_target(base);
  fs::create_directories(out_dir);
  CsvLog table(out_dir / "ablation.csv",
               "model,hidden,param_count,budget_gap,seeds_ok,accuracy_mean,accuracy_std,loss_mean,"
               "power_mean,power_std");
  std::vector<TrainResult> out;
  for (const auto& v : ablation_variants()) {
    const ExperimentConfig c = variant_config(base, v, target);
    TrainResult r = train(c, out_dir / label(resolve_model(c)));
    const Json& s = r.summary;
    auto num = [](const Json& j) { return j.is_null() ? std::string("nan") : fmt(j.get<double>()); };
    table.row(s["model"].get<std::string>() + "," + std::to_string(r.spec.hidden) + "," +
              std::to_string(s["param_count"].get<std::size_t>()) + "," + num(s["budget_gap"]) + "," +
              std::to_string(s["seeds"].size()) + "," + num(s["val_accuracy"]["mean"]) + "," +
              num(s["val_accuracy"]["std"]) + "," + num(s["val_loss"]["mean"]) + "," +
              num(s["power"]["mean"]) + "," + num(s["power"]["std"]));
    out.push_back(std::move(r));
  }
  return out;
}

// Efficacy evolution of one validation sequence plus the learned (γ, λ).
inline void dump_mechanics(const std::string& checkpoint, const fs::path& out_dir,
                           std::size_t sequence_index = 0,
                           const std::vector<std::string>& overrides = {}) {
  const LoadedRun run = load_run(checkpoint, overrides);
  if (run.model.spec.kind != CoreKind::stpn)
    throw Error("dump-mechanics needs an stpn checkpoint, got " + label(run.model.spec));
  const TaskData data = make_task_data(run.config, run.seed);
  if (sequence_index >= data.val.size())
    throw Error("dump-mechanics: sequence index " + std::to_string(sequence_index) + " out of range");
  const Sequence& seq = data.val.sequences[sequence_index];
  const StpnParams& p = run.model.stpn();
  const SequenceTape tape = forward_sequence(run.model, seq.inputs, initial_state(run.model));
  fs::create_directories(out_dir);
  CsvLog ev(out_dir / "trace_efficacy.csv", "timestep,neuron,synapse,G,G_hat");
  Matrix F(p.shape());
  for (std::size_t t = 0; t < tape.steps.size(); ++t) {
    const auto& cs = std::get<CellStep>(tape.steps[t].core);
    std::string block;
    for (std::size_t j = 0; j < p.hidden; ++j)
      for (std::size_t i = 0; i < p.presynaptic_dim(); ++i)
        block += std::to_string(t) + "," + std::to_string(j) + "," + std::to_string(i) + "," +
                 fmt(p.W(j, i) + F(j, i)) + "," + fmt(cs.G_hat(j, i)) + "\n";
    block.pop_back();
    ev.row(block);
    F = cs.F_next;
  }
  CsvLog sc(out_dir / "trace_params.csv", "neuron,synapse,gamma,lambda");
  for (std::size_t j = 0; j < p.hidden; ++j)
    for (std::size_t i = 0; i < p.presynaptic_dim(); ++i)
      sc.row(std::to_string(j) + "," + std::to_string(i) + "," + fmt(p.Gamma(j, i)) + "," +
             fmt(p.Lambda(j, i)));
}

struct GradcheckKind {
  ModelSpec spec;  // dimensions are drawn per trial
  std::string name;
};

// Every STPN variant (topology x plasticity x retention x normalization) plus RNN and LSTM.
inline std::vector<GradcheckKind> gradcheck_kinds() {
  std::vector<GradcheckKind> v;
  for (auto topo : {Topology::feedforward, Topology::recurrent})
    for (auto mode : {PlasticityMode::per_synapse, PlasticityMode::uniform})
      for (auto ret : {RetentionForm::lambda, RetentionForm::one_minus_lambda})
        for (bool norm : {true, false}) {
          ModelSpec s;
          s.kind = CoreKind::stpn;
          s.topology = topo;
          s.mode = mode;
          s.step.retention = ret;
          s.step.normalize = norm;
          v.push_back({s, label(s) + "-" + to_string(ret) + (norm ? "-norm" : "-raw")});
        }
  ModelSpec r;
  r.kind = CoreKind::rnn;
  v.push_back({r, "rnn"});
  ModelSpec l;
  l.kind = CoreKind::lstm;
  v.push_back({l, "lstm"});
  return v;
}

// Random small model and batch: d <= 6, h <= 8, T <= 6. Plasticity rates are
// drawn large enough that the trace actually shapes the output.
inline std::pair<Model, TaskBatch> gradcheck_instance(Rng& rng, ModelSpec s) {
  s.input_dim = 1 + rng.below(6);
  s.hidden = 1 + rng.below(8);
  s.output_dim = 2 + rng.below(3);
  Model m = init_model(rng, s);
  if (s.kind == CoreKind::stpn) {
    StpnParams& p = m.stpn();
    p.Gamma = uniform(rng, -0.8, 0.8, p.shape());
    p.Lambda = uniform(rng, 0.0, 1.0, p.shape());
    if (s.mode == PlasticityMode::uniform) {
      p.Gamma.fill(p.Gamma(0, 0));
      p.Lambda.fill(p.Lambda(0, 0));
    }
  }
  TaskBatch b;
  b.input_dim = s.input_dim;
  b.num_classes = s.output_dim;
  for (int k = 0; k < 2; ++k) {
    const std::size_t T = 1 + rng.below(6);
    Sequence seq;
    seq.inputs = uniform(rng, -1.0, 1.0, {T, s.input_dim});
    seq.targets.resize(T);
    seq.mask.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
      seq.targets[t] = static_cast<int>(rng.below(s.output_dim));
      seq.mask[t] = rng.bernoulli(0.7) ? 1 : 0;
    }
    seq.mask[T - 1] = 1;
    b.sequences.push_back(std::move(seq));
  }
  return {std::move(m), std::move(b)};
}

inline Json gradcheck_suite(std::uint64_t seed, std::size_t trials, double epsilon = 1e-5) {
  Json out;
  out["epsilon"] = epsilon;
  out["trials_per_kind"] = trials;
  out["kinds"] = Json::array();
  double worst = 0.0;
  Rng root(seed);
  std::size_t k = 0;
  for (const auto& kind : gradcheck_kinds()) {
    Rng rng = root.split(++k);
    double kmax = 0.0;
    Json blocks = Json::object();
    for (std::size_t t = 0; t < trials; ++t) {
      auto [m, b] = gradcheck_instance(rng, kind.spec);
      const GradcheckReport rep = gradcheck(m, b, epsilon);
      kmax = std::max(kmax, rep.max_rel);
      for (const auto& bc : rep.blocks) {
        auto& slot = blocks[bc.name];
        if (slot.is_null()) slot = {{"max_rel_error", 0.0}, {"mean_rel_error", 0.0}, {"count", 0}};
        slot["max_rel_error"] = std::max(slot["max_rel_error"].get<double>(), bc.max_rel);
        slot["mean_rel_error"] = slot["mean_rel_error"].get<double>() + bc.mean_rel / static_cast<double>(trials);
        slot["count"] = slot["count"].get<std::size_t>() + bc.count;
      }
    }
    worst = std::max(worst, kmax);
    out["kinds"].push_back({{"name", kind.name}, {"max_rel_error", kmax}, {"blocks", blocks}});
  }
  out["max_rel_error"] = worst;
  return out;
}

}  // namespace stpn
