// Command line front end for training, evaluation and diagnostics.
// Failures print {"error": {...}} on stderr and exit nonzero.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stpn/harness.hpp"

using stpn::Json;

namespace {

int fail(const std::string& kind, const std::string& message, int code = 1) {
  std::cerr << Json{{"error", {{"type", kind}, {"message", message}}}}.dump() << '\n';
  return code;
}

struct Common {
  std::string config;
  std::string out_dir = "runs";
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON experiment config");
  sub->add_option("--seed", c.seed, "run this seed only");
  sub->add_option("--out-dir", c.out_dir, "output directory");
  sub->add_option("--override", c.overrides, "key=value, dotted keys (repeatable)");
}

stpn::ExperimentConfig config_of(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed >= 0) ov.push_back("seeds=[" + std::to_string(c.seed) + "]");
  return stpn::load_config(c.config, ov);
}

void print(const Json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"short-term plasticity networks"};
  app.require_subcommand(1);

  Common train_o, ablate_o, export_o;
  auto* train = app.add_subcommand("train", "train every configured seed");
  add_common(train, train_o);

  auto* ablate = app.add_subcommand("ablate", "six-model comparison at a matched budget");
  add_common(ablate, ablate_o);

  std::string ckpt, eval_out = "eval";
  std::vector<std::string> eval_ov;
  auto* eval = app.add_subcommand("eval", "inference accuracy and power of a checkpoint");
  eval->add_option("--checkpoint", ckpt, "checkpoint JSON")->required();
  eval->add_option("--out-dir", eval_out, "output directory");
  eval->add_option("--override", eval_ov, "key=value applied to the stored config");

  std::vector<std::string> energy_ckpts;
  std::string energy_out = "energy";
  auto* energy = app.add_subcommand("energy", "inference power of one or more checkpoints");
  energy->add_option("--checkpoint", energy_ckpts, "checkpoint JSON (repeatable)")->required();
  energy->add_option("--out-dir", energy_out, "output directory");

  std::int64_t gc_seed = 0;
  std::size_t gc_trials = 20;
  double gc_tol = 1e-4;
  std::string gc_out = ".";
  auto* gradcheck = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--trials", gc_trials, "random configurations per model kind");
  gradcheck->add_option("--tolerance", gc_tol);
  gradcheck->add_option("--out-dir", gc_out);

  std::string dm_ckpt, dm_out = "mechanics";
  std::size_t dm_seq = 0;
  std::vector<std::string> dm_ov;
  auto* dump = app.add_subcommand("dump-mechanics", "efficacy traces of one sequence");
  dump->add_option("--checkpoint", dm_ckpt)->required();
  dump->add_option("--out-dir", dm_out);
  dump->add_option("--sequence", dm_seq, "validation sequence index");
  dump->add_option("--override", dm_ov);

  std::string export_split = "val";
  auto* exp = app.add_subcommand("export-batch", "write a task split as JSONL");
  add_common(exp, export_o);
  exp->add_option("--split", export_split)->check(CLI::IsMember({"train", "val"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    if (*train) {
      const auto r = stpn::train(config_of(train_o), train_o.out_dir);
      print(r.summary);
      return r.summary["aborted"].empty() ? 0 : 3;
    }
    if (*ablate) {
      stpn::ablation_suite(config_of(ablate_o), ablate_o.out_dir);
      std::ifstream is(std::filesystem::path(ablate_o.out_dir) / "ablation.csv");
      std::cout << is.rdbuf();
      return 0;
    }
    if (*eval) {
      const auto r = stpn::evaluate_checkpoint(ckpt, eval_out, eval_ov);
      print({{"val_accuracy", r.accuracy}, {"val_loss", r.loss}, {"power_mean", r.power.mean},
             {"power_std", r.power.stddev}});
      return 0;
    }
    if (*energy) {
      std::filesystem::create_directories(energy_out);
      std::ofstream os(std::filesystem::path(energy_out) / "power.csv");
      Json rows = Json::array();
      bool header = true;
      for (const auto& c : energy_ckpts) {
        const auto run = stpn::load_run(c);
        const auto data = stpn::make_task_data(run.config, run.seed);
        const auto r = stpn::evaluate_batch(run.model, data.val, run.config.power_runs, run.config.eval_chunk);
        r.power.write_csv(os, stpn::label(run.model.spec), run.seed, header);
        header = false;
        rows.push_back({{"checkpoint", c},
                        {"model", stpn::label(run.model.spec)},
                        {"seed", run.seed},
                        {"power_mean", r.power.mean},
                        {"power_std", r.power.stddev}});
      }
      stpn::write_json_file(std::filesystem::path(energy_out) / "energy.json", rows);
      print(rows);
      return 0;
    }
    if (*gradcheck) {
      Json rep = stpn::gradcheck_suite(static_cast<std::uint64_t>(gc_seed), gc_trials);
      rep["tolerance"] = gc_tol;
      rep["passed"] = rep["max_rel_error"].get<double>() < gc_tol;
      std::filesystem::create_directories(gc_out);
      stpn::write_json_file(std::filesystem::path(gc_out) / "gradcheck.json", rep);
      print(rep);
      if (!rep["passed"].get<bool>())
        return fail("gradcheck", "max relative error " + stpn::fmt(rep["max_rel_error"].get<double>()) +
                                     " exceeds " + stpn::fmt(gc_tol));
      return 0;
    }
    if (*dump) {
      stpn::dump_mechanics(dm_ckpt, dm_out, dm_seq, dm_ov);
      return 0;
    }
    if (*exp) {
      const auto cfg = config_of(export_o);
      const auto data = stpn::make_task_data(cfg, cfg.seeds.front());
      std::filesystem::create_directories(export_o.out_dir);
      std::ofstream os(std::filesystem::path(export_o.out_dir) / (export_split + ".jsonl"));
      stpn::write_jsonl(os, export_split == "train" ? data.train : data.val);
      return 0;
    }
  } catch (const stpn::Error& e) {
    return fail("stpn", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
