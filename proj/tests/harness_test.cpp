#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "stpn/harness.hpp"

namespace stpn {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stpn_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_art(std::vector<std::string> extra = {}) {
  std::vector<std::string> ov{"art.num_pairs=2",      "art.train_size=24", "art.val_size=10",
                              "model.hidden=4",       "training.epochs=3", "training.batch_size=8",
                              "training.eval_every=2", "seeds=[0,1]",      "eval.power_runs=2"};
  ov.insert(ov.end(), extra.begin(), extra.end());
  return parse_config(Json::object(), ov);
}

TEST(Config, DefaultsOverridesAndErrors) {
  const auto c = parse_config(Json::object());
  EXPECT_EQ(c.art.num_pairs, 8u);
  EXPECT_EQ(c.seeds.size(), 5u);
  EXPECT_EQ(resolve_model(c).hidden, hidden_size_for_budget(with_task_dims(c.model, c), budget_target(c)));
  const auto o = parse_config({{"task", "familiarity"}}, {"familiarity.R=6", "optimizer.lr=0.01", "model.kind=lstm"});
  EXPECT_EQ(o.task, TaskKind::familiarity);
  EXPECT_EQ(o.familiarity.R, 6u);
  EXPECT_EQ(o.lr, 0.01);
  EXPECT_EQ(o.model.kind, CoreKind::lstm);
  EXPECT_THROW(parse_config({{"nonsense", 1}}), Error);
  EXPECT_THROW(parse_config(Json::object(), {"model.width=3"}), Error);
  EXPECT_THROW(parse_config(Json::object(), {"training.epochs=\"many\""}), Error);
  EXPECT_THROW(parse_config(Json::object(), {"model.kind=rnn", "model.plasticity=uniform"}), Error);
  EXPECT_THROW(parse_config(Json::object(), {"noequals"}), Error);
}

TEST(Config, BudgetMatchingReportsGap) {
  const auto c = parse_config(Json::object(), {"model.kind=lstm"});
  const ModelSpec s = resolve_model(c);
  const double target = static_cast<double>(budget_target(c));
  EXPECT_EQ(budget_target(c), 30u * 68u + 30u + 10u * 30u + 10u);
  const double gap = std::abs(static_cast<double>(param_count(s)) - target) / target;
  ModelSpec other = s;
  other.hidden = s.hidden + 1;
  EXPECT_LE(gap, std::abs(static_cast<double>(param_count(other)) - target) / target);
}

TEST(Train, ZeroEpochsGivesInitialCheckpointAndEmptyMetrics) {
  const auto dir = scratch("zero");
  train(tiny_art({"training.epochs=0"}), dir);
  EXPECT_EQ(read_complete_rows(dir / "metrics.csv").size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint_seed0.json"));
  EXPECT_EQ(read_json_file((dir / "checkpoint_seed0.json").string())["run"]["epoch"], 0);
}

TEST(Train, DeterministicOutputs) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  train(tiny_art(), a);
  train(tiny_art(), b);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
  EXPECT_EQ(slurp(a / "power.csv"), slurp(b / "power.csv"));
  EXPECT_EQ(slurp(a / "checkpoint_seed1.json"), slurp(b / "checkpoint_seed1.json"));
  // 3 train rows and val rows at epochs 2 and 3 per seed
  EXPECT_EQ(read_complete_rows(a / "metrics.csv").size(), 1u + 2u * 5u);
}

TEST(Train, EvaluateReproducesFinalValidation) {
  const auto dir = scratch("eval");
  const auto r = train(tiny_art(), dir);
  const auto e = evaluate_checkpoint((dir / "checkpoint_seed1.json").string(), dir / "eval");
  EXPECT_NEAR(e.accuracy, r.seeds[1].final_eval.accuracy, 1e-9);
  EXPECT_NEAR(e.loss, r.seeds[1].final_eval.loss, 1e-9);
  EXPECT_EQ(e.power.mean, r.seeds[1].final_eval.power.mean);
  EXPECT_TRUE(fs::exists(dir / "eval" / "power.csv"));
  EXPECT_EQ(read_complete_rows(dir / "eval" / "power.csv")[0], "model,seed,run,timestep,layer,power");
  EXPECT_THROW(evaluate_checkpoint((dir / "checkpoint_seed1.json").string(), dir / "e2", {"model.hidden=5"}), Error);
}

TEST(Train, UntrainedStpnOnArtIsAtChance) {
  const auto dir = scratch("chance");
  train(parse_config(Json::object(), {"training.epochs=0", "seeds=[3]", "art.val_size=4000", "art.train_size=10"}), dir);
  const auto e = evaluate_checkpoint((dir / "checkpoint_seed3.json").string(), dir / "eval");
  EXPECT_NEAR(e.accuracy, 0.1, 0.05);
}

TEST(Train, FamiliarityRunsInWindows) {
  const auto dir = scratch("fam");
  const auto c = parse_config({{"task", "familiarity"}},
                              {"familiarity.T=150", "familiarity.val_streams=2", "model.hidden=3",
                               "training.iterations=2", "training.eval_every=1", "seeds=[0]"});
  std::size_t windows = 0;
  TrainHooks hooks;
  hooks.on_batch = [&](const Model&, const Tape& t) {
    ++windows;
    EXPECT_LE(t.sequences[0].steps.size(), 64u);
  };
  const auto r = train(c, dir, hooks);
  EXPECT_EQ(windows, 2u * 3u);
  EXPECT_TRUE(r.seeds[0].ok);
  EXPECT_EQ(r.seeds[0].final_eval.scored, 300u);
}

TEST(Train, FailingSeedIsAbortedAndOthersContinue) {
  const auto dir = scratch("abort");
  TrainHooks hooks;
  int calls = 0;
  hooks.on_batch = [&](const Model&, const Tape&) {
    if (++calls == 2) throw Error("non-finite activation at timestep 3");
  };
  const auto r = train(tiny_art(), dir, hooks);
  EXPECT_FALSE(r.seeds[0].ok);
  EXPECT_TRUE(r.seeds[1].ok);
  EXPECT_EQ(r.summary["aborted"].size(), 1u);
  EXPECT_EQ(r.summary["seeds"].size(), 1u);
}

TEST(Csv, PartialTrailingRowIsIgnored) {
  const auto dir = scratch("csv");
  fs::create_directories(dir);
  {
    CsvLog log(dir / "m.csv", "a,b");
    log.row("1,2");
  }
  std::ofstream(dir / "m.csv", std::ios::app) << "3,";
  EXPECT_EQ(read_complete_rows(dir / "m.csv"), (std::vector<std::string>{"a,b", "1,2"}));
}

TEST(Ablation, SixModelRows) {
  const auto dir = scratch("ablate");
  ablation_suite(tiny_art({"model.hidden=0", "budget.reference_hidden=4", "training.epochs=1", "seeds=[0]"}), dir);
  const auto rows = read_complete_rows(dir / "ablation.csv");
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[1].substr(0, 19), "stpn-r-per_synapse,");
  EXPECT_EQ(rows[6].substr(0, 5), "lstm,");
}

TEST(Mechanics, TraceShapesAndFrozenPlasticity) {
  const auto dir = scratch("mech");
  train(tiny_art({"training.epochs=1", "seeds=[0]"}), dir);
  const std::string ck = (dir / "checkpoint_seed0.json").string();
  dump_mechanics(ck, dir / "m");
  const std::size_t h = 4, n = 38 + 4, T = 7;
  EXPECT_EQ(read_complete_rows(dir / "m" / "trace_efficacy.csv").size(), 1 + T * h * n);
  EXPECT_EQ(read_complete_rows(dir / "m" / "trace_params.csv").size(), 1 + h * n);

  // with Γ = 0 the efficacies never move
  Json j = read_json_file(ck);
  for (auto& b : j["blocks"])
    if (b["name"] == "Gamma")
      for (auto& v : b["values"]) v = 0.0;
  const std::string zero = (dir / "gamma0.json").string();
  std::ofstream(zero) << j.dump();
  dump_mechanics(zero, dir / "z");
  const auto rows = read_complete_rows(dir / "z" / "trace_efficacy.csv");
  for (std::size_t r = 1 + h * n; r < rows.size(); ++r) {
    const auto tail = [](const std::string& s) { return s.substr(s.find(',') + 1); };
    EXPECT_EQ(tail(rows[r]), tail(rows[r - h * n]));
  }

  train(tiny_art({"training.epochs=1", "seeds=[0]", "model.kind=rnn"}), dir / "rnn");
  EXPECT_THROW(dump_mechanics((dir / "rnn" / "checkpoint_seed0.json").string(), dir / "r"), Error);
}

TEST(Gradcheck, SuiteCoversEveryKind) {
  const Json rep = gradcheck_suite(1, 2);
  EXPECT_EQ(rep["kinds"].size(), 18u);
  EXPECT_LT(rep["max_rel_error"].get<double>(), 1e-4);
}

}  // namespace
}  // namespace stpn
