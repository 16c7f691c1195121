#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "stpn/checkpoint.hpp"

namespace stpn {
namespace {

std::vector<ModelSpec> specs() {
  std::vector<ModelSpec> v;
  for (auto k : {CoreKind::stpn, CoreKind::rnn, CoreKind::lstm})
    for (auto m : {PlasticityMode::per_synapse, PlasticityMode::uniform}) {
      if (k != CoreKind::stpn && m == PlasticityMode::uniform) continue;
      ModelSpec s;
      s.kind = k;
      s.mode = m;
      s.input_dim = 3;
      s.hidden = 4;
      s.output_dim = 2;
      v.push_back(s);
    }
  ModelSpec f = v.front();
  f.topology = Topology::feedforward;
  f.step.retention = RetentionForm::one_minus_lambda;
  f.step.normalize = false;
  v.push_back(f);
  return v;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(10);
  const auto dir = std::filesystem::temp_directory_path() / "stpn_ckpt_test";
  std::filesystem::create_directories(dir);
  for (const auto& s : specs()) {
    Model m = init_model(rng, s);
    // awkward values: subnormal, negative zero, long mantissas
    m.head.b[0] = 4.9e-324;
    m.head.b[1] = -0.0;
    m.head.W(0, 0) = 0.1 + 0.2;
    const std::string path = (dir / (label(s) + ".json")).string();
    save_checkpoint(path, m, {{"seed", 3}});
    const Model back = load_checkpoint(path);
    EXPECT_EQ(back.spec, m.spec);
    std::vector<double> a, b;
    m.for_each_block([&](std::string_view, std::span<const double> v, Shape) { a.insert(a.end(), v.begin(), v.end()); });
    back.for_each_block([&](std::string_view, std::span<const double> v, Shape) { b.insert(b.end(), v.begin(), v.end()); });
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0) << label(s);
    EXPECT_EQ(read_json_file(path).at("run").at("seed"), 3);
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MismatchesAreReported) {
  Rng rng(11);
  const auto j = model_to_json(init_model(rng, specs()[0]));
  auto bad_shape = j;
  bad_shape["blocks"][0]["rows"] = 9;
  EXPECT_THROW(model_from_json(bad_shape), Error);
  auto bad_name = j;
  bad_name["blocks"][1]["name"] = "Beta";
  EXPECT_THROW(model_from_json(bad_name), Error);
  auto missing = j;
  missing["blocks"].erase(missing["blocks"].size() - 1);
  EXPECT_THROW(model_from_json(missing), Error);
  auto wrong = j;
  wrong["format"] = "other";
  EXPECT_THROW(model_from_json(wrong), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), Error);
}

}  // namespace
}  // namespace stpn
