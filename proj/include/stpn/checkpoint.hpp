#pragma once

// JSON checkpoints: model spec tags plus every parameter block with its shape
// and row-major values. Doubles are written in shortest round-trip form, so a
// save/load cycle reproduces every bit.

#include <cstdio>
#include <fstream>
#include <string>

#include "json.hpp"
#include "stpn/model.hpp"

namespace stpn {

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"topology", to_string(s.topology)},
          {"plasticity", to_string(s.mode)},
          {"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"output_dim", s.output_dim},
          {"normalize", s.step.normalize},
          {"retention", to_string(s.step.retention)},
          {"activation", to_string(s.step.activation)}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.kind = core_kind_from_string(j.at("kind").get<std::string>());
  s.topology = topology_from_string(j.value("topology", std::string("recurrent")));
  s.mode = plasticity_from_string(j.value("plasticity", std::string("per_synapse")));
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.step.normalize = j.value("normalize", true);
  s.step.retention = retention_from_string(j.value("retention", std::string("lambda")));
  s.step.activation = activation_from_string(j.value("activation", std::string("tanh")));
  return s;
}

inline nlohmann::json model_to_json(const Model& m) {
  nlohmann::json j;
  j["format"] = "stpn-checkpoint";
  j["version"] = 1;
  j["model"] = spec_to_json(m.spec);
  j["blocks"] = nlohmann::json::array();
  m.for_each_block([&](std::string_view name, std::span<const double> v, Shape s) {
    j["blocks"].push_back({{"name", std::string(name)},
                           {"rows", s.rows},
                           {"cols", s.cols},
                           {"values", std::vector<double>(v.begin(), v.end())}});
  });
  return j;
}

inline Model model_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "stpn-checkpoint")
    throw Error("checkpoint: not an stpn checkpoint");
  const ModelSpec spec = spec_from_json(j.at("model"));
  Rng rng(0);
  Model m = init_model(rng, spec);
  const auto& blocks = j.at("blocks");
  std::size_t k = 0;
  m.for_each_block([&](std::string_view name, std::span<double> v, Shape s) {
    if (k >= blocks.size()) throw Error("checkpoint: missing block " + std::string(name));
    const auto& b = blocks[k++];
    if (b.at("name").get<std::string>() != name)
      throw Error("checkpoint: expected block " + std::string(name) + ", found " +
                  b.at("name").get<std::string>());
    if (b.at("rows").get<std::size_t>() != s.rows || b.at("cols").get<std::size_t>() != s.cols)
      throw Error("checkpoint: block " + std::string(name) + " has shape " +
                  std::to_string(b.at("rows").get<std::size_t>()) + "x" +
                  std::to_string(b.at("cols").get<std::size_t>()) + ", model expects " +
                  to_string(s));
    const auto& vals = b.at("values");
    if (vals.size() != v.size()) throw Error("checkpoint: block " + std::string(name) + " size mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = vals[i].get<double>();
  });
  if (k != blocks.size()) throw Error("checkpoint: unexpected extra blocks");
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& m,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = model_to_json(m);
  if (!extra.empty()) j["run"] = extra;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw Error("checkpoint: cannot write " + tmp);
    os << j.dump() << '\n';
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("checkpoint: cannot rename " + tmp);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid JSON in " + path + ": " + e.what());
  }
}

inline Model load_checkpoint(const std::string& path) { return model_from_json(read_json_file(path)); }

}  // namespace stpn
