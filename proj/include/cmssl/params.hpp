#pragma once

#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "cmssl/errors.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl {

// Named trainable parameters. std::map keeps iteration order deterministic,
// which fixes the optimizer update order and gradient reduction order.
using ParamSet = std::map<std::string, Tensor>;

inline void zero_grads(ParamSet& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

// Checkpoint document: {"format_version": 1, "params": {name: {shape, values}}}.
// nlohmann/json emits shortest round-trip representations, so doubles survive
// save/load bit-exactly (all stored values are finite by construction).
inline nlohmann::json checkpoint_to_json(const ParamSet& params) {
  nlohmann::json doc;
  doc["format_version"] = 1;
  nlohmann::json p = nlohmann::json::object();
  for (const auto& [name, t] : params) {
    p[name] = {{"shape", t.shape}, {"values", t.values}};
  }
  doc["params"] = std::move(p);
  return doc;
}

inline ParamSet checkpoint_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("params"))
    throw IoError("checkpoint: missing format_version or params");
  if (doc.at("format_version").get<int>() != 1)
    throw IoError("checkpoint: unsupported format_version");
  ParamSet params;
  for (const auto& [name, entry] : doc.at("params").items()) {
    Tensor t = Tensor::from(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>());
    t.set_requires_grad(true);
    params.emplace(name, std::move(t));
  }
  return params;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream out(path);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out << checkpoint_to_json(params).dump();
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline ParamSet load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: invalid JSON in " + path + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

}  // namespace cmssl
