#pragma once

// Single-file JSON checkpoint.
//
// {
//   "format": "dlac-checkpoint",
//   "version": 1,
//   "seed": <uint64>,                  model initialization seed
//   "config": {TrainConfig fields},
//   "vocabulary": ["<pad>", "<unk>", ...],
//   "labels": [{"code": ..., "description": ...}, ...],
//   "parameters": [{"name": ..., "shape": [..], "data": [..]}, ...],
//   "history": [{"epoch", "train_loss", "validation_loss", "validation_micro_f1"}, ...]
// }
//
// Doubles are written in shortest round-trip form, so reloading reproduces
// every parameter bit for bit.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dlac/model.hpp"
#include "dlac/training.hpp"

namespace dlac {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "dlac-checkpoint";

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

struct Checkpoint {
  TrainConfig config;
  std::uint64_t seed = 0;
  Vocabulary vocabulary;
  LabelSet labels;
  Model model;
  TrainHistory history;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& l : ck.labels.labels()) labels.push_back({{"code", l.code}, {"description", l.description}});
  nlohmann::json params = nlohmann::json::array();
  for (const auto* p : ck.model.parameters())
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"data", p->value.storage()}});
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"seed", ck.seed},
          {"config", to_json(ck.config)},
          {"vocabulary", ck.vocabulary.tokens()},
          {"labels", labels},
          {"parameters", params},
          {"history", to_json(ck.history)}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("format", std::string{}) != kCheckpointFormat) {
      throw CheckpointError("not a dlac checkpoint");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.config = train_config_from_json(j.at("config"));
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.vocabulary = Vocabulary::from_tokens(j.at("vocabulary").get<std::vector<std::string>>());
    std::vector<Label> labels;
    for (const auto& l : j.at("labels")) labels.push_back({l.at("code").get<std::string>(), l.at("description").get<std::string>()});
    ck.labels = LabelSet(std::move(labels));
    ck.model = Model(ck.config.model, ck.vocabulary, ck.labels, ck.seed);
    const auto& params = j.at("parameters");
    if (params.size() != ck.model.parameters().size()) throw CheckpointError("parameter count does not match the model");
    for (const auto& pj : params) {
      const auto name = pj.at("name").get<std::string>();
      Parameter* p = ck.model.find_parameter(name);
      if (!p) throw CheckpointError("unknown parameter '" + name + "'");
      Tensor value(pj.at("shape").get<Shape>(), pj.at("data").get<std::vector<double>>());
      if (value.shape() != p->value.shape()) {
        throw CheckpointError("parameter '" + name + "' has shape " + shape_string(value.shape()) + ", expected " +
                              shape_string(p->value.shape()));
      }
      p->value = std::move(value);
    }
    ck.history = history_from_json(j.at("history"));
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
}

inline std::string serialize_checkpoint(const Checkpoint& ck) { return checkpoint_to_json(ck).dump() + "\n"; }

/// Writes to a sibling temporary file and renames it into place.
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    out << serialize_checkpoint(ck);
    if (!out.flush()) throw CheckpointError("failed writing checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("corrupt checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace dlac
