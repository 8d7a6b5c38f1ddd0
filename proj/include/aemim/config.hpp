#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aemim/data.hpp"
#include "aemim/harness.hpp"
#include "aemim/model.hpp"
#include "aemim/trainer.hpp"

namespace aemim {

struct DataConfig {
  std::string kind = "synth";  // synth | folder
  SynthSpec synth;
  std::string folder;

  void validate() const {
    if (kind == "synth") {
      synth.validate();
    } else if (kind == "folder") {
      if (folder.empty()) throw ConfigError("data: folder path required for kind \"folder\"");
    } else {
      throw ConfigError("data: unknown kind " + kind);
    }
  }
};

struct EvalConfig {
  std::vector<double> eps_list = {0.0, 1.0, 2.0, 4.0, 8.0};
  std::string attacker = "pgd20";  // pgd20 | fgsm
  int max_samples = 128;

  void validate() const {
    for (size_t i = 0; i + 1 < eps_list.size(); ++i)
      if (eps_list[i] >= eps_list[i + 1])
        throw ConfigError("eval: eps_list must be strictly increasing");
    if (attacker != "pgd20" && attacker != "fgsm")
      throw ConfigError("eval: unknown attacker " + attacker);
    if (max_samples <= 0) throw ConfigError("eval: max_samples must be positive");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  ProbeConfig probe;
  FinetuneConfig finetune;
  std::string output_dir = "runs";
  std::string run_id = "run0";

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    eval.validate();
    probe.validate();
    finetune.validate();
    if (run_id.empty()) throw ConfigError("run_id must not be empty");
  }
};

// Strict parse: unknown keys are rejected with the offending key named.
RunConfig config_from_json(const nlohmann::json& j);

// Reads a JSON config file (empty file means all defaults) and applies
// environment overrides: AEMIM_TRAIN__BASE_LR=3e-4 sets train.base_lr,
// with "__" separating nesting levels.
RunConfig parse_config(const std::string& path);

nlohmann::json serialize_config(const RunConfig& cfg);

// Hash of the trajectory-relevant subtree (model, train, data); checkpoints
// carry it so resumes against a different configuration fail loudly.
uint64_t config_hash(const RunConfig& cfg);

}  // namespace aemim
