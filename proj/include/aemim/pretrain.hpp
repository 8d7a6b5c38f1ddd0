#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aemim/checkpoint.hpp"
#include "aemim/config.hpp"
#include "aemim/data.hpp"
#include "aemim/trainer.hpp"

namespace aemim {

struct PretrainOptions {
  std::string checkpoint_path;  // written at epoch boundaries and session end; empty disables
  std::string metrics_path;     // JSONL, appended per epoch; empty disables
  std::string resume_path;      // checkpoint to continue from; empty starts fresh
  int64_t max_steps = -1;       // stop this session after N optimizer steps; -1 runs to the end
  TrainMode mode = TrainMode::Aemim;
  std::string run_id = "run0";
  bool quiet = false;
};

struct PretrainResult {
  ParamStore params;
  OptimizerState opt;
  std::vector<StepMetrics> metrics;  // steps executed in this session
  int64_t steps_per_epoch = 0;
  int64_t total_steps = 0;
  bool finished = false;
};

// Runs the co-training loop over data.train: a fresh shuffle per epoch, one
// augmentation draw per sample, partial trailing batches dropped. Resuming
// from a checkpoint reproduces the uninterrupted run bit for bit.
PretrainResult run_pretrain(const RunConfig& cfg, const Dataset& data,
                            const PretrainOptions& opts = {});

}  // namespace aemim
