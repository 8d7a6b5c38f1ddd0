#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aemim/harness.hpp"
#include "aemim/model.hpp"
#include "aemim/tensor.hpp"
#include "aemim/trainer.hpp"

namespace aemim {

struct NamedTensor {
  std::string partition;  // psi | phi_c | phi_a | opt_m | opt_v | head
  std::string name;
  Tensor value;
};

// Single-file checkpoint: textual manifest (format version, config hash,
// epoch, rng states, tensor table with partition labels) followed by a
// length-prefixed payload of little-endian float32 tensors and a crc32.
struct CheckpointData {
  uint64_t config_hash = 0;
  int epoch = 0;
  int64_t opt_step = 0;
  std::map<std::string, std::string> rng_states;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;
};

// Atomic: writes a temp file, fsyncs, renames over path.
void save_checkpoint(const CheckpointData& ckpt, const std::string& path);

CheckpointData load_checkpoint(const std::string& path);

// Raises CheckpointError{HashMismatch} when the checkpoint was produced by a
// different configuration.
void require_config_hash(const CheckpointData& ckpt, uint64_t expected);

CheckpointData pack_pretrain(const ParamStore& params, const OptimizerState& opt,
                             const TrainRngs& rngs, int epoch, uint64_t config_hash);
void unpack_pretrain(const CheckpointData& ckpt, ParamStore& params, OptimizerState& opt,
                     TrainRngs& rngs);

CheckpointData pack_classifier(const Classifier& clf, uint64_t config_hash);
Classifier unpack_classifier(const CheckpointData& ckpt, const ModelConfig& cfg);

// Encoder-only export: psi_e and phi_c_e tensors, nothing else.
CheckpointData pack_encoder(const FinetuneExtract& ex, uint64_t config_hash);
FinetuneExtract unpack_encoder(const CheckpointData& ckpt);

}  // namespace aemim
