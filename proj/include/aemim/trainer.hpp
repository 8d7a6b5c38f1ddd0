#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aemim/attack.hpp"
#include "aemim/mim.hpp"
#include "aemim/model.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

namespace aemim {

struct TrainConfig {
  double lambda_ratio = 0.5;    // weight between clean and adversarial loss
  double adv_ratio_alpha = 1.0; // fraction of the batch given adversarial twins
  double base_lr = 1.5e-4;      // per-256 rate; scaled linearly by batch size
  int batch_size = 64;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.95;
  double adam_eps = 1e-8;
  int epochs = 20;
  double warmup_epochs = 1.0;
  double min_lr = 0.0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  uint64_t seed = 0;
  double mask_ratio = 0.75;
  bool normalize_targets = true;
  AttackConfig attack;

  double effective_lr() const { return base_lr * batch_size / 256.0; }

  void validate() const {
    if (lambda_ratio < 0.0 || lambda_ratio > 1.0)
      throw ConfigError("train: lambda_ratio must lie in [0,1], got " +
                        std::to_string(lambda_ratio));
    if (adv_ratio_alpha < 0.0 || adv_ratio_alpha > 1.0)
      throw ConfigError("train: adv_ratio_alpha must lie in [0,1], got " +
                        std::to_string(adv_ratio_alpha));
    if (base_lr <= 0.0) throw ConfigError("train: base_lr must be positive");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("train: betas must lie in [0,1)");
    if (epochs <= 0) throw ConfigError("train: epochs must be positive");
    if (warmup_epochs < 0.0 || warmup_epochs > epochs)
      throw ConfigError("train: warmup_epochs must lie in [0, epochs]");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
      throw ConfigError("train: mask_ratio must lie in [0,1)");
    attack.validate();
  }
};

// AdamW moments keyed by qualified parameter name ("partition/name").
struct OptimizerState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  int64_t step = 0;
};

struct StepMetrics {
  double loss_clean = 0.0;
  double loss_adv = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double attack_ladv = 0.0;  // feature distance reached by the attacker
  int64_t step = 0;
};

// Named rng streams consumed by one pre-training run; each is checkpointed.
struct TrainRngs {
  Rng mask;
  Rng attack;
  Rng subset;

  static TrainRngs make(uint64_t seed) {
    TrainRngs r;
    r.mask = Rng(seed, "mask");
    r.attack = Rng(seed, "attack");
    r.subset = Rng(seed, "subset");
    return r;
  }
};

// Which parameter partitions an optimizer step touches.
struct Partitions {
  bool psi = true;
  bool phi_c = true;
  bool phi_a = true;
};

enum class TrainMode {
  Aemim,       // co-training, updates psi, phi_c and phi_a
  BaselineMae  // plain masked-autoencoder step; phi_a untouched
};

// Captures per-step internals for tests.
struct StepTrace {
  std::vector<MaskSpec> masks;
  std::vector<int> subset;            // batch positions attacked this step
  std::vector<Tensor> adversarial;    // x_a per subset entry
  std::vector<Tensor> adv_targets;    // reconstruction targets of the adv branch
  std::vector<double> clean_losses;   // per-sample L_c
  std::vector<double> adv_losses;     // per-subset-entry L_a
};

std::string qualified_name(const char* partition, const std::string& name);

std::vector<int> select_adversarial_subset(const std::vector<int>& batch_indices, double alpha,
                                           Rng& rng);

Tensor combine_losses(const Tensor& loss_clean, const Tensor& loss_adv, double lambda);

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak_lr,
             double min_lr);

void adamw_step(ParamStore& params, const GradientMap& grads, OptimizerState& state, double lr,
                double weight_decay, double beta1, double beta2, double eps,
                const Partitions& parts = {});

// Update kernel for one parameter. The caller advances state.step exactly
// once per optimizer step before applying; a null gradient means zero.
void adamw_apply(const std::string& qname, Tensor& p, const Tensor* g, OptimizerState& state,
                 double lr, double weight_decay, double beta1, double beta2, double eps);

// One full co-training step over a batch of raw [C,H,W] images.
StepMetrics train_step(const std::vector<Tensor>& batch, ParamStore& params,
                       OptimizerState& state, const TrainConfig& cfg, const ModelConfig& model,
                       TrainRngs& rngs, double lr, TrainMode mode = TrainMode::Aemim,
                       StepTrace* trace = nullptr);

}  // namespace aemim
