#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aemim/data.hpp"
#include "aemim/model.hpp"
#include "aemim/tensor.hpp"
#include "aemim/trainer.hpp"

namespace aemim {

struct ProbeConfig {
  int epochs = 40;
  int batch_size = 64;
  double lr = 0.05;
  double weight_decay = 0.0;
  uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || lr <= 0.0)
      throw ConfigError("probe: epochs, batch_size and lr must be positive");
  }
};

struct FinetuneConfig {
  int epochs = 8;
  int batch_size = 64;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double layer_decay = 0.8;
  bool use_augment = true;
  uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || base_lr <= 0.0)
      throw ConfigError("finetune: epochs, batch_size and base_lr must be positive");
    if (layer_decay <= 0.0 || layer_decay > 1.0)
      throw ConfigError("finetune: layer_decay must lie in (0,1]");
  }
};

// Encoder plus linear head over mean-pooled patch tokens.
struct Classifier {
  FinetuneExtract encoder;
  ModelConfig model;
  Tensor head_w;  // [enc_dim, num_classes]
  Tensor head_b;  // [num_classes]
  int num_classes = 0;
};

// Mean over patch-token outputs (class token excluded), no masking, clean
// adapters; computed outside any tape.
Tensor encode_pooled(const FinetuneExtract& enc, const ModelConfig& cfg, const Tensor& image);

int predict(const Classifier& clf, const Tensor& image);

struct EvalResult {
  double top1 = 0.0;
  Classifier classifier;
};

// Frozen encoder, linear head trained with AdamW on mean-pooled features.
EvalResult linear_probe(const FinetuneExtract& enc, const ModelConfig& cfg, const Dataset& data,
                        const ProbeConfig& cfg_probe);

// End-to-end training with per-block geometric lr decay; head starts at zero.
EvalResult finetune(const FinetuneExtract& enc, const ModelConfig& cfg, const Dataset& data,
                    const FinetuneConfig& cfg_ft);

enum class EvalAttacker { Fgsm, Pgd20 };

struct RobustnessPoint {
  double epsilon = 0.0;
  double top1 = 0.0;
};

struct RobustnessCurve {
  std::vector<RobustnessPoint> points;
  std::string attacker;
  int samples = 0;
};

// Cross-entropy sign-ascent attack on the classifier; zero-initialized, so it
// is fully deterministic. steps=1 with mu=eps is the FGSM point.
Tensor eval_attack(const Classifier& clf, const Tensor& image, int label, double eps, int steps,
                   double mu);

// Top-1 accuracy per budget; the eps=0 entry is computed without any attack.
RobustnessCurve robustness_curve(const Classifier& clf, const std::vector<LabeledSample>& samples,
                                 const std::vector<double>& eps_list, EvalAttacker attacker,
                                 int max_samples);

struct MetricRecord {
  std::string run_id;
  int64_t step = 0;
  std::string name;
  double value = 0.0;
  double wall_ms = 0.0;
};

// Line-delimited records; appends to an existing file.
void export_metrics(const std::vector<MetricRecord>& records, const std::string& path);
std::vector<MetricRecord> parse_metrics(const std::string& path);

double wall_ms_now();

}  // namespace aemim
