#include "aemim/trainer.hpp"

#include <cmath>
#include <cstdio>

namespace aemim {

std::string qualified_name(const char* partition, const std::string& name) {
  return std::string(partition) + "/" + name;
}

std::vector<int> select_adversarial_subset(const std::vector<int>& batch_indices, double alpha,
                                           Rng& rng) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("select_adversarial_subset: alpha must lie in [0,1]");
  const int b = static_cast<int>(batch_indices.size());
  const int k = static_cast<int>(std::llround(alpha * b));
  auto positions = rng.sample_without_replacement(b, k);
  std::vector<int> out;
  out.reserve(positions.size());
  for (int p : positions) out.push_back(batch_indices[static_cast<size_t>(p)]);
  return out;
}

Tensor combine_losses(const Tensor& loss_clean, const Tensor& loss_adv, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("combine_losses: lambda must lie in [0,1]");
  if (lambda == 1.0) return loss_clean;
  if (lambda == 0.0) return loss_adv;
  return add(scale(loss_clean, static_cast<float>(lambda)),
             scale(loss_adv, static_cast<float>(1.0 - lambda)));
}

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak_lr,
             double min_lr) {
  if (step < 0 || step > total_steps || warmup_steps > total_steps)
    throw ContractViolation("lr_at: need 0 <= step <= total_steps and warmup <= total");
  if (step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak_lr;
  double t = static_cast<double>(step - warmup_steps) /
             static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(t * M_PI));
}

void adamw_apply(const std::string& qname, Tensor& p, const Tensor* g, OptimizerState& state,
                 double lr, double weight_decay, double beta1, double beta2, double eps) {
  if (g && g->shape != p.shape)
    throw ContractViolation("adamw_apply: gradient shape " + shape_str(g->shape) +
                            " does not match parameter " + qname);
  const double t = static_cast<double>(state.step);
  const float bc1 = static_cast<float>(1.0 - std::pow(beta1, t));
  const float bc2 = static_cast<float>(1.0 - std::pow(beta2, t));
  const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
  const float flr = static_cast<float>(lr), fwd = static_cast<float>(weight_decay);
  const float feps = static_cast<float>(eps);
  auto& m = state.m.try_emplace(qname, Tensor::zeros(p.shape)).first->second;
  auto& v = state.v.try_emplace(qname, Tensor::zeros(p.shape)).first->second;
  for (size_t i = 0; i < p.numel(); ++i) {
    float gi = g ? (*g->data)[i] : 0.0f;
    if (!std::isfinite(gi))
      throw NumericsError("adamw_apply: non-finite gradient in " + qname);
    float& mi = (*m.data)[i];
    float& vi = (*v.data)[i];
    float& pi = (*p.data)[i];
    pi -= flr * fwd * pi;
    mi = b1 * mi + (1.0f - b1) * gi;
    vi = b2 * vi + (1.0f - b2) * gi * gi;
    pi -= flr * (mi / bc1) / (std::sqrt(vi / bc2) + feps);
  }
}

void adamw_step(ParamStore& params, const GradientMap& grads, OptimizerState& state, double lr,
                double weight_decay, double beta1, double beta2, double eps,
                const Partitions& parts) {
  state.step += 1;
  params.for_each([&](const char* partition, const std::string& name, Tensor& p) {
    if ((std::string_view(partition) == "psi" && !parts.psi) ||
        (std::string_view(partition) == "phi_c" && !parts.phi_c) ||
        (std::string_view(partition) == "phi_a" && !parts.phi_a))
      return;
    const std::string qname = qualified_name(partition, name);
    auto git = grads.find(qname);
    adamw_apply(qname, p, git == grads.end() ? nullptr : &git->second, state, lr, weight_decay,
                beta1, beta2, eps);
  });
}

namespace {

// Backpropagates weight * per_sample_loss on its own tape and accumulates the
// parameter gradients into acc, in a fixed parameter order.
void accumulate_sample_grads(Tape& tape, const Tensor& loss, float weight, ParamStore& params,
                             GradientMap& acc) {
  tape.backward(scale(loss, weight));
  params.for_each([&](const char* partition, const std::string& name, Tensor& p) {
    const std::vector<float>* g = tape.grad(p);
    if (!g) return;
    auto [it, fresh] = acc.try_emplace(qualified_name(partition, name), Tensor::zeros(p.shape));
    auto& dst = *it->second.data;
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += (*g)[i];
  });
}

void check_finite(double value, const char* branch, int sample_index, int64_t step) {
  if (!std::isfinite(value))
    throw NumericsError(std::string("train_step: non-finite ") + branch + " loss at step " +
                        std::to_string(step) + ", sample " + std::to_string(sample_index));
}

}  // namespace

StepMetrics train_step(const std::vector<Tensor>& batch, ParamStore& params,
                       OptimizerState& state, const TrainConfig& cfg, const ModelConfig& model,
                       TrainRngs& rngs, double lr, TrainMode mode, StepTrace* trace) {
  cfg.validate();
  model.validate();
  const int b = static_cast<int>(batch.size());
  if (b == 0) throw ContractViolation("train_step: empty batch");
  const double lambda = mode == TrainMode::BaselineMae ? 1.0 : cfg.lambda_ratio;
  const bool adv_active = lambda < 1.0 && cfg.adv_ratio_alpha > 0.0;

  // All per-sample masks are drawn first so the mask stream is consumed
  // identically whether or not the adversarial branch runs.
  std::vector<MaskSpec> masks;
  masks.reserve(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i)
    masks.push_back(sample_mask(model.n_patches(), cfg.mask_ratio, rngs.mask));

  std::vector<Tensor> targets;
  targets.reserve(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i)
    targets.push_back(
        reconstruction_target(batch[static_cast<size_t>(i)], model.patch_size,
                              cfg.normalize_targets));

  std::vector<int> subset;
  std::vector<Tensor> adversarial;
  double attack_ladv = 0.0;
  if (adv_active) {
    std::vector<int> all(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) all[static_cast<size_t>(i)] = i;
    subset = select_adversarial_subset(all, cfg.adv_ratio_alpha, rngs.subset);
    if (subset.empty() && cfg.adv_ratio_alpha > 0.0)
      std::fprintf(stderr,
                   "train_step: adversarial subset is empty (alpha=%g, batch=%d); "
                   "L_a defined as 0 this step\n",
                   cfg.adv_ratio_alpha, b);
    adversarial.reserve(subset.size());
    for (int pos : subset) {
      AttackStats stats;
      adversarial.push_back(pgd_attack(batch[static_cast<size_t>(pos)],
                                       masks[static_cast<size_t>(pos)], params, model,
                                       cfg.attack, rngs.attack, &stats));
      if (!stats.loss_per_step.empty()) attack_ladv += stats.loss_per_step.back();
    }
    if (!subset.empty()) attack_ladv /= static_cast<double>(subset.size());
  }

  GradientMap grads;
  double loss_clean = 0.0;
  std::vector<double> clean_losses;
  const float w_clean = static_cast<float>(lambda / b);
  for (int i = 0; i < b; ++i) {
    Tape tape;
    Tape::Scope scope(tape);
    auto patches = patchify(batch[static_cast<size_t>(i)], model.patch_size);
    auto pred = forward_mim(patches, masks[static_cast<size_t>(i)], Domain::Clean, params, model);
    auto loss = reconstruction_loss(pred, targets[static_cast<size_t>(i)],
                                    masks[static_cast<size_t>(i)]);
    double v = static_cast<double>(loss.item());
    check_finite(v, "clean", i, state.step);
    loss_clean += v;
    clean_losses.push_back(v);
    if (w_clean != 0.0f) accumulate_sample_grads(tape, loss, w_clean, params, grads);
  }
  loss_clean /= b;

  double loss_adv = 0.0;
  std::vector<double> adv_losses;
  std::vector<Tensor> adv_targets;
  if (!subset.empty()) {
    const float w_adv = static_cast<float>((1.0 - lambda) / subset.size());
    for (size_t j = 0; j < subset.size(); ++j) {
      const int pos = subset[j];
      Tape tape;
      Tape::Scope scope(tape);
      auto patches = patchify(adversarial[j], model.patch_size);
      // The reconstruction target is the ORIGINAL image, never the
      // adversarial one.
      const Tensor& target = targets[static_cast<size_t>(pos)];
      auto pred =
          forward_mim(patches, masks[static_cast<size_t>(pos)], Domain::Adversarial, params, model);
      auto loss = reconstruction_loss(pred, target, masks[static_cast<size_t>(pos)]);
      double v = static_cast<double>(loss.item());
      check_finite(v, "adversarial", pos, state.step);
      loss_adv += v;
      adv_losses.push_back(v);
      adv_targets.push_back(target);
      if (w_adv != 0.0f) accumulate_sample_grads(tape, loss, w_adv, params, grads);
    }
    loss_adv /= static_cast<double>(subset.size());
  }

  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (float x : *g.data) sq += static_cast<double>(x) * x;
    double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) {
      float s = static_cast<float>(cfg.grad_clip / norm);
      for (auto& [name, g] : grads)
        for (float& x : *g.data) x *= s;
    }
  }

  Partitions parts;
  parts.phi_a = mode != TrainMode::BaselineMae;
  adamw_step(params, grads, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps,
             parts);

  StepMetrics m;
  m.loss_clean = loss_clean;
  m.loss_adv = loss_adv;
  m.total = lambda * loss_clean + (1.0 - lambda) * loss_adv;
  m.lr = lr;
  m.attack_ladv = attack_ladv;
  m.step = state.step;

  if (trace) {
    trace->masks = masks;
    trace->subset = subset;
    trace->adversarial = adversarial;
    trace->adv_targets = adv_targets;
    trace->clean_losses = clean_losses;
    trace->adv_losses = adv_losses;
  }
  return m;
}

}  // namespace aemim
