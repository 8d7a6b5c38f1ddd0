#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "aemim/mim.hpp"
#include "aemim/model.hpp"
#include "aemim/ops.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

namespace aemim {

enum class DistanceKind { L2, KL };
enum class InitNoise { UniformBall, Zero };

// L-infinity attack on the raw 0-255 pixel scale.
struct AttackConfig {
  double epsilon = 2.0;
  double step_size_mu = 0.0;  // 0 selects the default epsilon / steps_T
  int steps_T = 2;
  DistanceKind distance = DistanceKind::L2;
  InitNoise init_noise = InitNoise::UniformBall;

  double mu() const { return step_size_mu > 0.0 ? step_size_mu : epsilon / steps_T; }

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");
    if (steps_T < 1) throw ConfigError("attack: steps_T must be >= 1");
    if (epsilon > 0.0 && !(mu() > 0.0))
      throw ConfigError("attack: step size must be positive when epsilon > 0");
  }
};

// Distance between encoder outputs; the clean side is treated as a constant,
// so the result is differentiable w.r.t. f_adv only.
template <typename T>
TensorT<T> feature_distance(const TensorT<T>& f_adv, const TensorT<T>& f_clean,
                            DistanceKind kind) {
  if (f_adv.shape != f_clean.shape)
    throw DimensionError("feature_distance: shapes disagree: " + shape_str(f_adv.shape) +
                         " vs " + shape_str(f_clean.shape));
  auto target = detach(f_clean);
  if (kind == DistanceKind::L2) return mse(f_adv, target);

  // Per-token softmax over the feature dim; mean over tokens of KL(clean||adv).
  const int tokens = f_adv.shape[0];
  auto p_c = softmax(target, -1);
  auto lp_c = log_softmax(target, -1);
  auto diff = sub(lp_c, log_softmax(f_adv, -1));
  return scale(sum_all(mul(diff, p_c)), static_cast<T>(1.0 / tokens));
}

// x plus per-pixel Uniform[-eps, eps] noise, clipped to the valid pixel range.
template <typename T>
TensorT<T> random_init(const TensorT<T>& x, double eps, Rng& rng) {
  auto out = x.clone();
  out.requires_grad = false;
  out.leaf = false;
  if (eps <= 0.0) return out;
  for (size_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>((*out.data)[i]) + rng.uniform(-eps, eps);
    (*out.data)[i] = static_cast<T>(std::min(255.0, std::max(0.0, v)));
  }
  return out;
}

// Clamp into the eps-ball around x_orig intersected with [0, 255].
template <typename T>
TensorT<T> project(const TensorT<T>& x_cand, const TensorT<T>& x_orig, double eps) {
  if (x_cand.shape != x_orig.shape)
    throw DimensionError("project: shapes disagree: " + shape_str(x_cand.shape) + " vs " +
                         shape_str(x_orig.shape));
  auto out = TensorT<T>::zeros(x_cand.shape);
  for (size_t i = 0; i < out.numel(); ++i) {
    const T xi = (*x_orig.data)[i];
    double lo = std::max(0.0, static_cast<double>(xi) - eps);
    double hi = std::min(255.0, static_cast<double>(xi) + eps);
    double v = static_cast<double>((*x_cand.data)[i]);
    T r = static_cast<T>(std::min(hi, std::max(lo, v)));
    // Rounding to T may land half an ulp outside the ball; one step back
    // toward the center restores ||r - x||_inf <= eps exactly.
    double d = static_cast<double>(r) - static_cast<double>(xi);
    if (d > eps || d < -eps) r = std::nextafter(r, xi);
    (*out.data)[i] = r;
  }
  return out;
}

struct AttackStats {
  std::vector<double> loss_per_step;
};

namespace detail {

// One gradient-ascent step of the feature-distance objective; returns the
// sign-step candidate before projection.
template <typename T>
TensorT<T> ascend_once(const TensorT<T>& x_a, const MaskSpec& mask, const ParamStoreT<T>& ps,
                       const ModelConfig& cfg, const TensorT<T>& f_clean, DistanceKind kind,
                       double mu, double* loss_out) {
  TensorT<T> g;
  {
    TapeT<T> tape;
    typename TapeT<T>::Scope scope(tape);
    auto leaf = x_a;
    leaf.set_requires_grad();
    auto f_adv = encode(patchify(leaf, cfg.patch_size), mask, Domain::Adversarial, ps, cfg);
    auto loss = feature_distance(f_adv, f_clean, kind);
    if (loss_out) *loss_out = static_cast<double>(loss.item());
    tape.backward(loss);
    g = tape.grad_tensor(leaf);
  }
  auto cand = TensorT<T>::zeros(x_a.shape);
  for (size_t i = 0; i < cand.numel(); ++i) {
    T gv = (*g.data)[i];
    T s = gv > T(0) ? T(1) : (gv < T(0) ? T(-1) : T(0));
    (*cand.data)[i] = (*x_a.data)[i] + static_cast<T>(mu) * s;
  }
  return cand;
}

template <typename T>
TensorT<T> clean_features(const TensorT<T>& x, const MaskSpec& mask, const ParamStoreT<T>& ps,
                          const ModelConfig& cfg) {
  // No tape is active here, so the result is a plain constant.
  return encode(patchify(x, cfg.patch_size), mask, Domain::Clean, ps, cfg);
}

}  // namespace detail

// Iterative sign-gradient ascent of the feature distance under the L-inf
// budget. Only the encoder runs; parameters are read-only throughout.
template <typename T>
TensorT<T> pgd_attack(const TensorT<T>& x, const MaskSpec& mask, const ParamStoreT<T>& ps,
                      const ModelConfig& cfg, const AttackConfig& atk, Rng& rng,
                      AttackStats* stats = nullptr) {
  atk.validate();
  if (atk.epsilon == 0.0) {
    auto out = x.clone();
    out.requires_grad = false;
    out.leaf = false;
    return out;
  }
  auto f_clean = detail::clean_features(x, mask, ps, cfg);
  auto x_a = atk.init_noise == InitNoise::UniformBall ? random_init(x, atk.epsilon, rng)
                                                      : random_init(x, 0.0, rng);
  const double mu = atk.mu();
  for (int t = 0; t < atk.steps_T; ++t) {
    double loss = 0.0;
    auto cand = detail::ascend_once(x_a, mask, ps, cfg, f_clean, atk.distance, mu, &loss);
    if (stats) stats->loss_per_step.push_back(loss);
    x_a = project(cand, x, atk.epsilon);
  }
  return x_a;
}

// Single-step variant (random start, one sign step, one projection). With
// steps_T == 1 and a shared rng stream this is bit-equal to pgd_attack.
template <typename T>
TensorT<T> fgsm_attack(const TensorT<T>& x, const MaskSpec& mask, const ParamStoreT<T>& ps,
                       const ModelConfig& cfg, const AttackConfig& atk, Rng& rng,
                       AttackStats* stats = nullptr) {
  atk.validate();
  if (atk.epsilon == 0.0) {
    auto out = x.clone();
    out.requires_grad = false;
    out.leaf = false;
    return out;
  }
  auto f_clean = detail::clean_features(x, mask, ps, cfg);
  auto x_a = atk.init_noise == InitNoise::UniformBall ? random_init(x, atk.epsilon, rng)
                                                      : random_init(x, 0.0, rng);
  double loss = 0.0;
  auto cand = detail::ascend_once(x_a, mask, ps, cfg, f_clean, atk.distance, atk.mu(), &loss);
  if (stats) stats->loss_per_step.push_back(loss);
  return project(cand, x, atk.epsilon);
}

// Mean feature distance under no perturbation, random noise at the budget,
// and PGD at the budget; PGD must dominate on any reasonably trained model.
struct EffectivenessReport {
  double none = 0.0;
  double random_noise = 0.0;
  double pgd = 0.0;
  int samples = 0;
};

template <typename T>
EffectivenessReport attack_effectiveness_report(const std::vector<TensorT<T>>& images,
                                                const ParamStoreT<T>& ps, const ModelConfig& cfg,
                                                const AttackConfig& atk, double mask_ratio,
                                                uint64_t seed) {
  Rng mask_rng(seed, "report.mask");
  Rng noise_rng(seed, "report.noise");
  Rng attack_rng(seed, "report.attack");
  EffectivenessReport rep;
  rep.samples = static_cast<int>(images.size());
  for (const auto& x : images) {
    auto mask = sample_mask(cfg.n_patches(), mask_ratio, mask_rng);
    auto f_clean = detail::clean_features(x, mask, ps, cfg);
    rep.none += static_cast<double>(
        feature_distance(f_clean, f_clean, atk.distance).item());
    // Noise and PGD rows both perturb the adversarial-branch input.
    auto x_noise = random_init(x, atk.epsilon, noise_rng);
    auto f_noise =
        encode(patchify(x_noise, cfg.patch_size), mask, Domain::Adversarial, ps, cfg);
    rep.random_noise += static_cast<double>(
        feature_distance(f_noise, f_clean, atk.distance).item());
    auto x_adv = pgd_attack(x, mask, ps, cfg, atk, attack_rng);
    auto f_adv = encode(patchify(x_adv, cfg.patch_size), mask, Domain::Adversarial, ps, cfg);
    rep.pgd += static_cast<double>(feature_distance(f_adv, f_clean, atk.distance).item());
  }
  if (rep.samples > 0) {
    rep.none /= rep.samples;
    rep.random_noise /= rep.samples;
    rep.pgd /= rep.samples;
  }
  return rep;
}

}  // namespace aemim
