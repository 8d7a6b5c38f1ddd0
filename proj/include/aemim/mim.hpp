#pragma once

#include <cmath>
#include <vector>

#include "aemim/ops.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

namespace aemim {

// Patch grid is the masking unit. Row-major patch order; each patch is
// flattened channel-major: index c*p*p + dy*p + dx.
template <typename T>
TensorT<T> patchify(const TensorT<T>& image, int patch_size) {
  if (image.ndim() != 3)
    throw DimensionError("patchify: expected [C,H,W], got " + shape_str(image.shape));
  const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
  if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0)
    throw DimensionError("patchify: " + shape_str(image.shape) + " not divisible by patch size " +
                         std::to_string(patch_size));
  const int gh = h / patch_size, gw = w / patch_size;
  auto x = reshape(image, {c, gh, patch_size, gw, patch_size});
  x = permute(x, {1, 3, 0, 2, 4});
  return reshape(x, {gh * gw, c * patch_size * patch_size});
}

template <typename T>
TensorT<T> unpatchify(const TensorT<T>& patches, int patch_size, int channels, int height,
                      int width) {
  const int gh = height / patch_size, gw = width / patch_size;
  if (patches.ndim() != 2 || patches.shape[0] != gh * gw ||
      patches.shape[1] != channels * patch_size * patch_size)
    throw DimensionError("unpatchify: " + shape_str(patches.shape) +
                         " does not match the requested image geometry");
  auto x = reshape(patches, {gh, gw, channels, patch_size, patch_size});
  x = permute(x, {2, 0, 3, 1, 4});
  return reshape(x, {channels, height, width});
}

// Random patch subset hidden from the encoder. Size is round-half-up of
// ratio*n_patches; indices strictly increasing.
struct MaskSpec {
  int n_patches = 0;
  std::vector<int> masked;
  double ratio = 0.0;

  std::vector<int> visible() const {
    std::vector<int> vis;
    vis.reserve(static_cast<size_t>(n_patches) - masked.size());
    size_t mi = 0;
    for (int i = 0; i < n_patches; ++i) {
      if (mi < masked.size() && masked[mi] == i) {
        ++mi;
      } else {
        vis.push_back(i);
      }
    }
    return vis;
  }

  int n_masked() const { return static_cast<int>(masked.size()); }
  int n_visible() const { return n_patches - n_masked(); }

  void validate() const {
    int prev = -1;
    for (int m : masked) {
      if (m <= prev || m < 0 || m >= n_patches)
        throw ContractViolation("MaskSpec: indices must be strictly increasing in [0," +
                                std::to_string(n_patches) + ")");
      prev = m;
    }
  }
};

inline int mask_count(int n_patches, double ratio) {
  return static_cast<int>(std::floor(ratio * n_patches + 0.5));
}

inline MaskSpec sample_mask(int n_patches, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio >= 1.0)
    throw ConfigError("mask ratio must lie in [0,1), got " + std::to_string(ratio));
  MaskSpec spec;
  spec.n_patches = n_patches;
  spec.ratio = ratio;
  spec.masked = rng.sample_without_replacement(n_patches, mask_count(n_patches, ratio));
  return spec;
}

// Patchified pixels; optionally each patch standardized to zero mean and unit
// variance (the usual MAE target convention).
template <typename T>
TensorT<T> reconstruction_target(const TensorT<T>& image, int patch_size,
                                 bool normalize_per_patch) {
  auto patches = detach(patchify(image, patch_size));
  if (!normalize_per_patch) return patches;
  const T eps = static_cast<T>(1e-6);
  const int n = patches.shape[0], d = patches.shape[1];
  auto out = TensorT<T>::zeros(patches.shape);
  for (int r = 0; r < n; ++r) {
    const T* p = patches.ptr() + static_cast<size_t>(r) * d;
    T* o = out.ptr() + static_cast<size_t>(r) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += p[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) o[j] = (p[j] - mu) * inv;
  }
  return out;
}

// Mean squared error over masked patches only.
template <typename T>
TensorT<T> reconstruction_loss(const TensorT<T>& pred, const TensorT<T>& target,
                               const MaskSpec& mask) {
  if (pred.shape != target.shape)
    throw DimensionError("reconstruction_loss: shapes disagree: " + shape_str(pred.shape) +
                         " vs " + shape_str(target.shape));
  if (mask.masked.empty())
    throw ContractViolation("reconstruction_loss: empty mask leaves the loss undefined");
  if (pred.ndim() != 2 || pred.shape[0] != mask.n_patches)
    throw ContractViolation("reconstruction_loss: prediction rows do not match mask patches");
  return mse(gather_rows(pred, mask.masked), gather_rows(target, mask.masked));
}

}  // namespace aemim
