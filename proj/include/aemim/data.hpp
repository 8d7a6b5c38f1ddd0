#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

namespace aemim {

// Raw 0-255 image plus class index. Labels are used only by probe/eval;
// pre-training ignores them.
struct LabeledSample {
  Tensor image;  // [C,H,W]
  int label = 0;
};

struct SynthSpec {
  int num_classes = 8;
  int samples_per_class = 256;
  int image_size = 32;
  uint64_t seed = 0;
  std::string generator = "shapes";

  void validate() const {
    if (num_classes < 2 || num_classes > 8)
      throw ConfigError("synth: num_classes must lie in [2,8]");
    if (samples_per_class < 10) throw ConfigError("synth: samples_per_class must be >= 10");
    if (image_size < 8) throw ConfigError("synth: image_size must be >= 8");
    if (generator != "shapes") throw ConfigError("synth: unknown generator " + generator);
  }
};

struct Dataset {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;
  int num_classes = 0;
};

// Procedural shape-and-color classes, 90/10 train/val split stratified by
// class. Same seed, same bytes.
Dataset synth_dataset(const SynthSpec& spec);

Tensor hflip(const Tensor& image);

// Random resized crop (area scale 0.2-1.0) to out_size plus 50% horizontal
// flip; pixel range is preserved.
Tensor augment(const Tensor& image, int out_size, Rng& rng);

// Directory-per-class layout; images are binary PPM (P6) or uncompressed
// 24-bit BMP, resized to image_size with bilinear sampling.
Dataset load_image_folder(const std::string& root, int image_size);

}  // namespace aemim
