#include "aemim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "aemim/errors.hpp"

namespace aemim {

namespace {

// Signed distance to the class shape; negative inside. Shapes are sized so
// their covered areas are comparable, which keeps coarse statistics (mean
// coverage) from separating classes on their own.
double shape_sd(int shape, double dx, double dy, double r) {
  double ax = std::abs(dx), ay = std::abs(dy);
  double dist = std::sqrt(dx * dx + dy * dy);
  switch (shape) {
    case 0:  // disk
      return dist - r;
    case 1:  // square
      return std::max(ax, ay) - 0.85 * r;
    case 2: {  // cross
      double arm = 0.38 * r, len = 1.15 * r;
      double horiz = std::max(ax - len, ay - arm);
      double vert = std::max(ay - len, ax - arm);
      return std::min(horiz, vert);
    }
    default: {  // ring
      double outer = 1.05 * r;
      return std::max(0.55 * outer - dist, dist - outer);
    }
  }
}

float clamp255(double v) {
  return static_cast<float>(std::min(255.0, std::max(0.0, v)));
}

Tensor render_sample(int shape, int family, int s, Rng& rng) {
  const double cx = rng.uniform(0.35, 0.65) * s;
  const double cy = rng.uniform(0.35, 0.65) * s;
  const double r = rng.uniform(0.22, 0.36) * s;
  // Two color families shared by all shapes: color alone identifies only the
  // family, the shape must come from spatial structure.
  const double base_warm[3] = {215.0, 70.0, 60.0};
  const double base_cool[3] = {60.0, 110.0, 215.0};
  const double* base = family == 0 ? base_warm : base_cool;
  double fg[3], bg[3];
  for (int c = 0; c < 3; ++c) fg[c] = base[c] * rng.uniform(0.8, 1.2);
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(20.0, 70.0);

  auto img = Tensor::zeros({3, s, s});
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double sd = shape_sd(shape, x + 0.5 - cx, y + 0.5 - cy, r);
      double alpha = std::min(1.0, std::max(0.0, 0.5 - sd));
      for (int c = 0; c < 3; ++c) {
        double v = bg[c] + (fg[c] - bg[c]) * alpha + rng.normal(0.0, 7.0);
        (*img.data)[static_cast<size_t>(c) * s * s + static_cast<size_t>(y) * s + x] =
            clamp255(v);
      }
    }
  return img;
}

float bilinear(const Tensor& img, int c, double y, double x) {
  const int h = img.shape[1], w = img.shape[2];
  y = std::min(static_cast<double>(h - 1), std::max(0.0, y));
  x = std::min(static_cast<double>(w - 1), std::max(0.0, x));
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  double fy = y - y0, fx = x - x0;
  auto at = [&](int yy, int xx) {
    return static_cast<double>(
        (*img.data)[static_cast<size_t>(c) * h * w + static_cast<size_t>(yy) * w + xx]);
  };
  return static_cast<float>((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)));
}

Tensor resize_crop(const Tensor& img, double y0, double x0, double ch, double cw, int out) {
  auto dst = Tensor::zeros({img.shape[0], out, out});
  for (int c = 0; c < img.shape[0]; ++c)
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < out; ++j) {
        double sy = y0 + (i + 0.5) * ch / out - 0.5;
        double sx = x0 + (j + 0.5) * cw / out - 0.5;
        (*dst.data)[static_cast<size_t>(c) * out * out + static_cast<size_t>(i) * out + j] =
            bilinear(img, c, sy, sx);
      }
  return dst;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, "synth");
  Dataset ds;
  ds.num_classes = spec.num_classes;
  const int train_per_class =
      static_cast<int>(std::floor(0.9 * spec.samples_per_class));
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    const int shape = cls / 2, family = cls % 2;
    for (int i = 0; i < spec.samples_per_class; ++i) {
      LabeledSample sample{render_sample(shape, family, spec.image_size, rng), cls};
      if (i < train_per_class) {
        ds.train.push_back(std::move(sample));
      } else {
        ds.val.push_back(std::move(sample));
      }
    }
  }
  return ds;
}

Tensor hflip(const Tensor& image) {
  const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
  auto out = Tensor::zeros(image.shape);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        (*out.data)[static_cast<size_t>(ci) * h * w + static_cast<size_t>(y) * w + x] =
            (*image.data)[static_cast<size_t>(ci) * h * w + static_cast<size_t>(y) * w +
                          (w - 1 - x)];
  return out;
}

Tensor augment(const Tensor& image, int out_size, Rng& rng) {
  if (image.ndim() != 3) throw DimensionError("augment: expected [C,H,W]");
  const int h = image.shape[1], w = image.shape[2];
  const double area_scale = rng.uniform(0.5, 1.0);
  const double aspect = rng.uniform(0.75, 4.0 / 3.0);
  double cw = std::min(static_cast<double>(w), w * std::sqrt(area_scale * aspect));
  double ch = std::min(static_cast<double>(h), h * std::sqrt(area_scale / aspect));
  const double x0 = rng.uniform(0.0, w - cw);
  const double y0 = rng.uniform(0.0, h - ch);
  const bool flip = rng.uniform(0.0, 1.0) < 0.5;
  auto out = resize_crop(image, y0, x0, ch, cw, out_size);
  return flip ? hflip(out) : out;
}

namespace {

void skip_ppm_space(std::istream& in) {
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      return;
    }
  }
}

Tensor load_ppm(std::istream& in, const std::string& path) {
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw IoError("not a binary PPM: " + path);
  skip_ppm_space(in);
  int w = 0, h = 0, maxval = 0;
  in >> w;
  skip_ppm_space(in);
  in >> h;
  skip_ppm_space(in);
  in >> maxval;
  in.get();  // single whitespace before pixel data
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("unsupported PPM header in " + path);
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("truncated PPM payload in " + path);
  auto img = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        (*img.data)[static_cast<size_t>(c) * h * w + static_cast<size_t>(y) * w + x] =
            static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]);
  return img;
}

uint32_t le32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

Tensor load_bmp(std::istream& in, const std::string& path) {
  std::vector<unsigned char> header(54);
  in.read(reinterpret_cast<char*>(header.data()), 54);
  if (!in || header[0] != 'B' || header[1] != 'M') throw IoError("not a BMP: " + path);
  const uint32_t offset = le32(&header[10]);
  const int w = static_cast<int32_t>(le32(&header[18]));
  const int h = static_cast<int32_t>(le32(&header[22]));
  const uint16_t bpp = static_cast<uint16_t>(header[28] | header[29] << 8);
  const uint32_t compression = le32(&header[30]);
  if (w <= 0 || h <= 0 || bpp != 24 || compression != 0)
    throw IoError("only uncompressed 24-bit BMP supported: " + path);
  in.seekg(offset, std::ios::beg);
  const int stride = (w * 3 + 3) / 4 * 4;
  std::vector<unsigned char> row(static_cast<size_t>(stride));
  auto img = Tensor::zeros({3, h, w});
  for (int y = h - 1; y >= 0; --y) {  // bottom-up rows
    in.read(reinterpret_cast<char*>(row.data()), stride);
    if (!in) throw IoError("truncated BMP payload in " + path);
    for (int x = 0; x < w; ++x) {
      // BGR order on disk
      (*img.data)[0 * static_cast<size_t>(h) * w + static_cast<size_t>(y) * w + x] =
          static_cast<float>(row[static_cast<size_t>(x) * 3 + 2]);
      (*img.data)[1 * static_cast<size_t>(h) * w + static_cast<size_t>(y) * w + x] =
          static_cast<float>(row[static_cast<size_t>(x) * 3 + 1]);
      (*img.data)[2 * static_cast<size_t>(h) * w + static_cast<size_t>(y) * w + x] =
          static_cast<float>(row[static_cast<size_t>(x) * 3]);
    }
  }
  return img;
}

Tensor load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  int first = in.peek();
  if (first == 'P') return load_ppm(in, path.string());
  return load_bmp(in, path.string());
}

}  // namespace

Dataset load_image_folder(const std::string& root, int image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset folder not found: " + root);
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("no class subdirectories under " + root);

  Dataset ds;
  ds.num_classes = static_cast<int>(class_dirs.size());
  for (size_t cls = 0; cls < class_dirs.size(); ++cls) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[cls]))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    const size_t train_count = files.size() - files.size() / 10;
    for (size_t i = 0; i < files.size(); ++i) {
      auto img = load_image(files[i]);
      if (img.shape[1] != image_size || img.shape[2] != image_size)
        img = resize_crop(img, 0.0, 0.0, img.shape[1], img.shape[2], image_size);
      LabeledSample sample{std::move(img), static_cast<int>(cls)};
      if (i < train_count) {
        ds.train.push_back(std::move(sample));
      } else {
        ds.val.push_back(std::move(sample));
      }
    }
  }
  return ds;
}

}  // namespace aemim
