#include <doctest.h>

#include "aemim/mim.hpp"
#include "gradcheck.hpp"

using namespace aemim;

TEST_CASE("patchify layout: row-major patches, channel-major pixels") {
  // 1 channel, 4x4 image, patch 2 -> 4 patches of 4 pixels.
  Tensor img = Tensor::zeros({1, 4, 4});
  for (int i = 0; i < 16; ++i) img.ptr()[i] = static_cast<float>(i);
  Tensor p = patchify(img, 2);
  CHECK(p.size(0) == 4);
  CHECK(p.size(1) == 4);
  // Patch 0 is the top-left block: pixels (0,0),(0,1),(1,0),(1,1) = 0,1,4,5.
  CHECK(p.ptr()[0] == 0);
  CHECK(p.ptr()[1] == 1);
  CHECK(p.ptr()[2] == 4);
  CHECK(p.ptr()[3] == 5);
  // Patch 1 is top-right: 2,3,6,7.
  CHECK(p.ptr()[4] == 2);
  CHECK(p.ptr()[7] == 7);
  // Patch 2 is bottom-left: 8,9,12,13.
  CHECK(p.ptr()[8] == 8);
  CHECK(p.ptr()[11] == 13);
}

TEST_CASE("patchify splits channels within one patch row") {
  Tensor img = Tensor::zeros({2, 2, 2});
  for (int i = 0; i < 8; ++i) img.ptr()[i] = static_cast<float>(i);
  Tensor p = patchify(img, 2);
  CHECK(p.size(0) == 1);
  CHECK(p.size(1) == 8);
  // Channel 0 pixels first, then channel 1.
  for (int i = 0; i < 8; ++i) CHECK(p.ptr()[i] == static_cast<float>(i));
}

TEST_CASE("unpatchify inverts patchify") {
  Rng rng(9, "patch.rt");
  Tensor img = Tensor::zeros({3, 8, 8});
  for (size_t i = 0; i < img.numel(); ++i)
    img.ptr()[i] = static_cast<float>(rng.uniform(0.0, 255.0));
  Tensor p = patchify(img, 4);
  Tensor back = unpatchify(p, 4, 3, 8, 8);
  for (size_t i = 0; i < img.numel(); ++i) CHECK(back.ptr()[i] == img.ptr()[i]);
}

TEST_CASE("patchify rejects bad geometry") {
  CHECK_THROWS_AS(patchify(Tensor::zeros({3, 9, 9}), 4), DimensionError);
  CHECK_THROWS_AS(patchify(Tensor::zeros({3, 8}), 4), DimensionError);
  CHECK_THROWS_AS(unpatchify(Tensor::zeros({3, 5}), 4, 3, 8, 8), DimensionError);
}

TEST_CASE("mask_count rounds half up") {
  CHECK(mask_count(196, 0.75) == 147);
  CHECK(mask_count(16, 0.75) == 12);
  CHECK(mask_count(10, 0.25) == 3);   // floor(2.5 + 0.5)
  CHECK(mask_count(10, 0.05) == 1);   // floor(0.5 + 0.5)
  CHECK(mask_count(7, 0.5) == 4);     // floor(3.5 + 0.5)
  CHECK(mask_count(100, 0.0) == 0);
}

TEST_CASE("mask_count is non-decreasing in the ratio") {
  int prev = 0;
  for (int k = 0; k <= 99; ++k) {
    int c = mask_count(64, k / 100.0);
    CHECK(c >= prev);
    prev = c;
  }
}

TEST_CASE("sample_mask bounds, determinism and validity") {
  Rng rng(17, "mask.a");
  MaskSpec m = sample_mask(16, 0.75, rng);
  CHECK(m.n_masked() == 12);
  CHECK(m.n_visible() == 4);
  CHECK_NOTHROW(m.validate());
  CHECK(m.visible().size() == 4);

  Rng r1(17, "mask.a");
  Rng r2(17, "mask.a");
  MaskSpec a = sample_mask(16, 0.75, r1);
  MaskSpec b = sample_mask(16, 0.75, r2);
  CHECK(a.masked == b.masked);

  Rng rng2(17, "mask.b");
  CHECK_THROWS_AS(sample_mask(16, 1.0, rng2), ConfigError);
  CHECK_THROWS_AS(sample_mask(16, -0.1, rng2), ConfigError);
  MaskSpec empty = sample_mask(16, 0.0, rng2);
  CHECK(empty.n_masked() == 0);
}

TEST_CASE("mask marginals are uniform") {
  const int n = 16, draws = 100000;
  std::vector<int> hits(n, 0);
  Rng rng(4, "mask.marginal");
  for (int d = 0; d < draws; ++d) {
    MaskSpec m = sample_mask(n, 0.5, rng);
    for (int idx : m.masked) ++hits[static_cast<size_t>(idx)];
  }
  for (int i = 0; i < n; ++i) {
    double freq = static_cast<double>(hits[static_cast<size_t>(i)]) / draws;
    CHECK(freq == doctest::Approx(0.5).epsilon(0.02));
  }
}

TEST_CASE("MaskSpec validate rejects bad index lists") {
  MaskSpec m;
  m.n_patches = 8;
  m.masked = {1, 1, 3};
  CHECK_THROWS_AS(m.validate(), ContractViolation);
  m.masked = {3, 1};
  CHECK_THROWS_AS(m.validate(), ContractViolation);
  m.masked = {7, 8};
  CHECK_THROWS_AS(m.validate(), ContractViolation);
  m.masked = {-1, 2};
  CHECK_THROWS_AS(m.validate(), ContractViolation);
}

TEST_CASE("reconstruction_target raw mode equals patchify") {
  Rng rng(5, "target.raw");
  Tensor img = Tensor::zeros({3, 8, 8});
  for (size_t i = 0; i < img.numel(); ++i)
    img.ptr()[i] = static_cast<float>(rng.uniform(0.0, 255.0));
  Tensor t = reconstruction_target(img, 4, false);
  Tensor p = patchify(img, 4);
  for (size_t i = 0; i < t.numel(); ++i) CHECK(t.ptr()[i] == p.ptr()[i]);
}

TEST_CASE("normalized target has zero mean, unit variance per patch") {
  Rng rng(6, "target.norm");
  Tensor img = Tensor::zeros({3, 8, 8});
  for (size_t i = 0; i < img.numel(); ++i)
    img.ptr()[i] = static_cast<float>(rng.uniform(0.0, 255.0));
  Tensor t = reconstruction_target(img, 4, true);
  const int n = t.size(0), d = t.size(1);
  for (int r = 0; r < n; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < d; ++j) mu += t.ptr()[r * d + j];
    mu /= d;
    for (int j = 0; j < d; ++j) {
      double c = t.ptr()[r * d + j] - mu;
      var += c * c;
    }
    var /= d;
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("target carries no gradient even from a tracked image") {
  Tensor img = Tensor::full({1, 4, 4}, 7.0f);
  for (int i = 0; i < 16; ++i) img.ptr()[i] = static_cast<float>(i * i);
  img.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor t = reconstruction_target(img, 2, true);
  CHECK_FALSE(t.requires_grad);
}

TEST_CASE("loss covers masked patches only") {
  MaskSpec mask;
  mask.n_patches = 4;
  mask.masked = {1, 3};
  Tensor target = Tensor::zeros({4, 2});
  Tensor pred = Tensor::zeros({4, 2});
  pred.ptr()[2] = 2.0f;  // row 1
  pred.ptr()[3] = 2.0f;
  float base = reconstruction_loss(pred, target, mask).item();
  CHECK(base == doctest::Approx(2.0f));  // (4+4+0+0)/4

  // Perturbing a visible row must not move the loss.
  pred.ptr()[0] = 50.0f;  // row 0 is visible
  CHECK(reconstruction_loss(pred, target, mask).item() == doctest::Approx(base));
}

TEST_CASE("loss scales quadratically with the residual") {
  MaskSpec mask;
  mask.n_patches = 3;
  mask.masked = {0, 2};
  Rng rng(8, "loss.quad");
  Tensor pred = Tensor::zeros({3, 5});
  for (size_t i = 0; i < pred.numel(); ++i)
    pred.ptr()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor target = Tensor::zeros({3, 5});
  float l1 = reconstruction_loss(pred, target, mask).item();
  Tensor doubled = scale(pred, 2.0f);
  float l2 = reconstruction_loss(doubled, target, mask).item();
  CHECK(l2 == doctest::Approx(4.0f * l1).epsilon(1e-4));
}

TEST_CASE("loss error contracts") {
  MaskSpec mask;
  mask.n_patches = 4;
  mask.masked = {};
  Tensor p = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(reconstruction_loss(p, p, mask), ContractViolation);
  mask.masked = {0};
  CHECK_THROWS_AS(reconstruction_loss(p, Tensor::zeros({4, 3}), mask), DimensionError);
  CHECK_THROWS_AS(reconstruction_loss(Tensor::zeros({5, 2}), Tensor::zeros({5, 2}), mask),
                  ContractViolation);
}

TEST_CASE("loss gradient flows only into masked prediction rows") {
  MaskSpec mask;
  mask.n_patches = 4;
  mask.masked = {1, 2};
  gradcheck::DTensor pred = gradcheck::DTensor::zeros({4, 3});
  for (size_t i = 0; i < pred.numel(); ++i) pred.ptr()[i] = 0.25 * static_cast<double>(i);
  pred.set_requires_grad();
  gradcheck::DTensor target = gradcheck::DTensor::zeros({4, 3});

  gradcheck::Report rep =
      gradcheck::check({&pred}, [&] { return reconstruction_loss(pred, target, mask); });
  CHECK(rep.max_rel_err <= 1e-4);

  gradcheck::DTape tape;
  gradcheck::DTape::Scope scope(tape);
  auto loss = reconstruction_loss(pred, target, mask);
  tape.backward(loss);
  auto g = tape.grad_tensor(pred);
  for (int c = 0; c < 3; ++c) {
    CHECK(g.ptr()[0 * 3 + c] == 0.0);  // visible rows get nothing
    CHECK(g.ptr()[3 * 3 + c] == 0.0);
    CHECK(g.ptr()[1 * 3 + c] != 0.0);
  }
}
