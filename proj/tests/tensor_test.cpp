#include <doctest.h>

#include "aemim/ops.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

using namespace aemim;

TEST_CASE("construction and element access") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.ndim() == 2);
  CHECK(z.size(0) == 2);
  CHECK(z.size(1) == 3);
  for (size_t i = 0; i < 6; ++i) CHECK(z.ptr()[i] == 0.0f);

  Tensor f = Tensor::full({2, 2}, 3.5f);
  for (size_t i = 0; i < 4; ++i) CHECK(f.ptr()[i] == 3.5f);

  Tensor v = Tensor::from_values({3}, {1.0f, 2.0f, 3.0f});
  CHECK(v.ptr()[2] == 3.0f);
  CHECK_THROWS_AS(Tensor::from_values({2}, {1.0f, 2.0f, 3.0f}), DimensionError);

  Tensor s = Tensor::scalar(7.0f);
  CHECK(s.numel() == 1);
  CHECK(s.item() == 7.0f);
}

TEST_CASE("clone is a deep copy") {
  Tensor a = Tensor::from_values({2}, {1.0f, 2.0f});
  Tensor b = a.clone();
  b.ptr()[0] = 9.0f;
  CHECK(a.ptr()[0] == 1.0f);
}

TEST_CASE("polynomial backward: d(x*x + 3x)/dx at x=2 is 7") {
  Tensor x = Tensor::scalar(2.0f).set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor loss = add(mul(x, x), scale(x, 3.0f));
  CHECK(loss.item() == doctest::Approx(10.0f));
  tape.backward(loss);
  CHECK(tape.grad_tensor(x).item() == doctest::Approx(7.0f));
}

TEST_CASE("a leaf used in several ops accumulates one gradient") {
  Tensor x = Tensor::from_values({2}, {3.0f, -1.0f}).set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  // sum(x*x) + sum(x) uses x three times.
  Tensor loss = add(sum_all(mul(x, x)), sum_all(x));
  tape.backward(loss);
  Tensor g = tape.grad_tensor(x);
  CHECK(g.ptr()[0] == doctest::Approx(7.0f));   // 2*3 + 1
  CHECK(g.ptr()[1] == doctest::Approx(-1.0f));  // 2*(-1) + 1
}

TEST_CASE("backward requires a scalar loss on this tape") {
  Tensor x = Tensor::from_values({2}, {1.0f, 2.0f}).set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);

  Tensor stray = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(tape.backward(stray), ContractViolation);
}

TEST_CASE("grad on a non-differentiable tensor is a contract violation") {
  Tensor x = Tensor::scalar(1.0f);
  Tape tape;
  CHECK_THROWS_AS(tape.grad(x), ContractViolation);
}

TEST_CASE("grad_tensor is zero for a leaf the loss never touched") {
  Tensor x = Tensor::scalar(2.0f).set_requires_grad();
  Tensor unused = Tensor::from_values({2}, {1.0f, 1.0f}).set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor loss = mul(x, x);
  tape.backward(loss);
  Tensor g = tape.grad_tensor(unused);
  CHECK(g.ptr()[0] == 0.0f);
  CHECK(g.ptr()[1] == 0.0f);
}

TEST_CASE("outputs of a dead tape act as constants on a new tape") {
  Tensor x = Tensor::scalar(3.0f).set_requires_grad();
  Tensor carried;
  {
    Tape old;
    Tape::Scope scope(old);
    carried = mul(x, x);  // 9, recorded on `old`
  }
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = Tensor::scalar(2.0f).set_requires_grad();
  Tensor loss = mul(carried, y);
  tape.backward(loss);
  CHECK(tape.grad_tensor(y).item() == doctest::Approx(9.0f));
  // x contributed only through the dead tape; no gradient here.
  CHECK(tape.grad_tensor(x).item() == 0.0f);
}

TEST_CASE("ops run untaped when no tape is active") {
  Tensor x = Tensor::scalar(2.0f).set_requires_grad();
  Tensor y = mul(x, x);
  CHECK(y.item() == doctest::Approx(4.0f));
  CHECK_FALSE(y.requires_grad);
}

TEST_CASE("detach shares values and blocks gradient flow") {
  Tensor x = Tensor::from_values({2}, {1.0f, 4.0f}).set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor d = detach(x);
  CHECK(d.ptr() == x.ptr());
  CHECK_FALSE(d.requires_grad);
  Tensor loss = sum_all(mul(d, x));  // gradient flows through the second factor only
  tape.backward(loss);
  Tensor g = tape.grad_tensor(x);
  CHECK(g.ptr()[0] == doctest::Approx(1.0f));
  CHECK(g.ptr()[1] == doctest::Approx(4.0f));
}

TEST_CASE("shape mismatch errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    add(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("backward is deterministic across repeated runs") {
  Rng rng(11, "tensor.det");
  Tensor x = Tensor::zeros({16});
  for (size_t i = 0; i < 16; ++i) x.ptr()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  x.set_requires_grad();
  std::vector<float> first;
  for (int run = 0; run < 3; ++run) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = mse(gelu(x), Tensor::zeros({16}));
    tape.backward(loss);
    Tensor g = tape.grad_tensor(x);
    if (run == 0) {
      first.assign(g.ptr(), g.ptr() + g.numel());
    } else {
      for (size_t i = 0; i < g.numel(); ++i) CHECK(g.ptr()[i] == first[static_cast<size_t>(i)]);
    }
  }
}
