#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aemim/ops.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

// Central-difference gradient oracle, double precision. Analytic gradients
// come from one taped forward+backward; finite differences re-run the same
// forward closure with no tape, nudging one element at a time.
namespace gradcheck {

using DTensor = aemim::TensorT<double>;
using DTape = aemim::TapeT<double>;

struct Report {
  double max_rel_err = 0.0;
  std::string worst;  // "leaf<k>[i]" of the worst element
  int64_t checked = 0;
};

inline double rel_err(double a, double f) {
  return std::abs(a - f) / std::max({1.0, std::abs(a), std::abs(f)});
}

// leaves must have requires_grad set and feed the forward closure through
// their shared data buffers.
inline Report check(const std::vector<DTensor*>& leaves,
                    const std::function<DTensor()>& forward, double step = 1e-6) {
  Report rep;
  std::vector<DTensor> grads;
  {
    DTape tape;
    DTape::Scope scope(tape);
    DTensor loss = forward();
    tape.backward(loss);
    for (const DTensor* leaf : leaves) grads.push_back(tape.grad_tensor(*leaf));
  }
  for (size_t li = 0; li < leaves.size(); ++li) {
    DTensor* leaf = leaves[li];
    for (size_t i = 0; i < leaf->numel(); ++i) {
      double orig = (*leaf->data)[i];
      (*leaf->data)[i] = orig + step;
      double up = forward().item();
      (*leaf->data)[i] = orig - step;
      double dn = forward().item();
      (*leaf->data)[i] = orig;
      double fd = (up - dn) / (2.0 * step);
      double an = (*grads[li].data)[i];
      double e = rel_err(an, fd);
      ++rep.checked;
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst = "leaf" + std::to_string(li) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

inline DTensor random_dtensor(const aemim::Shape& shape, aemim::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  DTensor t = DTensor::zeros(shape);
  for (size_t i = 0; i < t.numel(); ++i) (*t.data)[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace gradcheck
