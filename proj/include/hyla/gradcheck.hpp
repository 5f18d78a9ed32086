#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "hyla/tensor.hpp"

namespace hyla {

// Central finite-difference check of reverse-mode gradients.
//
// f builds a scalar loss from the given leaves under the supplied tape; it is
// called once with recording on (for analytic gradients) and then repeatedly
// with recording off for the perturbed evaluations. Returns the max over
// sampled coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
inline double grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> leaves,
                         double epsilon = 1e-5, int samples_per_leaf = 20, uint64_t seed = 7) {
  for (Tensor& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  Tape tape;
  Tensor loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const Tensor& leaf : leaves) analytic.push_back(leaf.grad().values());

  auto eval = [&]() {
    Tape t;
    t.set_recording(false);
    return f(t).item();
  };

  Rng rng(seed);
  double max_err = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    size_t n = leaf.size();
    if (n == 0) continue;
    std::vector<size_t> coords;
    if (n <= static_cast<size_t>(samples_per_leaf)) {
      for (size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < samples_per_leaf; ++i)
        coords.push_back(static_cast<size_t>(rng.uniform_int(static_cast<int>(n))));
    }
    for (size_t c : coords) {
      double saved = leaf[c];
      leaf[c] = saved + epsilon;
      double up = eval();
      leaf[c] = saved - epsilon;
      double down = eval();
      leaf[c] = saved;
      double numeric = (up - down) / (2.0 * epsilon);
      double a = analytic[li][c];
      double err = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace hyla
