#pragma once

// Shared finite-difference gradient harness. The oracle is a central
// difference of the scalar loss with respect to every input element; it never
// touches the analytic backward path it checks.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qfs/ops.hpp"
#include "qfs/tensor.hpp"

namespace fdcheck {

template <typename T>
struct Result {
  double max_err = 0.0;   // max over elements of |fd - analytic| / max(1,|fd|,|analytic|)
  std::string where;
};

// f builds a fresh graph from the given inputs on every call (re-seeding any
// rng it uses internally so repeated evaluations are identical).
template <typename T>
Result<T> check_gradients(
    const std::function<qfs::Tensor<T>(std::vector<qfs::Tensor<T>>&)>& f,
    std::vector<qfs::Tensor<T>> inputs, qfs::Rng& rng, double h) {
  using qfs::Tensor;
  for (auto& in : inputs) in.set_requires_grad(true);

  // random but fixed projection weights make the loss a scalar
  Tensor<T> y = f(inputs);
  std::vector<T> wv(static_cast<size_t>(y.numel()));
  for (auto& w : wv) w = static_cast<T>(rng.uniform(-1.0, 1.0));
  Tensor<T> w = Tensor<T>::from(y.shape(), wv);

  auto loss_of = [&](std::vector<qfs::Tensor<T>>& ins) -> double {
    Tensor<T> out = f(ins);
    Tensor<T> l = qfs::sum_all(qfs::mul(out, w));
    return static_cast<double>(l.item());
  };

  Tensor<T> loss = qfs::sum_all(qfs::mul(y, w));
  loss.backward();

  std::vector<std::vector<T>> analytic;
  for (auto& in : inputs) analytic.push_back(in.grad());

  Result<T> res;
  qfs::NoGradGuard ng;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].mutable_values();
    for (size_t j = 0; j < vals.size(); ++j) {
      const T keep = vals[j];
      const double step = h * std::max(1.0, std::abs(static_cast<double>(keep)));
      vals[j] = keep + static_cast<T>(step);
      const double up = loss_of(inputs);
      vals[j] = keep - static_cast<T>(step);
      const double dn = loss_of(inputs);
      vals[j] = keep;
      const double fd = (up - dn) / (2.0 * step);
      const double an = static_cast<double>(analytic[i][j]);
      const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      if (err > res.max_err) {
        res.max_err = err;
        res.where = "input " + std::to_string(i) + " elem " + std::to_string(j);
      }
    }
  }
  return res;
}

}  // namespace fdcheck
