#pragma once

// Central finite-difference oracle. Lives in test code only so it never shares
// a path with the analytic gradients it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "msdf/tensor.hpp"

namespace msdf::testing {

// Max-norm relative error between two gradient vectors:
//   max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)
inline double relative_error(const std::vector<double>& analytic,
                             const std::vector<double>& numeric, double floor = 1e-12) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& param,
                                            double h = 1e-5) {
  std::vector<double> g(param.numel());
  auto w = param.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double fp = f();
    w[i] = orig - h;
    const double fm = f();
    w[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Runs `build` once with recording to get analytic gradients for `params`,
// then compares each against finite differences. Returns the worst relative
// error per parameter, in order.
inline std::vector<double> check_gradients(const std::function<Tensor()>& build,
                                           std::vector<Tensor> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  build().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  auto value = [&] {
    NoGradGuard guard;
    return build().item();
  };
  std::vector<double> errs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    errs.push_back(relative_error(analytic[i], numeric_gradient(value, params[i], h)));
  }
  return errs;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                            double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace msdf::testing
