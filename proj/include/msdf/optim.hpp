#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msdf/params.hpp"
#include "msdf/tensor.hpp"

namespace msdf {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Moments are kept per parameter in the order
// the tensors were given.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  void step();
  void zero_grad();

  std::int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return config_; }

  // Optimizer moments as checkpoint tensors, for exact resume.
  void save_state(Checkpoint& ck, const std::string& prefix) const;
  void load_state(const Checkpoint& ck, const std::string& prefix);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWConfig config_;
  std::int64_t t_ = 0;
};

// A training run produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double global_grad_norm(std::span<const Tensor> params);
// Rescales gradients so the global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace msdf
