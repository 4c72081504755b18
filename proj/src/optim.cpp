#include "msdf/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace msdf {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) +
                            config_.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::save_state(Checkpoint& ck, const std::string& prefix) const {
  ck.meta[prefix + "step"] = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.tensors.push_back({prefix + "m." + std::to_string(i), {m_[i].size()}, m_[i]});
    ck.tensors.push_back({prefix + "v." + std::to_string(i), {v_[i].size()}, v_[i]});
  }
}

void AdamW::load_state(const Checkpoint& ck, const std::string& prefix) {
  t_ = ck.meta.at(prefix + "step").get<std::int64_t>();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto* m = ck.find(prefix + "m." + std::to_string(i));
    const auto* v = ck.find(prefix + "v." + std::to_string(i));
    if (m == nullptr || v == nullptr || m->values.size() != m_[i].size() ||
        v->values.size() != v_[i].size()) {
      throw std::runtime_error("optimizer state does not match parameter " +
                               std::to_string(i));
    }
    m_[i] = m->values;
    v_[i] = v->values;
  }
}

double global_grad_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace msdf
