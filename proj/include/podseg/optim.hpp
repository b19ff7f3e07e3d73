#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/params.hpp"

namespace podseg {

template <typename T>
struct OptimState {
  double weight_decay = 0.05;
  double base_lr = 1e-5;
  double max_lr = 1e-3;
  std::int64_t cycle_len = 1000;  // steps per triangular cycle
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

// Triangular cyclic schedule: base -> max over the first half cycle, back to
// base over the second.
template <typename T>
double cyclic_lr(std::int64_t step, const OptimState<T>& opt) {
  if (opt.cycle_len <= 0) throw std::invalid_argument("cyclic_lr: cycle_len must be positive");
  const std::int64_t pos = step % opt.cycle_len;
  const double half = static_cast<double>(opt.cycle_len) / 2.0;
  const double span = opt.max_lr - opt.base_lr;
  const double p = static_cast<double>(pos);
  if (p <= half) return opt.base_lr + span * (p / half);
  return opt.max_lr - span * ((p - half) / (static_cast<double>(opt.cycle_len) - half));
}

// One AdamW update with decoupled weight decay over every trainable,
// non-frozen parameter, using the gradients accumulated in `params`.
template <typename T>
void adamw_step(ModelParams<T>& params, OptimState<T>& opt, double lr) {
  for (auto& [name, p] : params) {
    if (!p.trainable || params.is_frozen(name)) continue;
    for (T gv : p.grad.values())
      if (!std::isfinite(static_cast<double>(gv))) throw NonFiniteGradient(name);
  }
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr_t = static_cast<T>(lr), wd = static_cast<T>(opt.weight_decay), eps = static_cast<T>(opt.eps);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (auto& [name, p] : params) {
    if (!p.trainable || params.is_frozen(name)) continue;
    auto& m = opt.first_moment[name];
    auto& v = opt.second_moment[name];
    if (m.empty()) m = Tensor<T>(p.value.shape());
    if (v.empty()) v = Tensor<T>(p.value.shape());
    auto& theta = p.value;
    const auto& grad = p.grad;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] * inv_bc1;
      const T vhat = v[i] * inv_bc2;
      theta[i] -= lr_t * (mhat / (std::sqrt(vhat) + eps) + wd * theta[i]);
    }
  }
}

template <typename T>
std::vector<NamedTensor> optim_to_named(const OptimState<T>& opt) {
  std::vector<NamedTensor> out;
  Tensor<float> step(1, 1);
  step[0] = static_cast<float>(opt.step);
  out.push_back({"optim.step", step});
  for (const auto& [name, m] : opt.first_moment) out.push_back({"optim.m." + name, m.template cast<float>()});
  for (const auto& [name, v] : opt.second_moment) out.push_back({"optim.v." + name, v.template cast<float>()});
  return out;
}

template <typename T>
void optim_from_named(OptimState<T>& opt, const std::vector<NamedTensor>& tensors) {
  for (const auto& t : tensors) {
    if (t.name == "optim.step") {
      opt.step = static_cast<std::int64_t>(t.value[0]);
    } else if (t.name.rfind("optim.m.", 0) == 0) {
      opt.first_moment[t.name.substr(8)] = t.value.template cast<T>();
    } else if (t.name.rfind("optim.v.", 0) == 0) {
      opt.second_moment[t.name.substr(8)] = t.value.template cast<T>();
    }
  }
}

}  // namespace podseg
