#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "podseg/autograd.hpp"

namespace podseg {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

namespace detail {

// Gradients below the floor are compared absolutely; structurally zero entries
// (a bias ahead of batch norm, key biases under softmax) carry ~1e-10 of
// central-difference rounding noise.
inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-5});
}

inline void note(GradCheckReport& r, double a, double n, const std::string& where) {
  const double e = rel_error(a, n);
  ++r.checked;
  if (r.worst.empty() || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = where;
    r.analytic = a;
    r.numeric = n;
  }
}

}  // namespace detail

// Compares analytic gradients of a scalar function against central
// differences. `build` receives a fresh graph and one leaf per input tensor.
template <typename Build>
GradCheckReport grad_check(Build&& build, std::vector<Tensor<double>*> inputs, double tol = 1e-4,
                           double h = 1e-5) {
  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* grads) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (auto* t : inputs) leaves.push_back(g.leaf(*t));
    Var<double> loss = build(g, leaves);
    if (with_grad) {
      g.backward(loss);
      for (auto v : leaves) grads->push_back(g.has_grad(v) ? g.grad(v) : Tensor<double>(g.value(v).shape()));
    }
    return loss.value()[0];
  };
  std::vector<Tensor<double>> analytic;
  evaluate(true, &analytic);
  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = *inputs[t];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = evaluate(false, nullptr);
      x[i] = orig - h;
      const double fm = evaluate(false, nullptr);
      x[i] = orig;
      detail::note(report, analytic[t][i], (fp - fm) / (2 * h),
                   "input" + std::to_string(t) + "[" + std::to_string(i) + "]");
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

// Same check over every trainable entry of a parameter set. `build` creates
// the loss on the given graph, binding parameters through Graph::param.
template <typename Build>
GradCheckReport grad_check_params(Build&& build, ModelParams<double>& params, double tol = 1e-4,
                                  double h = 1e-5) {
  params.zero_grad();
  {
    Graph<double> g;
    Var<double> loss = build(g);
    g.backward(loss);
  }
  std::map<std::string, Tensor<double>> analytic;
  for (auto& [name, p] : params)
    if (p.trainable && !params.is_frozen(name)) analytic[name] = p.grad;
  auto evaluate = [&] {
    Graph<double> g;
    return build(g).value()[0];
  };
  GradCheckReport report;
  for (auto& [name, p] : params) {
    if (!p.trainable || params.is_frozen(name)) continue;
    auto& x = p.value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = evaluate();
      x[i] = orig - h;
      const double fm = evaluate();
      x[i] = orig;
      detail::note(report, analytic[name][i], (fp - fm) / (2 * h), name + "[" + std::to_string(i) + "]");
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace podseg
