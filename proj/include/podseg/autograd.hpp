#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/params.hpp"
#include "podseg/reduce.hpp"
#include "podseg/tensor.hpp"

namespace podseg {

template <typename T>
class Graph;

// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// tape backwards is a valid topological order for the backward pass.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(const Tensor<T>& grad_out)>;

  Var<T> constant(Tensor<T> v) { return emit(std::move(v), false); }
  Var<T> leaf(Tensor<T> v) { return emit(std::move(v), true); }

  // Leaf bound to a model parameter. Frozen parameters and buffers produce
  // constant nodes, which removes them (and everything only they feed) from
  // the backward pass.
  Var<T> param(ModelParams<T>& params, const std::string& name) {
    auto& p = params.at(name);
    const bool rg = p.trainable && !params.is_frozen(name);
    Var<T> v = emit(p.value, rg);
    if (rg) nodes_[v.id].sink = &p;
    return v;
  }

  Var<T> emit(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void set_backward(Var<T> v, Backward fn) { nodes_[v.id].backward = std::move(fn); }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of a node, allocated on first use.
  Tensor<T>& grad(Var<T> v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return n.grad;
  }
  bool has_grad(Var<T> v) const { return !nodes_[v.id].grad.empty(); }

  void backward(Var<T> loss) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!requires_grad(loss)) return;
    grad(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(n.grad);
      if (n.sink) {
        auto& dst = n.sink->grad.storage();
        const auto& src = n.grad.storage();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    Param<T>* sink = nullptr;
  };
  std::deque<Node> nodes_;
};

namespace ag {

namespace detail {

template <typename T>
bool any_rg(std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (v.graph->requires_grad(v)) return true;
  return false;
}

template <typename T>
Var<T> record(Graph<T>& g, Tensor<T> value, std::initializer_list<Var<T>> parents,
              const std::function<typename Graph<T>::Backward(Var<T>)>& make_backward) {
  const bool rg = any_rg(parents);
  Var<T> out = g.emit(std::move(value), rg);
  if (rg) g.set_backward(out, make_backward(out));
  return out;
}

inline void check(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::check(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor<T> out(n, m);
  kernels::matmul(av.data(), bv.data(), out.data(), n, k, m);
  return detail::record<T>(g, std::move(out), {a, b}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      if (g.requires_grad(a)) kernels::matmul_nt_acc(go.data(), g.value(b).data(), g.grad(a).data(), n, k, m);
      if (g.requires_grad(b)) kernels::matmul_tn_acc(g.value(a).data(), go.data(), g.grad(b).data(), n, k, m);
    };
  });
}

// x [n x k] * w [k x m] + bias [1 x m]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  auto& g = *x.graph;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  detail::check(xv.cols() == wv.rows(), "linear: input width does not match weight rows");
  detail::check(bv.size() == wv.cols(), "linear: bias width does not match weight columns");
  const std::size_t n = xv.rows(), k = xv.cols(), m = wv.cols();
  Tensor<T> out(n, m);
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.data(), bv.data() + m, out.data() + i * m);
  kernels::matmul(xv.data(), wv.data(), out.data(), n, k, m, true);
  return detail::record<T>(g, std::move(out), {x, w, bias}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      if (g.requires_grad(x)) kernels::matmul_nt_acc(go.data(), g.value(w).data(), g.grad(x).data(), n, k, m);
      if (g.requires_grad(w)) kernels::matmul_tn_acc(g.value(x).data(), go.data(), g.grad(w).data(), n, k, m);
      if (g.requires_grad(bias)) {
        auto& gb = g.grad(bias);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
      }
    };
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = *a.graph;
  detail::check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::record<T>(g, std::move(out), {a, b}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      for (Var<T> p : {a, b}) {
        if (!g.requires_grad(p)) continue;
        auto& gp = g.grad(p);
        for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
      }
    };
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& g = *a.graph;
  detail::check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::record<T>(g, std::move(out), {a, b}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      const auto& av = g.value(a);
      const auto& bv2 = g.value(b);
      if (g.requires_grad(a)) {
        auto& ga = g.grad(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
      }
      if (g.requires_grad(b)) {
        auto& gb = g.grad(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    };
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
    };
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T> self) {
    return [=, &g](const Tensor<T>& go) {
      const auto& ov = g.value(self);
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (ov[i] > T(0)) ga[i] += go[i];
    };
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = sigmoid_scalar(v);
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T> self) {
    return [=, &g](const Tensor<T>& go) {
      const auto& s = g.value(self);
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s[i] * (T(1) - s[i]);
    };
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::check(av.rows() == bv.rows(), "concat_cols: row counts differ");
  const std::size_t n = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor<T> out(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(av.data() + i * ca, av.data() + (i + 1) * ca, out.data() + i * (ca + cb));
    std::copy(bv.data() + i * cb, bv.data() + (i + 1) * cb, out.data() + i * (ca + cb) + ca);
  }
  return detail::record<T>(g, std::move(out), {a, b}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      const std::size_t c = ca + cb;
      if (g.requires_grad(a)) {
        auto& ga = g.grad(a);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += go[i * c + j];
      }
      if (g.requires_grad(b)) {
        auto& gb = g.grad(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += go[i * c + ca + j];
      }
    };
  });
}

// Row gather (the voxel->point propagation primitive). index -1 yields zeros.
template <typename T>
Var<T> gather_rows(Var<T> a, std::shared_ptr<const IndexList> index) {
  auto& g = *a.graph;
  Tensor<T> out = kernels::gather_rows(a.value(), *index);
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& ga = g.grad(a);
      const std::size_t c = go.cols();
      for (std::size_t i = 0; i < index->size(); ++i) {
        const auto src = (*index)[i];
        if (src < 0) continue;
        T* dst = ga.data() + static_cast<std::size_t>(src) * c;
        const T* gr = go.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += gr[j];
      }
    };
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, const IndexList& index) {
  return gather_rows(a, std::make_shared<const IndexList>(index));
}

// Per-group channel-wise reduction (the point->voxel aggregation primitive).
// Max routes each channel's gradient to its argmax row only.
template <typename T>
Var<T> segment_reduce(Var<T> a, std::shared_ptr<const Groups> groups, Reduce mode) {
  auto& g = *a.graph;
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Tensor<T> out = kernels::segment_reduce(a.value(), *groups, mode, mode == Reduce::max ? argmax.get() : nullptr);
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& ga = g.grad(a);
      const std::size_t c = go.cols();
      for (std::size_t k = 0; k < groups->size(); ++k) {
        const auto& members = (*groups)[k];
        const T* gr = go.data() + k * c;
        if (mode == Reduce::max) {
          for (std::size_t j = 0; j < c; ++j) ga[static_cast<std::size_t>((*argmax)[k * c + j]) * c + j] += gr[j];
        } else {
          const T w = mode == Reduce::mean ? T(1) / static_cast<T>(members.size()) : T(1);
          for (auto m : members) {
            T* dst = ga.data() + static_cast<std::size_t>(m) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += w * gr[j];
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> segment_reduce(Var<T> a, const Groups& groups, Reduce mode) {
  return segment_reduce(a, std::make_shared<const Groups>(groups), mode);
}

template <typename T>
Var<T> mask_rows(Var<T> a, std::shared_ptr<const std::vector<std::uint8_t>> keep) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  const std::size_t c = out.cols();
  detail::check(keep->size() == out.rows(), "mask_rows: mask length differs from rows");
  for (std::size_t i = 0; i < keep->size(); ++i)
    if (!(*keep)[i]) std::fill(out.data() + i * c, out.data() + (i + 1) * c, T(0));
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < keep->size(); ++i)
        if ((*keep)[i])
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[i * c + j];
    };
  });
}

// Per-row standardization followed by an affine map.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  auto& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  detail::check(gain.value().size() == c && bias.value().size() == c, "layer_norm: affine width mismatch");
  auto xhat = std::make_shared<Tensor<T>>(n, c);
  auto inv_std = std::make_shared<std::vector<T>>(n);
  Tensor<T> out(n, c);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = xv.data() + i * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += r[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (r[j] - mean) * is;
      (*xhat)(i, j) = h;
      out(i, j) = gv[j] * h + bv[j];
    }
  }
  return detail::record<T>(g, std::move(out), {x, gain, bias}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      const auto& gv2 = g.value(gain);
      if (g.requires_grad(gain) || g.requires_grad(bias)) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            if (g.requires_grad(gain)) g.grad(gain)[j] += go(i, j) * (*xhat)(i, j);
            if (g.requires_grad(bias)) g.grad(bias)[j] += go(i, j);
          }
      }
      if (!g.requires_grad(x)) return;
      auto& gx = g.grad(x);
      std::vector<T> dh(c);
      for (std::size_t i = 0; i < n; ++i) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t j = 0; j < c; ++j) {
          dh[j] = go(i, j) * gv2[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * (*xhat)(i, j);
        }
        mean_dh /= static_cast<T>(c);
        mean_dh_h /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j)
          gx(i, j) += (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)(i, j) * mean_dh_h);
      }
    };
  });
}

struct BatchNormState {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-column batch normalization. Training mode standardizes with batch
// statistics and updates the running buffers; eval mode uses the buffers.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Param<T>& running_mean, Param<T>& running_var,
                  bool training, BatchNormState cfg = {}) {
  auto& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  detail::check(gamma.value().size() == c && running_mean.value.size() == c, "batch_norm: width mismatch");
  const T eps = static_cast<T>(cfg.eps);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(n, c);
  if (!training || n == 0) {
    std::vector<T> scale_(c);
    for (std::size_t j = 0; j < c; ++j) scale_[j] = gv[j] / std::sqrt(running_var.value[j] + eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) = (xv(i, j) - running_mean.value[j]) * scale_[j] + bv[j];
    auto rv = std::make_shared<std::vector<T>>(c);
    for (std::size_t j = 0; j < c; ++j) (*rv)[j] = T(1) / std::sqrt(running_var.value[j] + eps);
    auto xhat = std::make_shared<Tensor<T>>(n, c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) (*xhat)(i, j) = (xv(i, j) - running_mean.value[j]) * (*rv)[j];
    return detail::record<T>(g, std::move(out), {x, gamma, beta}, [=, &g](Var<T>) {
      return [=, &g](const Tensor<T>& go) {
        const auto& gv2 = g.value(gamma);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            if (g.requires_grad(x)) g.grad(x)(i, j) += go(i, j) * gv2[j] * (*rv)[j];
            if (g.requires_grad(gamma)) g.grad(gamma)[j] += go(i, j) * (*xhat)(i, j);
            if (g.requires_grad(beta)) g.grad(beta)[j] += go(i, j);
          }
      };
    });
  }
  std::vector<T> mean(c, T(0)), var(c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += xv(i, j);
  for (auto& m : mean) m /= static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) var[j] += (xv(i, j) - mean[j]) * (xv(i, j) - mean[j]);
  for (auto& v : var) v /= static_cast<T>(n);
  auto inv_std = std::make_shared<std::vector<T>>(c);
  auto xhat = std::make_shared<Tensor<T>>(n, c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = T(1) / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv(i, j) - mean[j]) * (*inv_std)[j];
      (*xhat)(i, j) = h;
      out(i, j) = gv[j] * h + bv[j];
    }
  const T mom = static_cast<T>(cfg.momentum);
  for (std::size_t j = 0; j < c; ++j) {
    const T unbiased = n > 1 ? var[j] * static_cast<T>(n) / static_cast<T>(n - 1) : var[j];
    running_mean.value[j] = (T(1) - mom) * running_mean.value[j] + mom * mean[j];
    running_var.value[j] = (T(1) - mom) * running_var.value[j] + mom * unbiased;
  }
  return detail::record<T>(g, std::move(out), {x, gamma, beta}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      const auto& gv2 = g.value(gamma);
      std::vector<T> sum_dh(c, T(0)), sum_dh_h(c, T(0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T d = go(i, j);
          if (g.requires_grad(gamma)) g.grad(gamma)[j] += d * (*xhat)(i, j);
          if (g.requires_grad(beta)) g.grad(beta)[j] += d;
          sum_dh[j] += d * gv2[j];
          sum_dh_h[j] += d * gv2[j] * (*xhat)(i, j);
        }
      if (!g.requires_grad(x)) return;
      auto& gx = g.grad(x);
      const T inv_n = T(1) / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = go(i, j) * gv2[j];
          gx(i, j) += (*inv_std)[j] * (dh - sum_dh[j] * inv_n - (*xhat)(i, j) * sum_dh_h[j] * inv_n);
        }
    };
  });
}

template <typename T>
void softmax_row(const T* in, T* out, std::size_t k) {
  T mx = in[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
  T sum = 0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  auto& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), k = xv.cols();
  detail::check(k >= 1, "softmax: need at least one column");
  Tensor<T> out(n, k);
  for (std::size_t i = 0; i < n; ++i) softmax_row(xv.data() + i * k, out.data() + i * k, k);
  return detail::record<T>(g, std::move(out), {x}, [=, &g](Var<T> self) {
    return [=, &g](const Tensor<T>& go) {
      const auto& p = g.value(self);
      auto& gx = g.grad(x);
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += p(i, j) * go(i, j);
        for (std::size_t j = 0; j < k; ++j) gx(i, j) += p(i, j) * (go(i, j) - dot);
      }
    };
  });
}

// Mean softmax cross-entropy over rows, computed from logits.
template <typename T>
Var<T> cross_entropy_logits(Var<T> logits, std::shared_ptr<const std::vector<int>> labels) {
  auto& g = *logits.graph;
  const auto& z = logits.value();
  const std::size_t n = z.rows(), k = z.cols();
  detail::check(labels->size() == n, "cross_entropy: label count differs from rows");
  auto probs = std::make_shared<Tensor<T>>(n, k);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    softmax_row(z.data() + i * k, probs->data() + i * k, k);
    const int y = (*labels)[i];
    detail::check(y >= 0 && static_cast<std::size_t>(y) < k, "cross_entropy: label out of range");
    T mx = z(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z(i, j));
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z(i, j) - mx);
    loss += mx + std::log(s) - z(i, static_cast<std::size_t>(y));
  }
  Tensor<T> out(1, 1);
  out[0] = n ? loss / static_cast<T>(n) : T(0);
  return detail::record<T>(g, std::move(out), {logits}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      if (n == 0) return;
      auto& gz = g.grad(logits);
      const T w = go[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
          gz(i, j) += w * ((*probs)(i, j) - (static_cast<int>(j) == (*labels)[i] ? T(1) : T(0)));
    };
  });
}

// Mean negative log-likelihood of the labelled class, computed from probabilities.
template <typename T>
Var<T> nll_probs(Var<T> probs, std::shared_ptr<const std::vector<int>> labels) {
  auto& g = *probs.graph;
  const auto& p = probs.value();
  const std::size_t n = p.rows(), k = p.cols();
  detail::check(labels->size() == n, "nll: label count differs from rows");
  const T floor = std::numeric_limits<T>::min();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = (*labels)[i];
    detail::check(y >= 0 && static_cast<std::size_t>(y) < k, "nll: label out of range");
    loss -= std::log(std::max(p(i, static_cast<std::size_t>(y)), floor));
  }
  Tensor<T> out(1, 1);
  out[0] = n ? loss / static_cast<T>(n) : T(0);
  return detail::record<T>(g, std::move(out), {probs}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& gp = g.grad(probs);
      for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>((*labels)[i]);
        gp(i, y) -= go[0] / (static_cast<T>(n) * std::max(g.value(probs)(i, y), floor));
      }
    };
  });
}

// Mean binary cross-entropy of sigmoid(logits) against soft targets in [0,1].
template <typename T>
Var<T> bce_logits(Var<T> logits, std::shared_ptr<const std::vector<T>> targets) {
  auto& g = *logits.graph;
  const auto& z = logits.value();
  const std::size_t n = z.size();
  detail::check(targets->size() == n, "bce: target count differs");
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = z[i];
    // softplus(x) - t*x, stable for both signs
    const T sp = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    loss += sp - (*targets)[i] * x;
  }
  Tensor<T> out(1, 1);
  out[0] = n ? loss / static_cast<T>(n) : T(0);
  return detail::record<T>(g, std::move(out), {logits}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& gz = g.grad(logits);
      for (std::size_t i = 0; i < n; ++i)
        gz[i] += go[0] * (sigmoid_scalar(g.value(logits)[i]) - (*targets)[i]) / static_cast<T>(n);
    };
  });
}

// Mean over masked rows of the L1 distance between offsets and targets.
template <typename T>
Var<T> offset_l1_loss(Var<T> offsets, std::shared_ptr<const Tensor<T>> targets,
                      std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  auto& g = *offsets.graph;
  const auto& o = offsets.value();
  const std::size_t n = o.rows(), c = o.cols();
  std::size_t count = 0;
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(*mask)[i]) continue;
    ++count;
    for (std::size_t j = 0; j < c; ++j) loss += std::abs(o(i, j) - (*targets)(i, j));
  }
  Tensor<T> out(1, 1);
  out[0] = count ? loss / static_cast<T>(count) : T(0);
  return detail::record<T>(g, std::move(out), {offsets}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      if (!count) return;
      auto& gz = g.grad(offsets);
      const auto& ov = g.value(offsets);
      const T w = go[0] / static_cast<T>(count);
      for (std::size_t i = 0; i < n; ++i) {
        if (!(*mask)[i]) continue;
        for (std::size_t j = 0; j < c; ++j) {
          const T d = ov(i, j) - (*targets)(i, j);
          gz(i, j) += d > T(0) ? w : (d < T(0) ? -w : T(0));
        }
      }
    };
  });
}

// Mean over masked rows of minus the cosine between offset and target
// direction. Rows where either vector has zero norm contribute zero.
template <typename T>
Var<T> offset_dir_loss(Var<T> offsets, std::shared_ptr<const Tensor<T>> targets,
                       std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  auto& g = *offsets.graph;
  const auto& o = offsets.value();
  const std::size_t n = o.rows(), c = o.cols();
  std::size_t count = 0;
  T loss = 0;
  auto norms = [c](const T* r) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += r[j] * r[j];
    return std::sqrt(s);
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!(*mask)[i]) continue;
    ++count;
    const T no = norms(o.data() + i * c), nt = norms(targets->data() + i * c);
    if (no == T(0) || nt == T(0)) continue;
    T dot = 0;
    for (std::size_t j = 0; j < c; ++j) dot += o(i, j) * (*targets)(i, j);
    loss -= dot / (no * nt);
  }
  Tensor<T> out(1, 1);
  out[0] = count ? loss / static_cast<T>(count) : T(0);
  return detail::record<T>(g, std::move(out), {offsets}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      if (!count) return;
      auto& gz = g.grad(offsets);
      const auto& ov = g.value(offsets);
      const T w = go[0] / static_cast<T>(count);
      for (std::size_t i = 0; i < n; ++i) {
        if (!(*mask)[i]) continue;
        const T no = norms(ov.data() + i * c), nt = norms(targets->data() + i * c);
        if (no == T(0) || nt == T(0)) continue;
        T cosv = 0;
        for (std::size_t j = 0; j < c; ++j) cosv += ov(i, j) * (*targets)(i, j);
        cosv /= no * nt;
        for (std::size_t j = 0; j < c; ++j) {
          const T uo = ov(i, j) / no, ut = (*targets)(i, j) / nt;
          gz(i, j) -= w * (ut - cosv * uo) / no;
        }
      }
    };
  });
}

// Multi-head scaled dot-product attention restricted to windows. Each window
// lists row indices of q/k/v; negative entries are padding slots and take no
// part in the computation. Rows not listed in any window get zero output.
// Windows must be disjoint.
template <typename T>
Var<T> windowed_attention(Var<T> q, Var<T> k, Var<T> v, std::shared_ptr<const Groups> windows,
                          std::size_t heads) {
  auto& g = *q.graph;
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const std::size_t n = qv.rows(), c = qv.cols();
  detail::check(kv.rows() == n && vv.rows() == n && kv.cols() == c && vv.cols() == c,
                "attention: q/k/v shapes differ");
  detail::check(heads >= 1 && c % heads == 0, "attention: channels not divisible by heads");
  const std::size_t dh = c / heads;
  const T scale_ = T(1) / std::sqrt(static_cast<T>(dh));

  // Compacted valid rows per window, and the softmax weights for backward.
  auto valid = std::make_shared<Groups>();
  auto probs = std::make_shared<std::vector<T>>();
  auto prob_offset = std::make_shared<std::vector<std::size_t>>();
  valid->reserve(windows->size());
  std::size_t total = 0;
  for (const auto& w : *windows) {
    IndexList rows;
    for (auto s : w)
      if (s >= 0) rows.push_back(s);
    prob_offset->push_back(total);
    total += heads * rows.size() * rows.size();
    valid->push_back(std::move(rows));
  }
  probs->resize(total);
  Tensor<T> out(n, c);
  std::vector<T> scores;
  for (std::size_t w = 0; w < valid->size(); ++w) {
    const auto& rows = (*valid)[w];
    const std::size_t m = rows.size();
    scores.resize(m);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t a = 0; a < m; ++a) {
        const T* qa = qv.data() + static_cast<std::size_t>(rows[a]) * c + off;
        for (std::size_t b = 0; b < m; ++b) {
          const T* kb = kv.data() + static_cast<std::size_t>(rows[b]) * c + off;
          T s = 0;
          for (std::size_t d = 0; d < dh; ++d) s += qa[d] * kb[d];
          scores[b] = s * scale_;
        }
        T* p = probs->data() + (*prob_offset)[w] + (h * m + a) * m;
        softmax_row(scores.data(), p, m);
        T* oa = out.data() + static_cast<std::size_t>(rows[a]) * c + off;
        for (std::size_t b = 0; b < m; ++b) {
          const T* vb = vv.data() + static_cast<std::size_t>(rows[b]) * c + off;
          for (std::size_t d = 0; d < dh; ++d) oa[d] += p[b] * vb[d];
        }
      }
    }
  }
  return detail::record<T>(g, std::move(out), {q, k, v}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      const auto& qv2 = g.value(q);
      const auto& kv2 = g.value(k);
      const auto& vv2 = g.value(v);
      const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
      T* dq = gq ? g.grad(q).data() : nullptr;
      T* dk = gk ? g.grad(k).data() : nullptr;
      T* dvp = gv ? g.grad(v).data() : nullptr;
      std::vector<T> dp;
      for (std::size_t w = 0; w < valid->size(); ++w) {
        const auto& rows = (*valid)[w];
        const std::size_t m = rows.size();
        dp.resize(m);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t a = 0; a < m; ++a) {
            const std::size_t ra = static_cast<std::size_t>(rows[a]);
            const T* p = probs->data() + (*prob_offset)[w] + (h * m + a) * m;
            const T* ga = go.data() + ra * c + off;
            T sdp = 0;
            for (std::size_t b = 0; b < m; ++b) {
              const std::size_t rb = static_cast<std::size_t>(rows[b]);
              const T* vb = vv2.data() + rb * c + off;
              T s = 0;
              for (std::size_t d = 0; d < dh; ++d) s += ga[d] * vb[d];
              dp[b] = s;
              sdp += p[b] * s;
              if (gv) {
                T* dvb = dvp + rb * c + off;
                for (std::size_t d = 0; d < dh; ++d) dvb[d] += p[b] * ga[d];
              }
            }
            const T* qa = qv2.data() + ra * c + off;
            for (std::size_t b = 0; b < m; ++b) {
              const T ds = p[b] * (dp[b] - sdp) * scale_;
              if (ds == T(0)) continue;
              const std::size_t rb = static_cast<std::size_t>(rows[b]);
              if (gq) {
                const T* kb = kv2.data() + rb * c + off;
                T* dqa = dq + ra * c + off;
                for (std::size_t d = 0; d < dh; ++d) dqa[d] += ds * kb[d];
              }
              if (gk) {
                T* dkb = dk + rb * c + off;
                for (std::size_t d = 0; d < dh; ++d) dkb[d] += ds * qa[d];
              }
            }
          }
        }
      }
    };
  });
}

// Sum of all entries, as a 1x1 node.
template <typename T>
Var<T> sum_all(Var<T> a) {
  auto& g = *a.graph;
  Tensor<T> out(1, 1);
  for (T v : a.value().values()) out[0] += v;
  return detail::record<T>(g, std::move(out), {a}, [=, &g](Var<T>) {
    return [=, &g](const Tensor<T>& go) {
      auto& ga = g.grad(a);
      for (auto& v : ga.storage()) v += go[0];
    };
  });
}

}  // namespace ag
}  // namespace podseg
