#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/autograd.hpp"
#include "podseg/params.hpp"

namespace podseg::nn {

// What a forward pass needs besides its inputs.
template <typename T>
struct Context {
  Graph<T>& graph;
  ModelParams<T>& params;
  bool training = false;

  Var<T> p(const std::string& name) { return graph.param(params, name); }
  // Frozen sub-networks run in eval mode so their buffers stay untouched.
  bool training_for(const std::string& prefix) const { return training && !params.is_frozen(prefix); }
};

// ---- dense -----------------------------------------------------------------

template <typename T>
void init_dense(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t out) {
  params.add_dense(prefix, in, out);
}

template <typename T>
Var<T> dense(Context<T>& ctx, Var<T> x, const std::string& prefix) {
  return ag::linear(x, ctx.p(prefix + ".weight"), ctx.p(prefix + ".bias"));
}

// ---- FCN: fully connected -> batch norm -> ReLU ------------------------------

template <typename T>
void init_fcn(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t out) {
  params.add_dense(prefix + ".fc", in, out);
  params.add(prefix + ".bn.gamma", {1, out}, T(1));
  params.add(prefix + ".bn.beta", {1, out}, T(0));
  params.add(prefix + ".bn.running_mean", {1, out}, T(0), false);
  params.add(prefix + ".bn.running_var", {1, out}, T(1), false);
}

template <typename T>
Var<T> fcn_apply(Context<T>& ctx, Var<T> x, const std::string& prefix) {
  if (x.cols() != ctx.params.at(prefix + ".fc.weight").value.rows())
    throw ShapeError("fcn_apply: input width " + std::to_string(x.cols()) + " does not match layer '" + prefix + "'");
  Var<T> h = dense(ctx, x, prefix + ".fc");
  h = ag::batch_norm(h, ctx.p(prefix + ".bn.gamma"), ctx.p(prefix + ".bn.beta"),
                     ctx.params.at(prefix + ".bn.running_mean"), ctx.params.at(prefix + ".bn.running_var"),
                     ctx.training_for(prefix));
  return ag::relu(h);
}

// ---- layer norm --------------------------------------------------------------

template <typename T>
void init_layer_norm(ModelParams<T>& params, const std::string& prefix, std::size_t c) {
  params.add(prefix + ".gain", {1, c}, T(1));
  params.add(prefix + ".bias", {1, c}, T(0));
}

template <typename T>
Var<T> layer_norm(Context<T>& ctx, Var<T> x, const std::string& prefix, T eps = T(1e-5)) {
  return ag::layer_norm(x, ctx.p(prefix + ".gain"), ctx.p(prefix + ".bias"), eps);
}

// ---- two-layer MLP (the residual is the caller's business) -------------------

template <typename T>
void init_mlp(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t hidden,
              std::size_t out) {
  params.add_dense(prefix + ".fc1", in, hidden);
  params.add_dense(prefix + ".fc2", hidden, out);
}

template <typename T>
Var<T> mlp_apply(Context<T>& ctx, Var<T> x, const std::string& prefix) {
  if (x.cols() != ctx.params.at(prefix + ".fc1.weight").value.rows())
    throw ShapeError("mlp_apply: input width does not match layer '" + prefix + "'");
  return dense(ctx, ag::relu(dense(ctx, x, prefix + ".fc1")), prefix + ".fc2");
}

// ---- multi-head self-attention -----------------------------------------------

template <typename T>
void init_attention(ModelParams<T>& params, const std::string& prefix, std::size_t c) {
  for (const char* n : {".q", ".k", ".v", ".out"}) params.add_dense(prefix + n, c, c);
}

// Attention over groups of rows ("windows"). The position encoding is added to
// the query/key inputs only. Rows with `active` == 0 (or in no window) get a
// zero output after the output projection.
template <typename T>
Var<T> attention_windows(Context<T>& ctx, Var<T> x, Var<T> pe, std::shared_ptr<const Groups> windows,
                         std::shared_ptr<const std::vector<std::uint8_t>> active, std::size_t heads,
                         const std::string& prefix) {
  const std::size_t c = x.cols();
  if (heads == 0 || c % heads != 0) throw ShapeError("attention: channels must be divisible by heads");
  Var<T> qk_in = ag::add(x, pe);
  Var<T> q = dense(ctx, qk_in, prefix + ".q");
  Var<T> k = dense(ctx, qk_in, prefix + ".k");
  Var<T> v = dense(ctx, x, prefix + ".v");
  Var<T> a = ag::windowed_attention(q, k, v, windows, heads);
  return ag::mask_rows(dense(ctx, a, prefix + ".out"), active);
}

// Self-attention over T tokens, one window. Masked tokens neither attend nor
// are attended to and receive zero output rows.
template <typename T>
Var<T> multi_head_attention(Context<T>& ctx, Var<T> x, Var<T> pe, const std::vector<bool>& valid,
                            std::size_t heads, const std::string& prefix) {
  if (valid.size() != x.rows()) throw ShapeError("multi_head_attention: mask length differs from tokens");
  auto window = std::make_shared<Groups>(1);
  auto active = std::make_shared<std::vector<std::uint8_t>>(valid.size(), 0);
  for (std::size_t i = 0; i < valid.size(); ++i) {
    (*window)[0].push_back(valid[i] ? static_cast<std::int64_t>(i) : -1);
    (*active)[i] = valid[i] ? 1 : 0;
  }
  if (std::find(valid.begin(), valid.end(), true) == valid.end())
    throw std::invalid_argument("multi_head_attention: every position is masked");
  return attention_windows<T>(ctx, x, pe, window, active, heads, prefix);
}

}  // namespace podseg::nn
