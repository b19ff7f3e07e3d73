#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace podseg {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor. Everything in the network is rank 2 (rows x cols);
// higher ranks only appear in checkpoints and are viewed as rows x (rest).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
      : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  static Tensor from_rows(std::size_t rows, std::size_t cols, std::vector<T> values) {
    if (values.size() != rows * cols) throw ShapeError("from_rows: value count does not match shape");
    Tensor t;
    t.shape_ = {rows, cols};
    t.data_ = std::move(values);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.empty()) return 0;
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
    return c;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace kernels {

// out[n x m] (+)= a[n x k] * b[k x m]
template <typename T>
void matmul(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate = false) {
  if (!accumulate) std::fill(out, out + n * m, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out + i * m;
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T(0)) continue;
      const T* br = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out[n x k] += g[n x m] * b[k x m]^T
template <typename T>
void matmul_nt_acc(const T* g, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* gr = g + i * m;
    T* o = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * m;
      T s = T(0);
      for (std::size_t j = 0; j < m; ++j) s += gr[j] * br[j];
      o[p] += s;
    }
  }
}

// out[k x m] += a[n x k]^T * g[n x m]
template <typename T>
void matmul_tn_acc(const T* a, const T* g, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ar = a + i * k;
    const T* gr = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T(0)) continue;
      T* o = out + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * gr[j];
    }
  }
}

}  // namespace kernels
}  // namespace podseg
