#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "podseg/tensor.hpp"

namespace podseg {

enum class Reduce { max, mean, sum };

inline Reduce parse_reduce(std::string_view s) {
  if (s == "max") return Reduce::max;
  if (s == "mean") return Reduce::mean;
  if (s == "sum") return Reduce::sum;
  throw std::invalid_argument("unsupported aggregation mode '" + std::string(s) + "'");
}

inline const char* to_string(Reduce r) {
  switch (r) {
    case Reduce::max: return "max";
    case Reduce::mean: return "mean";
    case Reduce::sum: return "sum";
  }
  return "?";
}

using IndexList = std::vector<std::int64_t>;
using Groups = std::vector<IndexList>;

namespace kernels {

// Reduces rows of `in` over each group. For max, `argmax` receives the winning
// row per (group, channel); ties go to the first member in group order, which
// is the lowest index whenever groups are sorted.
template <typename T>
Tensor<T> segment_reduce(const Tensor<T>& in, const Groups& groups, Reduce mode,
                         std::vector<std::int64_t>* argmax = nullptr) {
  const std::size_t c = in.cols();
  Tensor<T> out(groups.size(), c);
  if (argmax) argmax->assign(groups.size() * c, -1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& members = groups[g];
    if (members.empty()) throw std::invalid_argument("segment_reduce: empty group");
    auto o = out.row(g);
    if (mode == Reduce::max) {
      auto first = in.row(static_cast<std::size_t>(members[0]));
      for (std::size_t j = 0; j < c; ++j) {
        o[j] = first[j];
        if (argmax) (*argmax)[g * c + j] = members[0];
      }
      for (std::size_t m = 1; m < members.size(); ++m) {
        auto r = in.row(static_cast<std::size_t>(members[m]));
        for (std::size_t j = 0; j < c; ++j) {
          if (r[j] > o[j]) {
            o[j] = r[j];
            if (argmax) (*argmax)[g * c + j] = members[m];
          }
        }
      }
    } else {
      for (auto idx : members) {
        auto r = in.row(static_cast<std::size_t>(idx));
        for (std::size_t j = 0; j < c; ++j) o[j] += r[j];
      }
      if (mode == Reduce::mean) {
        const T inv = T(1) / static_cast<T>(members.size());
        for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
      }
    }
  }
  return out;
}

// out[i] = in[index[i]]; index -1 yields a zero row.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& in, const std::vector<std::int64_t>& index) {
  const std::size_t c = in.cols();
  Tensor<T> out(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0) continue;
    auto src = in.row(static_cast<std::size_t>(index[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace kernels
}  // namespace podseg
