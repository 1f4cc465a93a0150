#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tta {

inline std::string shape_to_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense row-major tensor. The project only ever needs rank 2 (N,F) and
// rank 4 (N,C,H,W), so indexing helpers exist for exactly those layouts.
template <typename Real>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty unless a backward pass populated it

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> s, Real fill = Real(0))
      : shape(std::move(s)), data(checked_numel(shape), fill) {}

  static std::int64_t checked_numel(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension in " + shape_to_string(s));
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  Real& at2(std::int64_t n, std::int64_t f) { return data[n * shape[1] + f]; }
  Real at2(std::int64_t n, std::int64_t f) const { return data[n * shape[1] + f]; }

  Real& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  Real at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  Real* row2(std::int64_t n) { return data.data() + n * shape[1]; }
  const Real* row2(std::int64_t n) const { return data.data() + n * shape[1]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

template <typename Real>
void require_shape(const Tensor<Real>& t, const std::vector<std::int64_t>& expect,
                   const char* what) {
  if (t.shape != expect) {
    throw std::invalid_argument(std::string(what) + ": expected shape " +
                                shape_to_string(expect) + ", got " + shape_to_string(t.shape));
  }
}

template <typename Real>
void require_rank(const Tensor<Real>& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                " tensor, got shape " + shape_to_string(t.shape));
  }
}

}  // namespace tta
