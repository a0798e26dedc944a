#pragma once

// Dense row-major tensors of 64-bit floats and the error types shared by
// every module.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace molem {

/// Raised when a caller breaks an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a sequence would grow past the reasoner's context window.
class GenerationTruncated : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when training diverges or fails to reach its target; carries the
/// loss curve observed so far.
class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(const std::string& what, std::vector<double> curve)
      : std::runtime_error(what), loss_curve(std::move(curve)) {}
  std::vector<double> loss_curve;
};

/// Raised when a structural invariant (freeze, gradient partition, ...) breaks.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(element_count(shape), fill) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    require(data.size() == element_count(shape), "tensor data length does not match shape");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    if (s.empty()) return 0;
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  // 1-D tensors are treated as a single row.
  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : (shape.empty() ? 0 : 1); }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.data[i]) != std::bit_cast<std::uint64_t>(b.data[i])) {
      return false;
    }
  }
  return true;
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace molem
