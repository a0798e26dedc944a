#pragma once

// Tape-based reverse-mode automatic differentiation over 2-D tensors.
//
// Every reduction runs sequentially left to right so that a fixed program on
// fixed inputs reproduces bitwise, run after run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace molem {

/// A named model tensor. Frozen parameters never enter a gradient path and
/// are rejected by optimizers.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad = Tensor(value.shape, 0.0); }
  void clear_grad() { grad = Tensor(); }
  double grad_norm_sq() const { return has_grad() ? squared_norm(grad.data) : 0.0; }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const { return value().data.at(0); }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Parameters are recorded once per tape and referenced without copying.
  Var param(Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    Node n;
    n.ref = &p.value;
    n.needs = grad_enabled_ && !p.frozen;
    n.param = n.needs ? &p : nullptr;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs; }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.value;
  }

  // Gradient buffer of a node, allocated as zeros on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape, 0.0);
    return n.grad;
  }

  template <typename F>
  Var record(Tensor value, bool needs, F&& backward) {
    Node n;
    n.value = std::move(value);
    n.needs = needs && grad_enabled_;
    if (n.needs) n.backward = std::forward<F>(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  bool any_needs(std::initializer_list<Var> vs) const {
    if (!grad_enabled_) return false;
    for (const Var& v : vs) {
      if (nodes_[v.id].needs) return true;
    }
    return false;
  }

  /// Propagates d(loss)/d(node) to every recorded node and accumulates the
  /// result into each trainable parameter's `grad`.
  void backward(Var loss) {
    require(loss.tape == this, "loss belongs to a different tape");
    require(value(loss.id).size() == 1, "backward requires a scalar loss");
    if (!nodes_[loss.id].needs) return;
    grad(loss.id).data[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs || n.grad.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.param != nullptr) {
        Parameter& p = *n.param;
        if (!p.has_grad()) p.zero_grad();
        for (std::size_t j = 0; j < n.grad.data.size(); ++j) p.grad.data[j] += n.grad.data[j];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool needs = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void check_same_tape(Var a, Var b) { require(a.tape == b.tape, "operands live on different tapes"); }

// out[n x m] += a[n x k] * b[k x m]. Each output element accumulates over k
// in order; columns are processed in register-sized blocks.
template <std::size_t W>
inline void gemm_block(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t n,
                       std::size_t k, std::size_t m, std::size_t j0) {
  for (std::size_t i = 0; i < n; ++i) {
    double acc[W];
    double* orow = out + i * m + j0;
    for (std::size_t j = 0; j < W; ++j) acc[j] = orow[j];
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * m + j0;
      for (std::size_t j = 0; j < W; ++j) acc[j] += aik * brow[j];
    }
    for (std::size_t j = 0; j < W; ++j) orow[j] = acc[j];
  }
}

inline void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t n,
                     std::size_t k, std::size_t m) {
  std::size_t j0 = 0;
  for (; j0 + 32 <= m; j0 += 32) gemm_block<32>(a, b, out, n, k, m, j0);
  if (j0 + 16 <= m) {
    gemm_block<16>(a, b, out, n, k, m, j0);
    j0 += 16;
  }
  if (j0 + 8 <= m) {
    gemm_block<8>(a, b, out, n, k, m, j0);
    j0 += 8;
  }
  for (; j0 < m; ++j0) gemm_block<1>(a, b, out, n, k, m, j0);
}

// tanh through a single exp; saturates cleanly at both ends.
inline double tanh_exp(double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); }

inline Tensor transpose(const Tensor& t) {
  Tensor out = Tensor::matrix(t.cols(), t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out.data[j * t.rows() + i] = t.data[i * t.cols() + j];
  }
  return out;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.rows(), "matmul shape mismatch");
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out = Tensor::matrix(n, m);
  detail::gemm_acc(A.data.data(), B.data.data(), out.data.data(), n, k, m);
  Tape& t = *a.tape;
  const bool needs = t.any_needs({a, b});
  Var self{&t, t.size()};
  return t.record(std::move(out), needs, [a, b, self, n, k, m](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    if (tp.needs(a)) {
      const Tensor bt = detail::transpose(tp.value(b.id));
      Tensor& ga = tp.grad(a.id);
      detail::gemm_acc(g.data.data(), bt.data.data(), ga.data.data(), n, m, k);
    }
    if (tp.needs(b)) {
      const Tensor at = detail::transpose(tp.value(a.id));
      Tensor& gb = tp.grad(b.id);
      detail::gemm_acc(at.data.data(), g.data.data(), gb.data.data(), k, n, m);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  require(a.value().shape == b.value().shape, "add shape mismatch");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a, b}), [a, b, self](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    for (Var v : {a, b}) {
      if (!tp.needs(v)) continue;
      Tensor& gv = tp.grad(v.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) gv.data[i] += g.data[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape(a, b);
  require(a.value().shape == b.value().shape, "sub shape mismatch");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a, b}), [a, b, self](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    if (tp.needs(a)) {
      Tensor& ga = tp.grad(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs(b)) {
      Tensor& gb = tp.grad(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

/// a[n x m] + broadcast row b[1 x m].
inline Var add_row(Var a, Var b) {
  detail::check_same_tape(a, b);
  const Tensor& B = b.value();
  require(B.size() == a.cols(), "add_row width mismatch");
  Tensor out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += B.data[j];
  }
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a, b}), [a, b, self, n, m](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    if (tp.needs(a)) {
      Tensor& ga = tp.grad(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs(b)) {
      Tensor& gb = tp.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) gb.data[j] += g.data[i * m + j];
      }
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.data) x *= s;
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a}), [a, self, s](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data) x = x > 0.0 ? x : 0.0;
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a}), [a, self](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    const Tensor& x = tp.value(a.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (x.data[i] > 0.0) ga.data[i] += g.data[i];
    }
  });
}

inline Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = a.value();
  for (double& x : out.data) x = 0.5 * x * (1.0 + detail::tanh_exp(kC * (x + 0.044715 * x * x * x)));
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a}), [a, self](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    const Tensor& xv = tp.value(a.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double x = xv.data[i];
      const double u = kC * (x + 0.044715 * x * x * x);
      const double th = detail::tanh_exp(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      ga.data[i] += g.data[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

/// Row-wise layer normalization with learned gain and bias rows.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  const std::size_t n = X.rows(), d = X.cols();
  require(G.size() == d && B.size() == d, "layer_norm parameter width mismatch");
  Tensor out = Tensor::matrix(n, d);
  Tensor xhat = Tensor::matrix(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = X.data.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat.data[i * d + j] = h;
      out.data[i * d + j] = h * G.data[j] + B.data[j];
    }
  }
  Tape& t = *x.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({x, gain, bias}),
                  [x, gain, bias, self, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp) {
                    const Tensor& g = tp.grad(self.id);
                    const Tensor& Gv = tp.value(gain.id);
                    if (tp.needs(gain)) {
                      Tensor& gg = tp.grad(gain.id);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < d; ++j) gg.data[j] += g.data[i * d + j] * xhat.data[i * d + j];
                      }
                    }
                    if (tp.needs(bias)) {
                      Tensor& gb = tp.grad(bias.id);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < d; ++j) gb.data[j] += g.data[i * d + j];
                      }
                    }
                    if (tp.needs(x)) {
                      Tensor& gx = tp.grad(x.id);
                      std::vector<double> dh(d);
                      for (std::size_t i = 0; i < n; ++i) {
                        double mean_dh = 0.0, mean_dh_h = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          dh[j] = g.data[i * d + j] * Gv.data[j];
                          mean_dh += dh[j];
                          mean_dh_h += dh[j] * xhat.data[i * d + j];
                        }
                        mean_dh /= static_cast<double>(d);
                        mean_dh_h /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                          gx.data[i * d + j] += inv_std[i] * (dh[j] - mean_dh - xhat.data[i * d + j] * mean_dh_h);
                        }
                      }
                    }
                  });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& T = table.value();
  const std::size_t d = T.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < T.rows(), "gather_rows index out of range");
    std::copy_n(T.data.data() + ids[i] * d, d, out.data.data() + i * d);
  }
  Tape& t = *table.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({table}), [table, self, d, ids = std::move(ids)](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    Tensor& gt = tp.grad(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) gt.data[ids[i] * d + j] += g.data[i * d + j];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  if (parts.size() == 1) return parts.front();
  Tape& t = *parts.front().tape;
  const std::size_t d = parts.front().cols();
  std::size_t n = 0;
  bool needs = false;
  for (const Var& p : parts) {
    require(p.tape == &t, "concat_rows operands on different tapes");
    require(p.cols() == d, "concat_rows width mismatch");
    n += p.rows();
    needs = needs || t.any_needs({p});
  }
  Tensor out = Tensor::matrix(n, d);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.data.size();
  }
  Var self{&t, t.size()};
  return t.record(std::move(out), needs, [parts, self](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    std::size_t o = 0;
    for (const Var& p : parts) {
      const std::size_t len = tp.value(p.id).data.size();
      if (tp.needs(p)) {
        Tensor& gp = tp.grad(p.id);
        for (std::size_t i = 0; i < len; ++i) gp.data[i] += g.data[o + i];
      }
      o += len;
    }
  });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require(start + count <= A.rows(), "slice_rows out of range");
  const std::size_t d = A.cols();
  Tensor out = Tensor::matrix(count, d);
  std::copy_n(A.data.data() + start * d, count * d, out.data.data());
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a}), [a, self, start, count, d](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < count * d; ++i) ga.data[start * d + i] += g.data[i];
  });
}

inline Var last_row(Var a) { return slice_rows(a, a.rows() - 1, 1); }

/// Multi-head causal attention. Query row i sits at absolute position
/// `offset + i` and attends to key rows 0..offset+i.
inline Var causal_attention(Var q, Var k, Var v, std::size_t heads, std::size_t offset) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t n = Q.rows(), d = Q.cols(), total = K.rows();
  require(K.cols() == d && V.cols() == d && V.rows() == total, "attention operand shapes differ");
  require(total == offset + n, "attention keys must cover every query position");
  require(heads > 0 && d % heads == 0, "model width must divide into heads");
  const std::size_t hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[h][i] has offset+i+1 entries; stored flat with per-row start.
  std::vector<std::size_t> row_start(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) row_start[i + 1] = row_start[i] + offset + i + 1;
  std::vector<double> probs(heads * row_start[n]);
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = offset + i + 1;
      double* p = probs.data() + h * row_start[n] + row_start[i];
      const double* qi = Q.data.data() + i * d + c0;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) {
        const double* kj = K.data.data() + j * d + c0;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        p[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      double* oi = out.data.data() + i * d + c0;
      for (std::size_t j = 0; j < len; ++j) {
        p[j] /= z;
        const double* vj = V.data.data() + j * d + c0;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  Tape& t = *q.tape;
  Var self{&t, t.size()};
  return t.record(
      std::move(out), t.any_needs({q, k, v}),
      [q, k, v, self, n, d, heads, hd, offset, inv_sqrt, row_start = std::move(row_start),
       probs = std::move(probs)](Tape& tp) {
        const Tensor& g = tp.grad(self.id);
        const Tensor& Qv = tp.value(q.id);
        const Tensor& Kv = tp.value(k.id);
        const Tensor& Vv = tp.value(v.id);
        const bool nq = tp.needs(q), nk = tp.needs(k), nv = tp.needs(v);
        double* gq = nq ? tp.grad(q.id).data.data() : nullptr;
        double* gk = nk ? tp.grad(k.id).data.data() : nullptr;
        double* gv = nv ? tp.grad(v.id).data.data() : nullptr;
        std::vector<double> dp;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * hd;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t len = offset + i + 1;
            const double* p = probs.data() + h * row_start[n] + row_start[i];
            const double* gi = g.data.data() + i * d + c0;
            dp.assign(len, 0.0);
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              const double* vj = Vv.data.data() + j * d + c0;
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (nv) {
                double* gvj = gv + j * d + c0;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += p[j] * gi[c];
              }
            }
            if (!nq && !nk) continue;
            const double* qi = Qv.data.data() + i * d + c0;
            for (std::size_t j = 0; j < len; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              const double* kj = Kv.data.data() + j * d + c0;
              if (nq) {
                double* gqi = gq + i * d + c0;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
              }
              if (nk) {
                double* gkj = gk + j * d + c0;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

/// Sum over rows with target >= 0 of -log softmax(logits[row])[target].
inline Var cross_entropy_sum(Var logits, std::vector<int> targets) {
  const Tensor& L = logits.value();
  const std::size_t n = L.rows(), V = L.cols();
  require(targets.size() == n, "one target per logit row required");
  Tensor probs = Tensor::matrix(n, V);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0) continue;
    require(static_cast<std::size_t>(targets[i]) < V, "target id out of range");
    const double* r = L.data.data() + i * V;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, r[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      probs.data[i * V + j] = std::exp(r[j] - mx);
      z += probs.data[i * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs.data[i * V + j] /= z;
    total += -(r[targets[i]] - mx - std::log(z));
  }
  Tape& t = *logits.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, 1}, total), t.any_needs({logits}),
                  [logits, self, n, V, targets = std::move(targets), probs = std::move(probs)](Tape& tp) {
                    const double g = tp.grad(self.id).data[0];
                    Tensor& gl = tp.grad(logits.id);
                    for (std::size_t i = 0; i < n; ++i) {
                      if (targets[i] < 0) continue;
                      for (std::size_t j = 0; j < V; ++j) gl.data[i * V + j] += g * probs.data[i * V + j];
                      gl.data[i * V + static_cast<std::size_t>(targets[i])] -= g;
                    }
                  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, 1}, s), t.any_needs({a}), [a, self](Tape& tp) {
    const double g = tp.grad(self.id).data[0];
    Tensor& ga = tp.grad(a.id);
    for (double& x : ga.data) x += g;
  });
}

inline Var sum_squares(Var a) {
  const double s = squared_norm(a.value().data);
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, 1}, s), t.any_needs({a}), [a, self](Tape& tp) {
    const double g = tp.grad(self.id).data[0];
    const Tensor& av = tp.value(a.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += 2.0 * g * av.data[i];
  });
}

/// Numerically stable softmax of a finite vector.
inline std::vector<double> softmax(std::span<const double> x) {
  require(!x.empty(), "softmax of an empty vector");
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> p(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/// Softmax over the single row of a [1 x n] value.
inline Var softmax_row(Var a) {
  require(a.rows() == 1, "softmax_row expects a row vector");
  std::vector<double> p = softmax(a.value().data);
  const std::size_t n = p.size();
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, n}, p), t.any_needs({a}), [a, self, p](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += g.data[i] * p[i];
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < p.size(); ++i) ga.data[i] += p[i] * (g.data[i] - dot);
  });
}

inline Var gather_cols(Var a, std::vector<std::size_t> idx) {
  require(a.rows() == 1, "gather_cols expects a row vector");
  const Tensor& A = a.value();
  std::vector<double> vals(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < A.cols(), "gather_cols index out of range");
    vals[i] = A.data[idx[i]];
  }
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(Tensor::row_vector(std::move(vals)), t.any_needs({a}), [a, self, idx = std::move(idx)](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.data[idx[i]] += g.data[i];
  });
}

/// a scaled by the single entry w[0, index].
inline Var scale_by(Var a, Var w, std::size_t index) {
  detail::check_same_tape(a, w);
  require(index < w.value().size(), "scale_by index out of range");
  const double s = w.value().data[index];
  Tensor out = a.value();
  for (double& x : out.data) x *= s;
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(std::move(out), t.any_needs({a, w}), [a, w, self, index](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    const double sv = tp.value(w.id).data[index];
    if (tp.needs(a)) {
      Tensor& ga = tp.grad(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += sv * g.data[i];
    }
    if (tp.needs(w)) {
      const Tensor& av = tp.value(a.id);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * av.data[i];
      tp.grad(w.id).data[index] += acc;
    }
  });
}

/// sum_i c[i] * a[0, i] for constant coefficients c.
inline Var dot_const(Var a, std::vector<double> c) {
  const Tensor& A = a.value();
  require(A.size() == c.size(), "dot_const length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * A.data[i];
  Tape& t = *a.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, 1}, s), t.any_needs({a}), [a, self, c = std::move(c)](Tape& tp) {
    const double g = tp.grad(self.id).data[0];
    Tensor& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < c.size(); ++i) ga.data[i] += g * c[i];
  });
}

/// L2-normalized cosine similarity of a query row against each key row.
/// Norms below `eps` are clamped to `eps`; `clamped` reports whether that
/// happened.
inline std::vector<double> cosine_similarities(std::span<const double> q, const Tensor& keys, double eps,
                                               bool* clamped = nullptr) {
  const std::size_t d = keys.cols();
  require(q.size() == d, "query and key widths differ");
  const double qn_raw = std::sqrt(squared_norm(q));
  const double qn = std::max(qn_raw, eps);
  bool any_clamp = qn_raw < eps;
  std::vector<double> s(keys.rows());
  for (std::size_t r = 0; r < keys.rows(); ++r) {
    const auto kr = keys.row(r);
    const double kn_raw = std::sqrt(squared_norm(kr));
    any_clamp = any_clamp || kn_raw < eps;
    const double kn = std::max(kn_raw, eps);
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += q[j] * kr[j];
    s[r] = dot / (qn * kn);
  }
  if (clamped != nullptr) *clamped = any_clamp;
  return s;
}

inline Var cosine_scores(Var q, Var keys, double eps = 1e-12) {
  detail::check_same_tape(q, keys);
  require(q.rows() == 1, "query must be a row vector");
  const Tensor& K = keys.value();
  std::vector<double> s = cosine_similarities(q.value().data, K, eps);
  const std::size_t n = s.size();
  Tape& t = *q.tape;
  Var self{&t, t.size()};
  return t.record(Tensor({1, n}, s), t.any_needs({q, keys}), [q, keys, self, eps, s](Tape& tp) {
    const Tensor& g = tp.grad(self.id);
    const Tensor& Qv = tp.value(q.id);
    const Tensor& Kv = tp.value(keys.id);
    const std::size_t d = Kv.cols();
    const double qn_raw = std::sqrt(squared_norm(Qv.data));
    const double qn = std::max(qn_raw, eps);
    for (std::size_t r = 0; r < Kv.rows(); ++r) {
      const auto kr = Kv.row(r);
      const double kn_raw = std::sqrt(squared_norm(kr));
      const double kn = std::max(kn_raw, eps);
      const double gr = g.data[r];
      if (tp.needs(q)) {
        Tensor& gq = tp.grad(q.id);
        for (std::size_t j = 0; j < d; ++j) {
          double dq = kr[j] / (qn * kn);
          if (qn_raw >= eps) dq -= s[r] * Qv.data[j] / (qn * qn);
          gq.data[j] += gr * dq;
        }
      }
      if (tp.needs(keys)) {
        Tensor& gk = tp.grad(keys.id);
        for (std::size_t j = 0; j < d; ++j) {
          double dk = Qv.data[j] / (qn * kn);
          if (kn_raw >= eps) dk -= s[r] * kr[j] / (kn * kn);
          gk.data[r * d + j] += gr * dk;
        }
      }
    }
  });
}

}  // namespace molem
