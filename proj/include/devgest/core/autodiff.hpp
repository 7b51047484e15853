#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "devgest/core/tensor.hpp"

namespace devgest {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff on a per-graph tape.
//
// A Graph owns the tape for one forward pass. Ops append nodes in creation
// order; Graph::backward seeds the root and walks the tape in reverse, so no
// topological sort is needed. Nodes whose inputs carry no gradient skip the
// backward closure entirely, which makes frozen feature nets cheap.
// ---------------------------------------------------------------------------

struct Node {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::function<void()> backward;  // captures parent shared_ptrs by value

  Tensor& grad_buf() {
    if (grad.data.empty()) grad = Tensor::zeros(val.shape);
    return grad;
  }
  bool has_grad() const { return !grad.data.empty(); }
};

using Var = std::shared_ptr<Node>;

class Graph {
 public:
  Var make(Tensor v, bool needs_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = needs_grad;
    tape_.push_back(n);
    return n;
  }

  Var constant(Tensor v) { return make(std::move(v), false); }
  Var leaf(Tensor v) { return make(std::move(v), true); }

  /// Backprop from a scalar root. Seeds d(root)/d(root) = 1.
  void backward(const Var& root) {
    if (root->val.numel() != 1)
      throw std::invalid_argument("backward: root must be a scalar");
    root->grad_buf()[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && n.has_grad()) n.backward();
    }
  }

  size_t size() const { return tape_.size(); }

 private:
  std::vector<Var> tape_;
};

namespace detail {
inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a->val.shape_str() + " vs " + b->val.shape_str());
}
}  // namespace detail

// ---- elementwise binary ----------------------------------------------------

inline Var add(Graph& g, const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b] {
      const Tensor& go = r->grad;
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
      }
    };
  }
  return r;
}

inline Var sub(Graph& g, const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b] {
      const Tensor& go = r->grad;
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
      }
    };
  }
  return r;
}

inline Var mul(Graph& g, const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b] {
      const Tensor& go = r->grad;
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * b->val[i];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * a->val[i];
      }
    };
  }
  return r;
}

inline Var vdiv(Graph& g, const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "div");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b] {
      const Tensor& go = r->grad;
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / b->val[i];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int64_t i = 0; i < go.numel(); ++i)
          gb[i] -= go[i] * a->val[i] / (b->val[i] * b->val[i]);
      }
    };
  }
  return r;
}

// ---- elementwise unary -----------------------------------------------------

namespace detail {
template <class Fwd, class Bwd>
Var unary_op(Graph& g, const Var& a, Fwd fwd, Bwd dydx) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->val[i]);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, dydx] {
      Tensor& ga = a->grad_buf();
      const Tensor& go = r->grad;
      for (int64_t i = 0; i < go.numel(); ++i)
        ga[i] += go[i] * dydx(a->val[i], r->val[i]);
    };
  }
  return r;
}
}  // namespace detail

inline Var add_scalar(Graph& g, const Var& a, double s) {
  return detail::unary_op(g, a, [s](double x) { return x + s; },
                          [](double, double) { return 1.0; });
}
inline Var mul_scalar(Graph& g, const Var& a, double s) {
  return detail::unary_op(g, a, [s](double x) { return x * s; },
                          [s](double, double) { return s; });
}
inline Var vneg(Graph& g, const Var& a) { return mul_scalar(g, a, -1.0); }
inline Var vexp(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}
inline Var vlog(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}
inline Var vsqrt(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}
inline Var vsigmoid(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                          [](double, double y) { return y * (1.0 - y); });
}
inline Var vtanh(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}
inline Var vabs(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return std::fabs(x); },
                          [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}
inline Var vsquare(Graph& g, const Var& a) {
  return detail::unary_op(g, a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}

/// max(0,z) + c*min(0,z): the tunable leaky rectifier used throughout the
/// decoder. c = 1 is the identity, c = 0 a half-wave rectifier.
inline Var leaky(Graph& g, const Var& a, double c = 0.2) {
  return detail::unary_op(
      g, a, [c](double x) { return x >= 0.0 ? x : c * x; },
      [c](double x, double) { return x >= 0.0 ? 1.0 : c; });
}

/// Elementwise clamp; gradient passes through only where unclamped.
inline Var vclamp(Graph& g, const Var& a, double lo, double hi) {
  return detail::unary_op(
      g, a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Smooth GELU (tanh approximation), used in the denoiser MLP.
inline Var vgelu(Graph& g, const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary_op(
      g, a,
      [](double x) {
        double u = k * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double) {
        double u = k * (x + 0.044715 * x * x * x);
        double t = std::tanh(u);
        double du = k * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---- reductions / broadcasts ----------------------------------------------

inline Var sum_all(Graph& g, const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i];
  Var r = g.make(Tensor::scalar(s), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a] {
      Tensor& ga = a->grad_buf();
      double go = r->grad[0];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    };
  }
  return r;
}

inline Var mean_all(Graph& g, const Var& a) {
  int64_t n = a->val.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += a->val[i];
  Var r = g.make(Tensor::scalar(s / static_cast<double>(n)), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, n] {
      Tensor& ga = a->grad_buf();
      double go = r->grad[0] / static_cast<double>(n);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    };
  }
  return r;
}

/// {1} -> {n}: replicate a scalar node.
inline Var broadcast_scalar(Graph& g, const Var& a, int n) {
  Tensor out({n});
  for (auto& v : out.data) v = a->val[0];
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, n] {
      Tensor& ga = a->grad_buf();
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += r->grad[i];
      ga[0] += s;
    };
  }
  return r;
}

/// {1,H,W} -> {C,H,W}: repeat a single-channel map; backward sums over channels.
inline Var tile_channel(Graph& g, const Var& a, int C) {
  int H = a->val.dim(1), W = a->val.dim(2);
  int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c)
    std::copy(a->val.data.begin(), a->val.data.begin() + hw, out.data.begin() + c * hw);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, C, hw] {
      Tensor& ga = a->grad_buf();
      for (int c = 0; c < C; ++c) {
        const double* p = r->grad.data.data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) ga[i] += p[i];
      }
    };
  }
  return r;
}

/// {C,H,W} -> {C}: mean over spatial positions per channel.
inline Var mean_channel(Graph& g, const Var& a) {
  int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
  int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    const double* p = a->val.data.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) s += p[i];
    out[c] = s / static_cast<double>(hw);
  }
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, C, hw] {
      Tensor& ga = a->grad_buf();
      for (int c = 0; c < C; ++c) {
        double go = r->grad[c] / static_cast<double>(hw);
        double* p = ga.data.data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) p[i] += go;
      }
    };
  }
  return r;
}

/// {C} -> {C,H,W}: broadcast per-channel values over a spatial grid.
inline Var expand_channel(Graph& g, const Var& a, int H, int W) {
  int C = a->val.dim(0);
  int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c) {
    double v = a->val[c];
    double* p = out.data.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) p[i] = v;
  }
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, C, hw] {
      Tensor& ga = a->grad_buf();
      for (int c = 0; c < C; ++c) {
        const double* p = r->grad.data.data() + c * hw;
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
        ga[c] += s;
      }
    };
  }
  return r;
}

/// {T,d} -> {T}: row means.
inline Var mean_rows(Graph& g, const Var& a) {
  int T = a->val.dim(0), d = a->val.dim(1);
  Tensor out({T});
  for (int t = 0; t < T; ++t) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += a->val.at2(t, j);
    out[t] = s / d;
  }
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, T, d] {
      Tensor& ga = a->grad_buf();
      for (int t = 0; t < T; ++t) {
        double go = r->grad[t] / d;
        for (int j = 0; j < d; ++j) ga.at2(t, j) += go;
      }
    };
  }
  return r;
}

/// {T} -> {T,d}: broadcast row values across columns.
inline Var expand_cols(Graph& g, const Var& a, int d) {
  int T = a->val.dim(0);
  Tensor out({T, d});
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) out.at2(t, j) = a->val[t];
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, T, d] {
      Tensor& ga = a->grad_buf();
      for (int t = 0; t < T; ++t) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += r->grad.at2(t, j);
        ga[t] += s;
      }
    };
  }
  return r;
}

// ---- matrix ops -------------------------------------------------------------

inline Var matmul(Graph& g, const Var& a, const Var& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + a->val.shape_str() + " x " +
                                b->val.shape_str());
  int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = a->val.at2(i, p);
      const double* brow = b->val.data.data() + static_cast<size_t>(p) * n;
      double* orow = out.data.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b, m, k, n] {
      const Tensor& go = r->grad;
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const double* brow = b->val.data.data() + static_cast<size_t>(p) * n;
            const double* grow = go.data.data() + static_cast<size_t>(i) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga.at2(i, p) += s;
          }
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            double av = a->val.at2(i, p);
            const double* grow = go.data.data() + static_cast<size_t>(i) * n;
            double* gbrow = gb.data.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    };
  }
  return r;
}

inline Var transpose(Graph& g, const Var& a) {
  int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(j, i) = a->val.at2(i, j);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, m, n] {
      Tensor& ga = a->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at2(i, j) += r->grad.at2(j, i);
    };
  }
  return r;
}

/// {T,d} + {d}: add a row vector to every row.
inline Var add_rowvec(Graph& g, const Var& a, const Var& b) {
  int T = a->val.dim(0), d = a->val.dim(1);
  if (b->val.numel() != d) throw std::invalid_argument("add_rowvec: size mismatch");
  Tensor out = a->val;
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) out.at2(t, j) += b->val[j];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b, T, d] {
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += r->grad[i];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < d; ++j) gb[j] += r->grad.at2(t, j);
      }
    };
  }
  return r;
}

/// {T,d} * {d}: scale every row elementwise by a row vector.
inline Var mul_rowvec(Graph& g, const Var& a, const Var& b) {
  int T = a->val.dim(0), d = a->val.dim(1);
  if (b->val.numel() != d) throw std::invalid_argument("mul_rowvec: size mismatch");
  Tensor out = a->val;
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) out.at2(t, j) *= b->val[j];
  Var r = g.make(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, b, T, d] {
      if (a->requires_grad) {
        Tensor& ga = a->grad_buf();
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < d; ++j) ga.at2(t, j) += r->grad.at2(t, j) * b->val[j];
      }
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < d; ++j) gb[j] += r->grad.at2(t, j) * a->val.at2(t, j);
      }
    };
  }
  return r;
}

inline Var softmax_rows(Graph& g, const Var& a) {
  int T = a->val.dim(0), d = a->val.dim(1);
  Tensor out({T, d});
  for (int t = 0; t < T; ++t) {
    double mx = a->val.at2(t, 0);
    for (int j = 1; j < d; ++j) mx = std::max(mx, a->val.at2(t, j));
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      double e = std::exp(a->val.at2(t, j) - mx);
      out.at2(t, j) = e;
      z += e;
    }
    for (int j = 0; j < d; ++j) out.at2(t, j) /= z;
  }
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, T, d] {
      Tensor& ga = a->grad_buf();
      for (int t = 0; t < T; ++t) {
        double dp = 0.0;
        for (int j = 0; j < d; ++j) dp += r->grad.at2(t, j) * r->val.at2(t, j);
        for (int j = 0; j < d; ++j)
          ga.at2(t, j) += r->val.at2(t, j) * (r->grad.at2(t, j) - dp);
      }
    };
  }
  return r;
}

// ---- slicing / concatenation -------------------------------------------------

inline Var slice_rows(Graph& g, const Var& a, int r0, int r1) {
  int T = a->val.dim(0), d = a->val.dim(1);
  if (r0 < 0 || r1 > T || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out({r1 - r0, d});
  std::copy(a->val.data.begin() + static_cast<size_t>(r0) * d,
            a->val.data.begin() + static_cast<size_t>(r1) * d, out.data.begin());
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, r0, d] {
      Tensor& ga = a->grad_buf();
      for (int64_t i = 0; i < r->grad.numel(); ++i)
        ga[static_cast<int64_t>(r0) * d + i] += r->grad[i];
    };
  }
  return r;
}

inline Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  int d = parts[0]->val.dim(1);
  int T = 0;
  bool req = false;
  for (auto& p : parts) {
    if (p->val.dim(1) != d) throw std::invalid_argument("concat_rows: width mismatch");
    T += p->val.dim(0);
    req = req || p->requires_grad;
  }
  Tensor out({T, d});
  size_t off = 0;
  for (auto& p : parts) {
    std::copy(p->val.data.begin(), p->val.data.end(), out.data.begin() + off);
    off += p->val.data.size();
  }
  Var r = g.make(std::move(out), req);
  if (req) {
    r->backward = [r = r.get(), parts] {
      size_t off = 0;
      for (auto& p : parts) {
        if (p->requires_grad) {
          Tensor& gp = p->grad_buf();
          for (int64_t i = 0; i < gp.numel(); ++i) gp[i] += r->grad[off + i];
        }
        off += p->val.data.size();
      }
    };
  }
  return r;
}

inline Var slice_cols(Graph& g, const Var& a, int c0, int c1) {
  int T = a->val.dim(0), d = a->val.dim(1);
  if (c0 < 0 || c1 > d || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  int w = c1 - c0;
  Tensor out({T, w});
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < w; ++j) out.at2(t, j) = a->val.at2(t, c0 + j);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, T, w, c0] {
      Tensor& ga = a->grad_buf();
      for (int t = 0; t < T; ++t)
        for (int j = 0; j < w; ++j) ga.at2(t, c0 + j) += r->grad.at2(t, j);
    };
  }
  return r;
}

inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  int T = parts[0]->val.dim(0);
  int d = 0;
  bool req = false;
  for (auto& p : parts) {
    if (p->val.dim(0) != T) throw std::invalid_argument("concat_cols: height mismatch");
    d += p->val.dim(1);
    req = req || p->requires_grad;
  }
  Tensor out({T, d});
  int off = 0;
  for (auto& p : parts) {
    int w = p->val.dim(1);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < w; ++j) out.at2(t, off + j) = p->val.at2(t, j);
    off += w;
  }
  Var r = g.make(std::move(out), req);
  if (req) {
    r->backward = [r = r.get(), parts, T] {
      int off = 0;
      for (auto& p : parts) {
        int w = p->val.dim(1);
        if (p->requires_grad) {
          Tensor& gp = p->grad_buf();
          for (int t = 0; t < T; ++t)
            for (int j = 0; j < w; ++j) gp.at2(t, j) += r->grad.at2(t, off + j);
        }
        off += w;
      }
    };
  }
  return r;
}

/// Copying reshape; gradient is the inverse reshape.
inline Var reshape(Graph& g, const Var& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a->val.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), a->val.data);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a] {
      Tensor& ga = a->grad_buf();
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += r->grad[i];
    };
  }
  return r;
}

// ---- image ops ---------------------------------------------------------------

namespace detail {
/// Valid output range [lo,hi) along one axis so that o*stride + k - pad lands
/// inside [0, extent). Keeps the hot conv loops branch-free.
inline void conv_span(int extent, int out_extent, int k, int stride, int pad, int& lo, int& hi) {
  int num = pad - k;
  lo = num > 0 ? (num + stride - 1) / stride : 0;
  hi = std::min(out_extent, (extent - 1 - k + pad) / stride + 1);
  if (hi < lo) hi = lo;
}
}  // namespace detail

/// 2-D convolution, zero padding. x {Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout}.
inline Var conv2d(Graph& g, const Var& x, const Var& w, const Var& b, int stride,
                  int pad) {
  int Cin = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  int Cout = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  if (w->val.dim(1) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (b->val.numel() != Cout) throw std::invalid_argument("conv2d: bias size");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: output collapsed");

  Tensor out({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co) {
    double bv = b->val[co];
    double* op = out.data.data() + static_cast<size_t>(co) * Ho * Wo;
    for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) op[i] = bv;
  }
  for (int co = 0; co < Cout; ++co)
    for (int ci = 0; ci < Cin; ++ci)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          double wv = w->val.data[((static_cast<size_t>(co) * Cin + ci) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          int oy_lo, oy_hi, ox_lo, ox_hi;
          detail::conv_span(H, Ho, ky, stride, pad, oy_lo, oy_hi);
          detail::conv_span(W, Wo, kx, stride, pad, ox_lo, ox_hi);
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            int iy = oy * stride + ky - pad;
            const double* xrow =
                x->val.data.data() + (static_cast<size_t>(ci) * H + iy) * W + (kx - pad);
            double* orow = out.data.data() + (static_cast<size_t>(co) * Ho + oy) * Wo;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xrow[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xrow[ox * stride];
            }
          }
        }

  Var r = g.make(std::move(out),
                 x->requires_grad || w->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), x, w, b, Cin, H, W, Cout, kh, kw, stride, pad] {
      int Ho = r->val.dim(1), Wo = r->val.dim(2);
      const Tensor& go = r->grad;
      if (b->requires_grad) {
        Tensor& gb = b->grad_buf();
        for (int co = 0; co < Cout; ++co) {
          const double* gp = go.data.data() + static_cast<size_t>(co) * Ho * Wo;
          double s = 0.0;
          for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) s += gp[i];
          gb[co] += s;
        }
      }
      if (w->requires_grad) {
        Tensor& gw = w->grad_buf();
        for (int co = 0; co < Cout; ++co)
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int oy_lo, oy_hi, ox_lo, ox_hi;
                detail::conv_span(H, Ho, ky, stride, pad, oy_lo, oy_hi);
                detail::conv_span(W, Wo, kx, stride, pad, ox_lo, ox_hi);
                double s = 0.0;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  int iy = oy * stride + ky - pad;
                  const double* xrow =
                      x->val.data.data() + (static_cast<size_t>(ci) * H + iy) * W + (kx - pad);
                  const double* grow =
                      go.data.data() + (static_cast<size_t>(co) * Ho + oy) * Wo;
                  if (stride == 1) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) s += grow[ox] * xrow[ox];
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) s += grow[ox] * xrow[ox * stride];
                  }
                }
                gw.data[((static_cast<size_t>(co) * Cin + ci) * kh + ky) * kw + kx] += s;
              }
      }
      if (x->requires_grad) {
        Tensor& gx = x->grad_buf();
        for (int co = 0; co < Cout; ++co)
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                double wv =
                    w->val.data[((static_cast<size_t>(co) * Cin + ci) * kh + ky) * kw + kx];
                if (wv == 0.0) continue;
                int oy_lo, oy_hi, ox_lo, ox_hi;
                detail::conv_span(H, Ho, ky, stride, pad, oy_lo, oy_hi);
                detail::conv_span(W, Wo, kx, stride, pad, ox_lo, ox_hi);
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  int iy = oy * stride + ky - pad;
                  double* gxrow =
                      gx.data.data() + (static_cast<size_t>(ci) * H + iy) * W + (kx - pad);
                  const double* grow =
                      go.data.data() + (static_cast<size_t>(co) * Ho + oy) * Wo;
                  if (stride == 1) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) gxrow[ox] += wv * grow[ox];
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) gxrow[ox * stride] += wv * grow[ox];
                  }
                }
              }
      }
    };
  }
  return r;
}

inline Var avg_pool2(Graph& g, const Var& x) {
  int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
  int Ho = H / 2, Wo = W / 2;
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        out.at3(c, oy, ox) = 0.25 * (x->val.at3(c, 2 * oy, 2 * ox) +
                                     x->val.at3(c, 2 * oy, 2 * ox + 1) +
                                     x->val.at3(c, 2 * oy + 1, 2 * ox) +
                                     x->val.at3(c, 2 * oy + 1, 2 * ox + 1));
  Var r = g.make(std::move(out), x->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), x, C, Ho, Wo] {
      Tensor& gx = x->grad_buf();
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double go = 0.25 * r->grad.at3(c, oy, ox);
            gx.at3(c, 2 * oy, 2 * ox) += go;
            gx.at3(c, 2 * oy, 2 * ox + 1) += go;
            gx.at3(c, 2 * oy + 1, 2 * ox) += go;
            gx.at3(c, 2 * oy + 1, 2 * ox + 1) += go;
          }
    };
  }
  return r;
}

inline Var upsample_nearest2(Graph& g, const Var& x) {
  int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out.at3(c, y, xx) = x->val.at3(c, y / 2, xx / 2);
  Var r = g.make(std::move(out), x->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), x, C, H, W] {
      Tensor& gx = x->grad_buf();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx)
            gx.at3(c, y / 2, xx / 2) += r->grad.at3(c, y, xx);
    };
  }
  return r;
}

/// Bilinear backward sampling. grid {Hg,Wg,2} holds (x,y) in [-1,1] with
/// align-corners mapping; coordinates outside the frame clamp to the border.
/// Differentiable in both the source features and the grid; the clamp
/// contributes zero grid gradient where it saturates.
inline Var grid_sample(Graph& g, const Var& x, const Var& grid) {
  int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  int Hg = grid->val.dim(0), Wg = grid->val.dim(1);
  if (grid->val.dim(2) != 2) throw std::invalid_argument("grid_sample: grid last dim != 2");

  auto unnorm = [](double v, int n) { return (v + 1.0) * 0.5 * (n - 1); };
  Tensor out({C, Hg, Wg});
  for (int oy = 0; oy < Hg; ++oy)
    for (int ox = 0; ox < Wg; ++ox) {
      double gxv = grid->val.data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 0];
      double gyv = grid->val.data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 1];
      double cx = std::clamp(unnorm(gxv, W), 0.0, static_cast<double>(W - 1));
      double cy = std::clamp(unnorm(gyv, H), 0.0, static_cast<double>(H - 1));
      int x0 = static_cast<int>(std::floor(cx));
      int y0 = static_cast<int>(std::floor(cy));
      int x1 = std::min(x0 + 1, W - 1);
      int y1 = std::min(y0 + 1, H - 1);
      double fx = cx - x0, fy = cy - y0;
      for (int c = 0; c < C; ++c) {
        double v00 = x->val.at3(c, y0, x0), v01 = x->val.at3(c, y0, x1);
        double v10 = x->val.at3(c, y1, x0), v11 = x->val.at3(c, y1, x1);
        out.at3(c, oy, ox) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  Var r = g.make(std::move(out), x->requires_grad || grid->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), x, grid, C, H, W, Hg, Wg, unnorm] {
      Tensor* gx = x->requires_grad ? &x->grad_buf() : nullptr;
      Tensor* gg = grid->requires_grad ? &grid->grad_buf() : nullptr;
      for (int oy = 0; oy < Hg; ++oy)
        for (int ox = 0; ox < Wg; ++ox) {
          double gxv = grid->val.data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 0];
          double gyv = grid->val.data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 1];
          double ux = unnorm(gxv, W), uy = unnorm(gyv, H);
          bool clx = ux < 0.0 || ux > W - 1;
          bool cly = uy < 0.0 || uy > H - 1;
          double cx = std::clamp(ux, 0.0, static_cast<double>(W - 1));
          double cy = std::clamp(uy, 0.0, static_cast<double>(H - 1));
          int x0 = static_cast<int>(std::floor(cx));
          int y0 = static_cast<int>(std::floor(cy));
          int x1 = std::min(x0 + 1, W - 1);
          int y1 = std::min(y0 + 1, H - 1);
          double fx = cx - x0, fy = cy - y0;
          double dLdcx = 0.0, dLdcy = 0.0;
          for (int c = 0; c < C; ++c) {
            double go = r->grad.at3(c, oy, ox);
            if (go == 0.0) continue;
            double v00 = x->val.at3(c, y0, x0), v01 = x->val.at3(c, y0, x1);
            double v10 = x->val.at3(c, y1, x0), v11 = x->val.at3(c, y1, x1);
            if (gx) {
              gx->at3(c, y0, x0) += go * (1 - fy) * (1 - fx);
              gx->at3(c, y0, x1) += go * (1 - fy) * fx;
              gx->at3(c, y1, x0) += go * fy * (1 - fx);
              gx->at3(c, y1, x1) += go * fy * fx;
            }
            if (gg) {
              dLdcx += go * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
              dLdcy += go * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
          }
          if (gg) {
            double sx = clx ? 0.0 : 0.5 * (W - 1);
            double sy = cly ? 0.0 : 0.5 * (H - 1);
            gg->data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 0] += dLdcx * sx;
            gg->data[(static_cast<size_t>(oy) * Wg + ox) * 2 + 1] += dLdcy * sy;
          }
        }
    };
  }
  return r;
}

/// Value copy with no backward edge (stops gradient flow).
inline Var detach(Graph& g, const Var& a) { return g.constant(a->val); }

/// Spatial window [y0,y0+h) x [x0,x0+w) of a {C,H,W} tensor.
inline Var crop3(Graph& g, const Var& a, int y0, int x0, int h, int w) {
  int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > H || x0 + w > W)
    throw std::invalid_argument("crop3: window out of bounds");
  Tensor out({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at3(c, y, x) = a->val.at3(c, y0 + y, x0 + x);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, y0, x0, h, w, C] {
      Tensor& ga = a->grad_buf();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) ga.at3(c, y0 + y, x0 + x) += r->grad.at3(c, y, x);
    };
  }
  return r;
}

/// Per-pixel softmax over the channel axis of {C,H,W}.
inline Var softmax_channel(Graph& g, const Var& a) {
  int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
  Tensor out({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double mx = a->val.at3(0, y, x);
      for (int c = 1; c < C; ++c) mx = std::max(mx, a->val.at3(c, y, x));
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        double e = std::exp(a->val.at3(c, y, x) - mx);
        out.at3(c, y, x) = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) out.at3(c, y, x) /= z;
    }
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, C, H, W] {
      Tensor& ga = a->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double dp = 0.0;
          for (int c = 0; c < C; ++c) dp += r->grad.at3(c, y, x) * r->val.at3(c, y, x);
          for (int c = 0; c < C; ++c)
            ga.at3(c, y, x) += r->val.at3(c, y, x) * (r->grad.at3(c, y, x) - dp);
        }
    };
  }
  return r;
}

/// {H,W,2} -> {2,H,W} and back; used when a sampling grid is resized as a
/// feature map.
inline Var hwc2_to_chw(Graph& g, const Var& a) {
  int H = a->val.dim(0), W = a->val.dim(1);
  Tensor out({2, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 2; ++c)
        out.at3(c, y, x) = a->val.data[(static_cast<size_t>(y) * W + x) * 2 + c];
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, H, W] {
      Tensor& ga = a->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < 2; ++c)
            ga.data[(static_cast<size_t>(y) * W + x) * 2 + c] += r->grad.at3(c, y, x);
    };
  }
  return r;
}

inline Var chw2_to_hwc(Graph& g, const Var& a) {
  int H = a->val.dim(1), W = a->val.dim(2);
  Tensor out({H, W, 2});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 2; ++c)
        out.data[(static_cast<size_t>(y) * W + x) * 2 + c] = a->val.at3(c, y, x);
  Var r = g.make(std::move(out), a->requires_grad);
  if (r->requires_grad) {
    r->backward = [r = r.get(), a, H, W] {
      Tensor& ga = a->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < 2; ++c)
            ga.at3(c, y, x) += r->grad.data[(static_cast<size_t>(y) * W + x) * 2 + c];
    };
  }
  return r;
}

/// Identity sampling grid {H,W,2}, align-corners normalized coords.
inline Tensor identity_grid(int H, int W) {
  Tensor grid({H, W, 2});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      grid.data[(static_cast<size_t>(y) * W + x) * 2 + 0] =
          W > 1 ? -1.0 + 2.0 * x / (W - 1) : 0.0;
      grid.data[(static_cast<size_t>(y) * W + x) * 2 + 1] =
          H > 1 ? -1.0 + 2.0 * y / (H - 1) : 0.0;
    }
  return grid;
}

}  // namespace devgest
