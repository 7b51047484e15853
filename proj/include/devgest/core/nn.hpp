#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "devgest/core/autodiff.hpp"
#include "devgest/core/rng.hpp"
#include "devgest/core/tensor.hpp"

namespace devgest {

/// Named parameter tensors. std::map keeps iteration order deterministic,
/// which the optimizer and checkpoint writer rely on.
struct ParamStore {
  std::map<std::string, Tensor> t;

  Tensor& add(const std::string& name, Tensor init) {
    auto [it, ok] = t.emplace(name, std::move(init));
    if (!ok) throw std::logic_error("ParamStore: duplicate param " + name);
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = t.find(name);
    if (it == t.end()) throw std::out_of_range("ParamStore: missing param " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = t.find(name);
    if (it == t.end()) throw std::out_of_range("ParamStore: missing param " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return t.count(name) != 0; }
};

/// One forward pass: a graph plus lazy bindings of store params into it.
/// With training=false every binding is a constant and no tape backward
/// closures are created, so the same code path serves inference.
class Exec {
 public:
  explicit Exec(ParamStore& store, bool training = true)
      : store_(&store), training_(training) {}

  Graph g;

  /// Trainable parameter (leaf when training, constant otherwise).
  Var p(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Tensor copy = store_->get(name);
    Var v = training_ ? g.leaf(std::move(copy)) : g.constant(std::move(copy));
    bound_.emplace(name, v);
    return v;
  }

  /// Parameter from a frozen auxiliary store; never receives gradient.
  Var frozen(const ParamStore& s, const std::string& name) {
    auto key = std::make_pair(static_cast<const void*>(&s), name);
    auto it = frozen_bound_.find(key);
    if (it != frozen_bound_.end()) return it->second;
    Var v = g.constant(s.get(name));
    frozen_bound_.emplace(key, v);
    return v;
  }

  /// Gradient of a bound trainable param after backward; nullptr when the
  /// param never entered the graph or received no gradient.
  const Tensor* grad_of(const std::string& name) const {
    auto it = bound_.find(name);
    if (it == bound_.end() || !it->second->has_grad()) return nullptr;
    return &it->second->grad;
  }

  bool training() const { return training_; }
  ParamStore& store() { return *store_; }

 private:
  ParamStore* store_;
  bool training_;
  std::map<std::string, Var> bound_;
  std::map<std::pair<const void*, std::string>, Var> frozen_bound_;
};

// ---- layers -----------------------------------------------------------------

struct Conv2dLayer {
  std::string name;
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  void init(ParamStore& ps, Rng& rng, bool zero_init = false) const {
    Tensor w({cout, cin, k, k});
    if (!zero_init) {
      double std = std::sqrt(2.0 / (cin * k * k));
      for (auto& v : w.data) v = rng.normal(0.0, std);
    }
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor({cout}));
  }
  Var operator()(Exec& ex, const Var& x) const {
    return conv2d(ex.g, x, ex.p(name + ".w"), ex.p(name + ".b"), stride, pad);
  }
  Var frozen_apply(Exec& ex, const ParamStore& ps, const Var& x) const {
    return conv2d(ex.g, x, ex.frozen(ps, name + ".w"), ex.frozen(ps, name + ".b"),
                  stride, pad);
  }
};

struct LinearLayer {
  std::string name;
  int in = 0, out = 0;

  void init(ParamStore& ps, Rng& rng, bool zero_init = false) const {
    Tensor w({in, out});
    if (!zero_init) {
      double std = std::sqrt(2.0 / (in + out));
      for (auto& v : w.data) v = rng.normal(0.0, std);
    }
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor({out}));
  }
  /// x {T,in} -> {T,out}
  Var operator()(Exec& ex, const Var& x) const {
    return add_rowvec(ex.g, matmul(ex.g, x, ex.p(name + ".w")), ex.p(name + ".b"));
  }
};

/// Row-wise layer normalization with learned affine.
struct LayerNorm {
  std::string name;
  int dim = 0;
  double eps = 1e-5;

  void init(ParamStore& ps) const {
    ps.add(name + ".g", Tensor::full({dim}, 1.0));
    ps.add(name + ".b", Tensor({dim}));
  }
  Var operator()(Exec& ex, const Var& x) const {
    Graph& g = ex.g;
    int d = x->val.dim(1);
    Var mu = expand_cols(g, mean_rows(g, x), d);
    Var xc = sub(g, x, mu);
    Var var = expand_cols(g, mean_rows(g, vsquare(g, xc)), d);
    Var xhat = vdiv(g, xc, vsqrt(g, add_scalar(g, var, eps)));
    return add_rowvec(g, mul_rowvec(g, xhat, ex.p(name + ".g")), ex.p(name + ".b"));
  }
};

}  // namespace devgest
