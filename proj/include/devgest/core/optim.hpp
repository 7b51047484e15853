#pragma once

#include <cmath>
#include <map>
#include <string>

#include "devgest/core/nn.hpp"
#include "devgest/core/tensor.hpp"

namespace devgest {

/// Adam with bias correction. A zero gradient leaves the parameter exactly
/// unchanged (moments stay zero), which the ablation contracts rely on.
struct Adam {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, Tensor> m, v;

  void step(ParamStore& ps, const std::map<std::string, Tensor>& grads) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, param] : ps.t) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& grad = git->second;
      Tensor& mi = m.try_emplace(name, Tensor::zeros(param.shape)).first->second;
      Tensor& vi = v.try_emplace(name, Tensor::zeros(param.shape)).first->second;
      for (int64_t i = 0; i < param.numel(); ++i) {
        double gv = grad[i];
        mi[i] = beta1 * mi[i] + (1.0 - beta1) * gv;
        vi[i] = beta2 * vi[i] + (1.0 - beta2) * gv * gv;
        double mh = mi[i] / bc1;
        double vh = vi[i] / bc2;
        param[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }
};

}  // namespace devgest
