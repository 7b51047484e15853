#pragma once

#include <string>
#include <vector>

#include "devgest/core/autodiff.hpp"
#include "devgest/core/errors.hpp"
#include "devgest/core/nn.hpp"

namespace devgest {

struct EncoderConfig {
  int depth = 4;       // number of stride-2 blocks
  int base_width = 32; // channels after first block; doubles per level
  int in_channels = 3;
  double epsilon = 1e-5;       // enhancer variance floor
  bool scalar_stats = false;   // enhancer: one mean/std over the whole tensor instead of per channel
};

/// Deepest feature plus every intermediate map, shallow -> deep.
struct FeaturePyramid {
  Var F;                 // deepest, == phi.back()
  std::vector<Var> phi;  // phi[i] has spatial size H/2^{i+1}
};

inline int encoder_width(const EncoderConfig& cfg, int level) {
  int w = cfg.base_width;
  for (int i = 0; i < level; ++i) w *= 2;
  return w;
}

/// Registers conv weights for `encode_image` under `prefix`.
inline void init_encoder_params(ParamStore& ps, const EncoderConfig& cfg, Rng& rng,
                                const std::string& prefix = "enc") {
  int cin = cfg.in_channels;
  for (int i = 0; i < cfg.depth; ++i) {
    int cout = encoder_width(cfg, i);
    Conv2dLayer down(prefix + ".down" + std::to_string(i), cin, cout, 3, 2, 1);
    down.init(ps, rng);
    Conv2dLayer refine(prefix + ".refine" + std::to_string(i), cout, cout, 3, 1, 1);
    refine.init(ps, rng);
    cin = cout;
  }
}

/// Enhancer scale/shift per pyramid level (applied to the deepest map by default).
inline void init_enhancer_params(ParamStore& ps, const EncoderConfig& cfg,
                                 const std::string& prefix = "enh") {
  int c = encoder_width(cfg, cfg.depth - 1);
  Tensor gamma({c});
  for (auto& v : gamma.data) v = 1.0;
  ps.add(prefix + ".gamma", gamma);
  ps.add(prefix + ".beta", Tensor({c}));
}

/// Downsampling pyramid: each block = stride-2 conv + leaky, then 3x3 refine + leaky.
inline FeaturePyramid encode_image(Exec& ex, Var img, const EncoderConfig& cfg,
                                   const std::string& prefix = "enc") {
  if (img->val.dim(1) % (1 << cfg.depth) != 0 || img->val.dim(2) % (1 << cfg.depth) != 0)
    throw Error("encode_image: spatial size " + img->val.shape_str() + " not divisible by 2^" +
                std::to_string(cfg.depth));
  FeaturePyramid py;
  Var x = img;
  int cin = cfg.in_channels;
  for (int i = 0; i < cfg.depth; ++i) {
    int cout = encoder_width(cfg, i);
    Conv2dLayer down(prefix + ".down" + std::to_string(i), cin, cout, 3, 2, 1);
    x = leaky(ex.g, down(ex, x));
    Conv2dLayer refine(prefix + ".refine" + std::to_string(i), cout, cout, 3, 1, 1);
    x = leaky(ex.g, refine(ex, x));
    py.phi.push_back(x);
    cin = cout;
  }
  py.F = py.phi.back();
  return py;
}

/// (F - mean)/sqrt(var + eps) * gamma + beta. Stats over spatial dims per channel,
/// or over everything when cfg.scalar_stats is set (gamma/beta still per channel).
inline Var enhance_features(Exec& ex, Var F, const EncoderConfig& cfg,
                            const std::string& prefix = "enh") {
  Graph& g = ex.g;
  Var gamma = ex.p(prefix + ".gamma");
  Var beta = ex.p(prefix + ".beta");
  Var mean, var;
  if (cfg.scalar_stats) {
    int c = F->val.dim(0);
    mean = broadcast_scalar(g, mean_all(g, F), c);
    Var centered0 = sub(g, F, expand_channel(g, mean, F->val.dim(1), F->val.dim(2)));
    var = broadcast_scalar(g, mean_all(g, vsquare(g, centered0)), c);
  } else {
    mean = mean_channel(g, F);  // {C}
    Var centered0 = sub(g, F, expand_channel(g, mean, F->val.dim(1), F->val.dim(2)));
    var = mean_channel(g, vsquare(g, centered0));
  }
  Var centered = sub(g, F, expand_channel(g, mean, F->val.dim(1), F->val.dim(2)));
  Var denom = vsqrt(g, add_scalar(g, var, cfg.epsilon));
  Var norm = vdiv(g, centered, expand_channel(g, denom, F->val.dim(1), F->val.dim(2)));
  Var scaled = mul(g, norm, expand_channel(g, gamma, F->val.dim(1), F->val.dim(2)));
  return add(g, scaled, expand_channel(g, beta, F->val.dim(1), F->val.dim(2)));
}

}  // namespace devgest
