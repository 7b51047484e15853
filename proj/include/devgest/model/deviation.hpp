#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "devgest/core/autodiff.hpp"
#include "devgest/core/errors.hpp"
#include "devgest/core/nn.hpp"
#include "devgest/model/encoder.hpp"

namespace devgest {

struct DeviationConfig {
  int K = 64;          // latent motion feature length
  int n_regions = 10;  // soft regions composing the flow
  int mask_level = 1;  // pyramid level whose resolution carries masks/flow
  double L = 1.0;      // deviation ceiling
  bool learned_L = false;
  double c_lambda = 0.2;        // negative-slope of the output activation
  bool relative_motion = false;  // drive flow with MF_drive - MF_source
};

struct AblationFlags {
  bool disable_deviation = false;      // delta == 1: pure skip path
  bool disable_enhancer = false;       // skip the feature normalization stage
  bool disable_motion_decoder = false; // one global transform instead of per-region
};

/// Invocation counters used by ablation-contract tests.
struct CallCounters {
  long compute_deviation = 0;
  long compose_flow = 0;
};
inline CallCounters& counters() {
  static CallCounters c;
  return c;
}

struct MotionFeature {
  Var v;  // {1,K}
};
struct RegionTransforms {
  Var rt;  // {R,3}: columns theta, tx, ty (t already squashed to [-1,1])
};
struct FlowField {
  Var grid;  // {h,w,2}, clamped to [-1,1]
  RegionTransforms from;
};

// ---- parameter registration -------------------------------------------------

inline void init_deviation_params(ParamStore& ps, const DeviationConfig& cfg,
                                  const EncoderConfig& enc, Rng& rng) {
  // latent pose estimator: 3 stride-2 blocks then GAP + projection
  Conv2dLayer{"lpe.c0", enc.in_channels, 16, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{"lpe.c1", 16, 32, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{"lpe.c2", 32, 64, 3, 2, 1}.init(ps, rng);
  LinearLayer{"lpe.fc", 64, cfg.K}.init(ps, rng);
  // pose transform MLP; final layer zero-init so training starts at identity
  LinearLayer{"pose.fc0", cfg.K, 128}.init(ps, rng);
  LinearLayer{"pose.fc1", 128, 3 * cfg.n_regions}.init(ps, rng, /*zero_init=*/true);
  // mask head at the mask pyramid level
  int cm = encoder_width(enc, cfg.mask_level);
  Conv2dLayer{"mask.mid", cm, 32, 3, 1, 1}.init(ps, rng);
  Conv2dLayer{"mask.head", 32, cfg.n_regions + 1, 3, 1, 1}.init(ps, rng);
  // per-scale deviation gates (1x1) and decoder
  for (int s = 0; s < enc.depth; ++s) {
    Conv2dLayer{"dev.gate" + std::to_string(s), encoder_width(enc, s), 1, 1, 1, 0}.init(ps, rng);
    if (cfg.learned_L) ps.add("dev.L" + std::to_string(s), Tensor({1}));  // exp(0) = 1
  }
  ps.add("dec.seed", Tensor({encoder_width(enc, enc.depth - 1)}));
  for (int s = 0; s + 1 < enc.depth; ++s)
    Conv2dLayer{"dec.up" + std::to_string(s), encoder_width(enc, s + 1), encoder_width(enc, s), 3,
                1, 1}
        .init(ps, rng);
  Conv2dLayer{"dec.head", enc.base_width, 16, 3, 1, 1}.init(ps, rng);
  Conv2dLayer{"dec.out", 16, 3, 3, 1, 1}.init(ps, rng);
  // one enhancer per pyramid level
  for (int s = 0; s < enc.depth; ++s) {
    int c = encoder_width(enc, s);
    Tensor gamma({c});
    for (auto& v : gamma.data) v = 1.0;
    ps.add("enh.l" + std::to_string(s) + ".gamma", gamma);
    ps.add("enh.l" + std::to_string(s) + ".beta", Tensor({c}));
  }
}

// ---- latent pose estimation and transform ------------------------------------

inline MotionFeature estimate_latent_motion(Exec& ex, Var img, const DeviationConfig& cfg) {
  Graph& g = ex.g;
  Var x = leaky(g, Conv2dLayer{"lpe.c0", img->val.dim(0), 16, 3, 2, 1}(ex, img));
  x = leaky(g, Conv2dLayer{"lpe.c1", 16, 32, 3, 2, 1}(ex, x));
  x = leaky(g, Conv2dLayer{"lpe.c2", 32, 64, 3, 2, 1}(ex, x));
  Var pooled = reshape(g, mean_channel(g, x), {1, 64});
  return {LinearLayer{"lpe.fc", 64, cfg.K}(ex, pooled)};
}

inline RegionTransforms pose_transform(Exec& ex, const MotionFeature& mf,
                                       const DeviationConfig& cfg) {
  Graph& g = ex.g;
  Var h = leaky(g, LinearLayer{"pose.fc0", cfg.K, 128}(ex, mf.v));
  Var raw = LinearLayer{"pose.fc1", 128, 3 * cfg.n_regions}(ex, h);
  Var rows = reshape(g, raw, {cfg.n_regions, 3});
  Var theta = slice_cols(g, rows, 0, 1);
  Var t = vtanh(g, slice_cols(g, rows, 1, 3));
  return {concat_cols(g, {theta, t})};
}

/// Soft region masks {R+1,h,w} from a pyramid level; channel 0 is background.
inline Var region_masks(Exec& ex, Var phi, const DeviationConfig& cfg) {
  Graph& g = ex.g;
  Var m = leaky(g, Conv2dLayer{"mask.mid", phi->val.dim(0), 32, 3, 1, 1}(ex, phi));
  Var logits = Conv2dLayer{"mask.head", 32, cfg.n_regions + 1, 3, 1, 1}(ex, m);
  return softmax_channel(g, logits);
}

// ---- flow composition ---------------------------------------------------------

/// grid(p) = p + sum_r m_r(p) * (R(theta_r)(p - c_r) + c_r + t_r - p), with c_r the
/// mask centroid. masks {R+1,h,w} (channel 0 ignored), rt {R,3}. Output {h,w,2}.
inline Var compose_region_flow(Graph& g, const Var& masks, const Var& rt) {
  ++counters().compose_flow;
  const int R = rt->val.dim(0);
  if (masks->val.dim(0) != R + 1)
    throw Error("compose_region_flow: mask channels must be regions+1");
  const int h = masks->val.dim(1), w = masks->val.dim(2);
  const Tensor id = identity_grid(h, w);
  const double eps = 1e-8;

  // region centroids under the mask weighting
  std::vector<double> S(R), cx(R), cy(R);
  auto mval = [&](int r, int y, int x) { return masks->val.at3(r + 1, y, x); };
  for (int r = 0; r < R; ++r) {
    double s = eps, sx = 0, sy = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double m = mval(r, y, x);
        s += m;
        sx += m * id.data[(static_cast<size_t>(y) * w + x) * 2 + 0];
        sy += m * id.data[(static_cast<size_t>(y) * w + x) * 2 + 1];
      }
    S[r] = s;
    cx[r] = sx / s;
    cy[r] = sy / s;
  }

  // offset written as (R-I)(p-c) + t so the zero transform is exactly zero
  Tensor out = id;
  for (int r = 0; r < R; ++r) {
    double th = rt->val.at2(r, 0), tx = rt->val.at2(r, 1), ty = rt->val.at2(r, 2);
    double c = std::cos(th), s = std::sin(th);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        size_t i = (static_cast<size_t>(y) * w + x) * 2;
        double dx = id.data[i] - cx[r], dy = id.data[i + 1] - cy[r];
        double ox = (c - 1.0) * dx - s * dy + tx;
        double oy = s * dx + (c - 1.0) * dy + ty;
        double m = mval(r, y, x);
        out.data[i] += m * ox;
        out.data[i + 1] += m * oy;
      }
  }

  Var res = g.make(std::move(out), masks->requires_grad || rt->requires_grad);
  if (res->requires_grad) {
    res->backward = [res = res.get(), masks, rt, R, h, w, S, cx, cy, id] {
      Tensor* gmask = masks->requires_grad ? &masks->grad_buf() : nullptr;
      Tensor* grt = rt->requires_grad ? &rt->grad_buf() : nullptr;
      for (int r = 0; r < R; ++r) {
        double th = rt->val.at2(r, 0), tx = rt->val.at2(r, 1), ty = rt->val.at2(r, 2);
        double c = std::cos(th), s = std::sin(th);
        double Gx = 0, Gy = 0, dth = 0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            size_t i = (static_cast<size_t>(y) * w + x) * 2;
            double m = masks->val.at3(r + 1, y, x);
            double gx = res->grad.data[i], gy = res->grad.data[i + 1];
            double px = id.data[i], py = id.data[i + 1];
            double dx = px - cx[r], dy = py - cy[r];
            Gx += m * gx;
            Gy += m * gy;
            dth += m * (gx * (-s * dx - c * dy) + gy * (c * dx - s * dy));
          }
        if (grt) {
          grt->at2(r, 0) += dth;
          grt->at2(r, 1) += Gx;
          grt->at2(r, 2) += Gy;
        }
        if (gmask) {
          // centroid path: dL/dc = (I-R)^T G
          double dcx = (1 - c) * Gx - s * Gy;
          double dcy = s * Gx + (1 - c) * Gy;
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              size_t i = (static_cast<size_t>(y) * w + x) * 2;
              double gx = res->grad.data[i], gy = res->grad.data[i + 1];
              double dx = id.data[i] - cx[r], dy = id.data[i + 1] - cy[r];
              double ox = (c - 1.0) * dx - s * dy + tx;
              double oy = s * dx + (c - 1.0) * dy + ty;
              gmask->at3(r + 1, y, x) += gx * ox + gy * oy + (dcx * dx + dcy * dy) / S[r];
            }
        }
      }
    };
  }
  return res;
}

inline FlowField decode_flow(Graph& g, const RegionTransforms& rt, Var masks) {
  Var grid = vclamp(g, compose_region_flow(g, masks, rt.rt), -1.0, 1.0);
  return {grid, rt};
}

// ---- warping, deviation, gated decoding ---------------------------------------

/// Bilinearly resample a {h,w,2} grid to a new spatial size.
inline Var resize_flow(Graph& g, Var grid, int H, int W) {
  if (grid->val.dim(0) == H && grid->val.dim(1) == W) return grid;
  Var chw = hwc2_to_chw(g, grid);
  Var res = grid_sample(g, chw, g.constant(identity_grid(H, W)));
  return chw2_to_hwc(g, res);
}

/// Backward-warp features by the flow grid (resampled to their resolution).
inline Var warp_features(Graph& g, Var feats, Var grid) {
  Var gr = resize_flow(g, grid, feats->val.dim(1), feats->val.dim(2));
  return grid_sample(g, feats, gr);
}

/// delta = L * sigmoid(1x1-conv(F_w)), a single-channel map in (0, L).
inline Var compute_deviation(Exec& ex, Var warped, int scale, const DeviationConfig& cfg) {
  ++counters().compute_deviation;
  Graph& g = ex.g;
  Var logit =
      Conv2dLayer{"dev.gate" + std::to_string(scale), warped->val.dim(0), 1, 1, 1, 0}(ex, warped);
  Var sig = vsigmoid(g, logit);
  if (cfg.learned_L) {
    Var lraw = ex.p("dev.L" + std::to_string(scale));
    Var L = vexp(g, lraw);  // strictly positive
    Var Lmap = reshape(g, broadcast_scalar(g, L, logit->val.dim(1) * logit->val.dim(2)),
                       {1, logit->val.dim(1), logit->val.dim(2)});
    return mul(g, Lmap, sig);
  }
  return mul_scalar(g, sig, cfg.L);
}

/// Coarse-to-fine gated decoding. `warped` shallow->deep; `devs` parallel to it
/// (empty means delta == 1: pure skip path, the disabled-deviation ablation).
/// Returns the {3,H,W} pre-activation image.
inline Var gated_decode(Exec& ex, const std::vector<Var>& warped, const std::vector<Var>& devs,
                        const EncoderConfig& enc, std::vector<Var>* trace = nullptr) {
  Graph& g = ex.g;
  const int D = static_cast<int>(warped.size());
  if (D != enc.depth) throw Error("gated_decode: scale count mismatch");
  const bool gate = !devs.empty();
  if (gate && static_cast<int>(devs.size()) != D) throw Error("gated_decode: dev map count mismatch");

  Var z;
  for (int s = D - 1; s >= 0; --s) {
    if (!gate) {  // delta == 1: the skip feature passes straight through
      z = warped[s];
      if (trace) trace->push_back(z);
      continue;
    }
    const int Cs = warped[s]->val.dim(0);
    Var u;
    if (s == D - 1) {
      u = expand_channel(g, ex.p("dec.seed"), warped[s]->val.dim(1), warped[s]->val.dim(2));
    } else {
      u = leaky(g, Conv2dLayer{"dec.up" + std::to_string(s), warped[s + 1]->val.dim(0), Cs, 3, 1,
                               1}(ex, upsample_nearest2(g, z)));
    }
    Var d = tile_channel(g, devs[s], Cs);
    Var ones = g.constant(Tensor::full(d->val.shape, 1.0));
    z = add(g, mul(g, d, warped[s]), mul(g, sub(g, ones, d), u));
    if (trace) trace->push_back(z);
  }
  Var up = upsample_nearest2(g, z);
  Var head = leaky(g, Conv2dLayer{"dec.head", enc.base_width, 16, 3, 1, 1}(ex, up));
  return Conv2dLayer{"dec.out", 16, 3, 3, 1, 1}(ex, head);
}

/// Piecewise-linear output activation with configurable negative slope.
inline Var activation(Graph& g, Var z, double c_lambda) { return leaky(g, z, c_lambda); }

// ---- full reconstruction path ---------------------------------------------------

struct ReconstructOut {
  Var image;        // {3,H,W} in [0,1]
  Var grid;         // flow actually used, at mask resolution
  MotionFeature mf_source;  // only populated under relative_motion
};

/// Full source-image + driving-motion reconstruction (encode, enhance, flow,
/// warp, deviation gating, decode, squash).
inline ReconstructOut reconstruct(Exec& ex, Var source, const MotionFeature& mf_drive,
                                  const EncoderConfig& enc, const DeviationConfig& cfg,
                                  const AblationFlags& flags = {}) {
  Graph& g = ex.g;
  ReconstructOut out;

  FeaturePyramid py = encode_image(ex, source, enc);
  std::vector<Var> enhanced(py.phi.size());
  for (size_t s = 0; s < py.phi.size(); ++s) {
    if (flags.disable_enhancer) {
      enhanced[s] = py.phi[s];
    } else {
      enhanced[s] = enhance_features(ex, py.phi[s], enc, "enh.l" + std::to_string(s));
    }
  }

  MotionFeature mf = mf_drive;
  if (cfg.relative_motion) {
    out.mf_source = estimate_latent_motion(ex, source, cfg);
    mf = {sub(g, mf_drive.v, out.mf_source.v)};
  }
  RegionTransforms rt = pose_transform(ex, mf, cfg);

  Var phi_mask = enhanced[cfg.mask_level];
  const int mh = phi_mask->val.dim(1), mw = phi_mask->val.dim(2);
  if (flags.disable_motion_decoder) {
    // degenerate psi: one global transform, full-frame mask
    Tensor ones_mask({2, mh, mw});
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x) ones_mask.at3(1, y, x) = 1.0;
    RegionTransforms global{slice_rows(g, rt.rt, 0, 1)};
    out.grid = decode_flow(g, global, g.constant(ones_mask)).grid;
  } else {
    Var masks = region_masks(ex, phi_mask, cfg);
    out.grid = decode_flow(g, rt, masks).grid;
  }

  std::vector<Var> warped(enhanced.size());
  for (size_t s = 0; s < enhanced.size(); ++s)
    warped[s] = warp_features(g, enhanced[s], out.grid);

  std::vector<Var> devs;
  if (!flags.disable_deviation) {
    for (size_t s = 0; s < warped.size(); ++s)
      devs.push_back(compute_deviation(ex, warped[s], static_cast<int>(s), cfg));
  }

  Var z = gated_decode(ex, warped, devs, enc);
  out.image = vsigmoid(g, activation(g, z, cfg.c_lambda));
  return out;
}

}  // namespace devgest
