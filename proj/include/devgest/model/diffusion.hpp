#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "devgest/core/autodiff.hpp"
#include "devgest/core/errors.hpp"
#include "devgest/core/nn.hpp"
#include "devgest/core/rng.hpp"

namespace devgest {

// ---- schedule -------------------------------------------------------------------

struct DiffusionSchedule {
  int t_steps = 0;
  std::vector<double> alpha_bar;  // alpha_bar[t-1] is the value at step t in [1, T]
};

enum class ScheduleKind { Cosine, Linear };

inline DiffusionSchedule make_schedule(int t_steps, ScheduleKind kind = ScheduleKind::Cosine) {
  if (t_steps < 2) throw Error("make_schedule: need at least 2 steps");
  DiffusionSchedule s;
  s.t_steps = t_steps;
  s.alpha_bar.resize(t_steps);
  if (kind == ScheduleKind::Cosine) {
    const double off = 0.008;
    auto f = [&](double t) {
      double c = std::cos((t / t_steps + off) / (1.0 + off) * M_PI / 2.0);
      return c * c;
    };
    double f0 = f(0.0);
    for (int t = 1; t <= t_steps; ++t) s.alpha_bar[t - 1] = f(t) / f0;
  } else {
    double ab = 1.0;
    for (int t = 1; t <= t_steps; ++t) {
      double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / (t_steps - 1);
      ab *= 1.0 - beta;
      s.alpha_bar[t - 1] = ab;
    }
  }
  double prev = 1.0;
  for (double& a : s.alpha_bar) {
    a = std::clamp(a, 1e-6, 0.9999);
    if (a >= prev) a = prev * (1.0 - 1e-12);  // keep strictly decreasing after clipping
    prev = a;
  }
  return s;
}

// ---- forward noising --------------------------------------------------------------

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& s) {
  if (t < 1 || t > s.t_steps) throw Error("q_sample: t out of range");
  if (x0.shape != eps.shape) throw Error("q_sample: eps shape mismatch");
  double ab = s.alpha_bar[static_cast<size_t>(t) - 1];
  double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = x0;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// ---- denoiser ---------------------------------------------------------------------

struct DiffusionConfig {
  int K = 64;          // motion feature width
  int M = 8;           // frames per window
  int audio_dim = 26;  // audio feature columns per frame
  int width = 128;
  int blocks = 4;
  int heads = 4;
  int t_steps = 50;
  double lambda_vel = 1.0;
  double lambda_acc = 1.0;
};

/// Everything the denoiser sees besides the noisy window itself.
struct Condition {
  Tensor audio;      // {M, audio_dim}, aligned with the window
  Tensor prev4;      // {4, K} motion features of the previous four frames
  Tensor source_mf;  // {1, K} motion feature of the source image
};

inline Tensor sinusoid_row(double pos, int dim) {
  Tensor r({1, dim});
  for (int i = 0; i < dim; i += 2) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
    r.data[static_cast<size_t>(i)] = std::sin(pos * freq);
    if (i + 1 < dim) r.data[static_cast<size_t>(i) + 1] = std::cos(pos * freq);
  }
  return r;
}

inline Tensor positional_table(int n, int dim) {
  Tensor t({n, dim});
  for (int p = 0; p < n; ++p) {
    Tensor row = sinusoid_row(p, dim);
    std::copy(row.data.begin(), row.data.end(),
              t.data.begin() + static_cast<size_t>(p) * dim);
  }
  return t;
}

inline void init_denoiser_params(ParamStore& ps, const DiffusionConfig& cfg, Rng& rng) {
  const int W = cfg.width;
  if (W % cfg.heads) throw Error("init_denoiser_params: width not divisible by heads");
  LinearLayer{"dn.in", cfg.K + cfg.audio_dim, W}.init(ps, rng);
  LinearLayer{"dn.src", cfg.K, W}.init(ps, rng);
  LinearLayer{"dn.prev", cfg.K, W}.init(ps, rng);
  LinearLayer{"dn.temb", W, W}.init(ps, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string p = "dn.b" + std::to_string(b);
    LayerNorm{p + ".ln1", W}.init(ps);
    LinearLayer{p + ".q", W, W}.init(ps, rng);
    LinearLayer{p + ".k", W, W}.init(ps, rng);
    LinearLayer{p + ".v", W, W}.init(ps, rng);
    LinearLayer{p + ".o", W, W}.init(ps, rng);
    LayerNorm{p + ".ln2", W}.init(ps);
    LinearLayer{p + ".m1", W, 2 * W}.init(ps, rng);
    LinearLayer{p + ".m2", 2 * W, W}.init(ps, rng);
  }
  LayerNorm{"dn.lnf", W}.init(ps);
  LinearLayer{"dn.out", W, cfg.K}.init(ps, rng);
}

namespace detail {

inline Var attention(Exec& ex, const std::string& p, int heads, Var x) {
  Graph& g = ex.g;
  const int W = x->val.dim(1);
  const int hd = W / heads;
  Var h = LayerNorm{p + ".ln1", W}(ex, x);
  Var q = LinearLayer{p + ".q", W, W}(ex, h);
  Var k = LinearLayer{p + ".k", W, W}(ex, h);
  Var v = LinearLayer{p + ".v", W, W}(ex, h);
  std::vector<Var> outs;
  for (int i = 0; i < heads; ++i) {
    Var qi = slice_cols(g, q, i * hd, (i + 1) * hd);
    Var ki = slice_cols(g, k, i * hd, (i + 1) * hd);
    Var vi = slice_cols(g, v, i * hd, (i + 1) * hd);
    Var att = softmax_rows(
        g, mul_scalar(g, matmul(g, qi, transpose(g, ki)), 1.0 / std::sqrt(double(hd))));
    outs.push_back(matmul(g, att, vi));
  }
  return add(g, x, LinearLayer{p + ".o", W, W}(ex, concat_cols(g, outs)));
}

inline Var mlp_block(Exec& ex, const std::string& p, Var x) {
  Graph& g = ex.g;
  const int W = x->val.dim(1);
  Var h = LayerNorm{p + ".ln2", W}(ex, x);
  h = vgelu(g, LinearLayer{p + ".m1", W, 2 * W}(ex, h));
  return add(g, x, LinearLayer{p + ".m2", 2 * W, W}(ex, h));
}

}  // namespace detail

/// Predict the clean window from a noisy one. Tokens: [t, source, prev4, frames...];
/// each frame token carries its audio columns; sinusoidal positions mark order.
inline Var predict_clean(Exec& ex, const DiffusionConfig& cfg, Var x_t, int t,
                         const Condition& cond) {
  Graph& g = ex.g;
  const int M = x_t->val.dim(0);
  const int W = cfg.width;
  if (x_t->val.dim(1) != cfg.K) throw Error("predict_clean: x_t feature width mismatch");
  if (cond.audio.dim(0) != M || cond.audio.dim(1) != cfg.audio_dim)
    throw Error("predict_clean: audio window mismatch");
  if (cond.prev4.dim(0) != 4 || cond.prev4.dim(1) != cfg.K)
    throw Error("predict_clean: prev4 must be {4, K}");
  if (cond.source_mf.dim(0) != 1 || cond.source_mf.dim(1) != cfg.K)
    throw Error("predict_clean: source_mf must be {1, K}");

  Var temb = LinearLayer{"dn.temb", W, W}(ex, g.constant(sinusoid_row(t, W)));
  Var src = LinearLayer{"dn.src", cfg.K, W}(ex, g.constant(cond.source_mf));
  Var prev = LinearLayer{"dn.prev", cfg.K, W}(ex, g.constant(cond.prev4));
  Var frames = LinearLayer{"dn.in", cfg.K + cfg.audio_dim, W}(
      ex, concat_cols(g, {x_t, g.constant(cond.audio)}));

  Var x = concat_rows(g, {temb, src, prev, frames});
  x = add(g, x, g.constant(positional_table(M + 6, W)));
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string p = "dn.b" + std::to_string(b);
    x = detail::attention(ex, p, cfg.heads, x);
    x = detail::mlp_block(ex, p, x);
  }
  x = LayerNorm{"dn.lnf", W}(ex, x);
  return LinearLayer{"dn.out", W, cfg.K}(ex, slice_rows(g, x, 6, 6 + M));
}

// ---- training loss ----------------------------------------------------------------

struct DiffLossParts {
  Var mf, vel, acc, total;
};

/// MSE on the window plus first/second temporal-difference penalties.
inline DiffLossParts diffusion_loss(Graph& g, Var xhat, Var x0, double lambda_vel = 1.0,
                                    double lambda_acc = 1.0) {
  detail::check_same_shape(xhat, x0, "diffusion_loss");
  const int M = xhat->val.dim(0);
  if (M < 3) throw Error("diffusion_loss: need at least 3 frames for acceleration");
  auto diff = [&](Var v) {
    return sub(g, slice_rows(g, v, 1, v->val.dim(0)), slice_rows(g, v, 0, v->val.dim(0) - 1));
  };
  DiffLossParts out;
  out.mf = mean_all(g, vsquare(g, sub(g, xhat, x0)));
  Var dh = diff(xhat), d0 = diff(x0);
  out.vel = mean_all(g, vsquare(g, sub(g, dh, d0)));
  out.acc = mean_all(g, vsquare(g, sub(g, diff(dh), diff(d0))));
  out.total = add(g, out.mf, add(g, mul_scalar(g, out.vel, lambda_vel),
                                 mul_scalar(g, out.acc, lambda_acc)));
  return out;
}

// ---- sampling ----------------------------------------------------------------------

/// Deterministic DDIM-style sampler: re-derive the implied noise from the clean
/// prediction, then step the mixture down the schedule.
inline Tensor sample(ParamStore& params, const DiffusionConfig& cfg, const Condition& cond,
                     const DiffusionSchedule& sched, int steps, uint64_t seed) {
  if (steps < 1 || steps > sched.t_steps) throw Error("sample: bad step count");
  const int M = cond.audio.dim(0);
  Tensor x({M, cfg.K});
  Rng rng(seed);
  for (auto& v : x.data) v = rng.normal();

  std::vector<int> ts(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    int t = static_cast<int>(std::llround(
        static_cast<double>(sched.t_steps) * (steps - i) / steps));
    ts[static_cast<size_t>(i)] = std::max(t, 1);
  }
  for (size_t i = 1; i < ts.size(); ++i)
    if (ts[i] >= ts[i - 1]) ts[i] = std::max(ts[i - 1] - 1, 1);

  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    Exec ex(params, /*training=*/false);
    Var xhat = predict_clean(ex, cfg, ex.g.constant(x), t, cond);
    const Tensor& x0 = xhat->val;
    double ab = sched.alpha_bar[static_cast<size_t>(t) - 1];
    double ab_next = i + 1 < ts.size() ? sched.alpha_bar[static_cast<size_t>(ts[i + 1]) - 1] : 1.0;
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    double na = std::sqrt(ab_next), nb = std::sqrt(1.0 - ab_next);
    for (int64_t j = 0; j < x.numel(); ++j) {
      double eps_hat = (x[j] - sa * x0[j]) / sb;
      x[j] = na * x0[j] + nb * eps_hat;
    }
  }
  return x;
}

/// Generate motion features for a whole audio track, window by window. Each
/// window is conditioned on the last four frames already emitted (the source
/// feature stands in before anything exists). Audio that does not fill the last
/// window is padded by repeating its final frame; the output is trimmed back.
inline Tensor rollout(ParamStore& params, const DiffusionConfig& cfg, const Tensor& full_audio,
                      const Tensor& source_mf, const DiffusionSchedule& sched, int steps,
                      uint64_t seed) {
  const int M = cfg.M;
  const int n_frames = full_audio.dim(0);
  if (full_audio.dim(1) != cfg.audio_dim) throw Error("rollout: audio feature width mismatch");
  if (n_frames < M) throw Error("rollout: audio shorter than one window");
  if (source_mf.dim(0) != 1 || source_mf.dim(1) != cfg.K)
    throw Error("rollout: source_mf must be {1, K}");

  const int n_win = (n_frames + M - 1) / M;
  Tensor out({n_frames, cfg.K});
  std::vector<Tensor> history;  // emitted rows, each {1, K}
  auto hist_row = [&](int back) -> const Tensor& {
    // back = 1 is the newest emitted frame; fall back to the source feature
    if (static_cast<size_t>(back) <= history.size()) return history[history.size() - back];
    return source_mf;
  };

  for (int w = 0; w < n_win; ++w) {
    Condition cond;
    cond.source_mf = source_mf;
    cond.prev4 = Tensor({4, cfg.K});
    for (int r = 0; r < 4; ++r) {
      const Tensor& row = hist_row(4 - r);
      std::copy(row.data.begin(), row.data.end(),
                cond.prev4.data.begin() + static_cast<size_t>(r) * cfg.K);
    }
    cond.audio = Tensor({M, cfg.audio_dim});
    for (int r = 0; r < M; ++r) {
      int src = std::min(w * M + r, n_frames - 1);
      std::copy(full_audio.data.begin() + static_cast<size_t>(src) * cfg.audio_dim,
                full_audio.data.begin() + static_cast<size_t>(src + 1) * cfg.audio_dim,
                cond.audio.data.begin() + static_cast<size_t>(r) * cfg.audio_dim);
    }

    Rng wrng = Rng(seed).split(static_cast<uint64_t>(w));
    Tensor win = sample(params, cfg, cond, sched, steps, wrng.next_u64());
    for (int r = 0; r < M; ++r) {
      int dst = w * M + r;
      if (dst >= n_frames) break;
      Tensor row({1, cfg.K});
      std::copy(win.data.begin() + static_cast<size_t>(r) * cfg.K,
                win.data.begin() + static_cast<size_t>(r + 1) * cfg.K, row.data.begin());
      std::copy(row.data.begin(), row.data.end(),
                out.data.begin() + static_cast<size_t>(dst) * cfg.K);
      history.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace devgest
