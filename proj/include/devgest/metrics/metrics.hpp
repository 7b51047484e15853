#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "devgest/core/errors.hpp"
#include "devgest/core/rng.hpp"
#include "devgest/core/tensor.hpp"
#include "devgest/media/image.hpp"
#include "devgest/model/deviation.hpp"
#include "devgest/model/losses.hpp"

namespace devgest {

// ---- Gaussian statistics and Frechet distance ---------------------------------------

struct GaussianStats {
  Tensor mean;  // {d}
  Tensor cov;   // {d,d}, symmetric PSD
};

/// Sample mean and unbiased covariance; rows are observations.
inline GaussianStats fit_gaussian(const Tensor& feats) {
  if (feats.shape.size() != 2) throw Error("fit_gaussian: expected a {n,d} matrix");
  const int n = feats.dim(0), d = feats.dim(1);
  if (n < 2) throw Error("fit_gaussian: need at least 2 samples");
  GaussianStats s;
  s.mean = Tensor({d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) s.mean[j] += feats.at2(i, j);
  for (int j = 0; j < d; ++j) s.mean[j] /= n;
  s.cov = Tensor({d, d});
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      double da = feats.at2(i, a) - s.mean[a];
      for (int b = a; b < d; ++b)
        s.cov.at2(a, b) += da * (feats.at2(i, b) - s.mean[b]);
    }
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      double v = s.cov.at2(a, b) / (n - 1);
      s.cov.at2(a, b) = v;
      s.cov.at2(b, a) = v;
    }
  return s;
}

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major, size d*d).
/// On return `a` holds eigenvalues on its diagonal and V the eigenvectors as columns.
inline void jacobi_eigen(std::vector<double>& a, int d, std::vector<double>& eigvals,
                         std::vector<double>& V) {
  V.assign(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) V[static_cast<size_t>(i) * d + i] = 1.0;
  auto A = [&](int r, int c) -> double& { return a[static_cast<size_t>(r) * d + c]; };
  auto Vm = [&](int r, int c) -> double& { return V[static_cast<size_t>(r) * d + c]; };

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) {
        double apq = A(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < d; ++k) {
          double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          double vkp = Vm(k, p), vkq = Vm(k, q);
          Vm(k, p) = c * vkp - s * vkq;
          Vm(k, q) = s * vkp + c * vkq;
        }
      }
  }
  eigvals.resize(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) eigvals[static_cast<size_t>(i)] = A(i, i);
}

/// Symmetric PSD square root; eigenvalues slightly below zero are clamped,
/// ones beyond the tolerance are an error.
inline std::vector<double> psd_sqrt(std::vector<double> a, int d, double tol = 1e-8) {
  double scale = 1.0;
  for (int i = 0; i < d; ++i) scale = std::max(scale, std::fabs(a[static_cast<size_t>(i) * d + i]));
  std::vector<double> w, V;
  jacobi_eigen(a, d, w, V);
  for (double& x : w) {
    if (x < -tol * scale) throw Error("psd_sqrt: matrix not PSD within tolerance");
    x = x > 0 ? std::sqrt(x) : 0.0;
  }
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double v = 0;
      for (int k = 0; k < d; ++k)
        v += V[static_cast<size_t>(i) * d + k] * w[static_cast<size_t>(k)] *
             V[static_cast<size_t>(j) * d + k];
      out[static_cast<size_t>(i) * d + j] = v;
    }
  return out;
}

inline std::vector<double> matmul_sq(const std::vector<double>& x, const std::vector<double>& y,
                                     int d) {
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      double xv = x[static_cast<size_t>(i) * d + k];
      if (xv == 0.0) continue;
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += xv * y[static_cast<size_t>(k) * d + j];
    }
  return out;
}

}  // namespace detail

/// ||m1-m2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}), the Gaussian-fit Frechet distance.
inline double frechet_distance(const GaussianStats& s1, const GaussianStats& s2) {
  const int d = s1.mean.dim(0);
  if (s2.mean.dim(0) != d) throw Error("frechet_distance: dimension mismatch");
  for (const GaussianStats* s : {&s1, &s2}) {
    if (s->cov.dim(0) != d || s->cov.dim(1) != d)
      throw Error("frechet_distance: covariance shape mismatch");
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j)
        if (std::fabs(s->cov.at2(i, j) - s->cov.at2(j, i)) > 1e-8)
          throw Error("frechet_distance: covariance not symmetric");
  }

  double dist = 0.0;
  for (int i = 0; i < d; ++i) {
    double dm = s1.mean[i] - s2.mean[i];
    dist += dm * dm;
  }
  double tr12 = 0.0;
  {
    std::vector<double> c1(s1.cov.data.begin(), s1.cov.data.end());
    std::vector<double> c2(s2.cov.data.begin(), s2.cov.data.end());
    std::vector<double> r1 = detail::psd_sqrt(std::move(c1), d);
    std::vector<double> inner = detail::matmul_sq(detail::matmul_sq(r1, c2, d), r1, d);
    // symmetrize away the multiplication round-off before the second root
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) {
        double v = 0.5 * (inner[static_cast<size_t>(i) * d + j] + inner[static_cast<size_t>(j) * d + i]);
        inner[static_cast<size_t>(i) * d + j] = v;
        inner[static_cast<size_t>(j) * d + i] = v;
      }
    std::vector<double> root = detail::psd_sqrt(std::move(inner), d);
    for (int i = 0; i < d; ++i) tr12 += root[static_cast<size_t>(i) * d + i];
  }
  for (int i = 0; i < d; ++i) dist += s1.cov.at2(i, i) + s2.cov.at2(i, i);
  dist -= 2.0 * tr12;
  if (dist < 0.0 && dist > -1e-6) dist = 0.0;
  return dist;
}

/// Frechet distance between Gaussian fits of two feature sets (rows = samples).
inline double fgd(const Tensor& real_feats, const Tensor& gen_feats) {
  return frechet_distance(fit_gaussian(real_feats), fit_gaussian(gen_feats));
}

// ---- diversity -------------------------------------------------------------------------

/// Mean pairwise Euclidean distance over all unordered pairs of rows.
inline double diversity(const Tensor& feats) {
  if (feats.shape.size() != 2) throw Error("diversity: expected a {n,d} matrix");
  const int n = feats.dim(0), d = feats.dim(1);
  if (n < 2) throw Error("diversity: need at least 2 feature vectors");
  double sum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) {
        double dv = feats.at2(i, k) - feats.at2(j, k);
        acc += dv * dv;
      }
      sum += std::sqrt(acc);
    }
  return sum / (0.5 * n * (n - 1));
}

// ---- image metrics ------------------------------------------------------------------------

inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  if (a.w != b.w || a.h != b.h) throw Error("psnr: shape mismatch");
  if (peak <= 0) throw Error("psnr: peak must be positive");
  double mse = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    double d = a.px[i] - b.px[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.px.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// Mean local SSIM over valid window positions, averaged across channels.
inline double ssim(const Image& a, const Image& b, int window = 11, double sigma = 1.5,
                   double k1 = 0.01, double k2 = 0.03, double peak = 1.0) {
  if (a.w != b.w || a.h != b.h) throw Error("ssim: shape mismatch");
  if (a.w < window || a.h < window) throw Error("ssim: image smaller than the window");
  // SSIM(x,x) == 1 identically; the window math only matches to an ulp because
  // fp contraction rounds numerator and denominator differently
  if (a.px == b.px) return 1.0;
  std::vector<double> kern(static_cast<size_t>(window) * window);
  const int r = window / 2;
  double ksum = 0.0;
  for (int y = 0; y < window; ++y)
    for (int x = 0; x < window; ++x) {
      double dy = y - r, dx = x - r;
      double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      kern[static_cast<size_t>(y) * window + x] = v;
      ksum += v;
    }
  for (double& v : kern) v /= ksum;

  const double c1 = (k1 * peak) * (k1 * peak);
  const double c2 = (k2 * peak) * (k2 * peak);
  double total = 0.0;
  int64_t count = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y + window <= a.h; ++y)
      for (int x = 0; x + window <= a.w; ++x) {
        double ma = 0, mb = 0, va = 0, vb = 0, cab = 0;
        for (int wy = 0; wy < window; ++wy)
          for (int wx = 0; wx < window; ++wx) {
            double k = kern[static_cast<size_t>(wy) * window + wx];
            double pa = a.px[(static_cast<size_t>(y + wy) * a.w + (x + wx)) * 3 + c];
            double pb = b.px[(static_cast<size_t>(y + wy) * b.w + (x + wx)) * 3 + c];
            ma += k * pa;
            mb += k * pb;
            va += k * pa * pa;
            vb += k * pb * pb;
            cab += k * pa * pb;
          }
        va -= ma * ma;
        vb -= mb * mb;
        cab -= ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cab + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

/// Perceptual distance on unit-normalized frozen features, per-layer mean
/// squared differences summed. Proxy for LPIPS.
inline double lpips_proxy(const Image& a, const Image& b, const PerceptualNet& net) {
  if (a.w != b.w || a.h != b.h) throw Error("lpips_proxy: shape mismatch");
  ParamStore dummy;
  Exec ex(dummy, /*training=*/false);
  auto ta = net.taps(ex, ex.g.constant(a.to_chw()));
  auto tb = net.taps(ex, ex.g.constant(b.to_chw()));
  double total = 0.0;
  for (size_t l = 0; l < ta.size(); ++l) {
    const Tensor& fa = ta[l]->val;
    const Tensor& fb = tb[l]->val;
    const int C = fa.dim(0), H = fa.dim(1), W = fa.dim(2);
    double layer = 0.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double na = 1e-10, nb = 1e-10;
        for (int c = 0; c < C; ++c) {
          na += fa.at3(c, y, x) * fa.at3(c, y, x);
          nb += fb.at3(c, y, x) * fb.at3(c, y, x);
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        for (int c = 0; c < C; ++c) {
          double d = fa.at3(c, y, x) / na - fb.at3(c, y, x) / nb;
          layer += d * d;
        }
      }
    total += layer / (static_cast<double>(C) * H * W);
  }
  return total;
}

// ---- video features for the FVD proxy ------------------------------------------------------

/// Frozen random 3-D conv net over clips resampled to a fixed (T, H, W).
struct VideoFeatureNet {
  uint64_t seed = 2024;
  int frames = 16, size = 32;
  Tensor w1, b1, w2, b2;  // {8,3,3,3,3} and {16,8,3,3,3}

  static VideoFeatureNet make(uint64_t seed = 2024) {
    VideoFeatureNet net;
    net.seed = seed;
    Rng rng(seed);
    auto init = [&](std::vector<int> shape) {
      Tensor t(shape);
      double std = std::sqrt(2.0 / (shape[1] * shape[2] * shape[3] * shape[4]));
      for (auto& v : t.data) v = rng.normal(0.0, std);
      return t;
    };
    net.w1 = init({8, 3, 3, 3, 3});
    net.b1 = Tensor({8});
    net.w2 = init({16, 8, 3, 3, 3});
    net.b2 = Tensor({16});
    return net;
  }

  /// {16}-dim descriptor of one clip.
  Tensor features(const std::vector<Image>& clip) const {
    if (clip.empty()) throw Error("video features: empty clip");
    // resample to frames x size x size (nearest frame, bilinear space)
    Tensor x({3, frames, size, size});
    for (int t = 0; t < frames; ++t) {
      int src = std::min(static_cast<int>(clip.size()) - 1,
                         t * static_cast<int>(clip.size()) / frames);
      Image im = resize_image(clip[static_cast<size_t>(src)], size, size);
      Tensor chw = im.to_chw();
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
          for (int xx = 0; xx < size; ++xx)
            x.data[((static_cast<size_t>(c) * frames + t) * size + y) * size + xx] =
                chw.at3(c, y, xx);
    }
    Tensor h1 = conv3(x, w1, b1);
    Tensor h2 = conv3(h1, w2, b2);
    const int C = h2.dim(0);
    int64_t spatial = h2.numel() / C;
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
      double sum = 0;
      for (int64_t i = 0; i < spatial; ++i) sum += h2.data[static_cast<size_t>(c) * spatial + i];
      out[c] = sum / static_cast<double>(spatial);
    }
    return out;
  }

 private:
  /// stride-2, pad-1 3-D convolution followed by a leaky rectifier.
  static Tensor conv3(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int CI = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int CO = w.dim(0), K = w.dim(2);
    const int TO = (T + 2 - K) / 2 + 1, HO = (H + 2 - K) / 2 + 1, WO = (W + 2 - K) / 2 + 1;
    Tensor out({CO, TO, HO, WO});
    auto xv = [&](int c, int t, int y, int xx) {
      return x.data[((static_cast<size_t>(c) * T + t) * H + y) * W + xx];
    };
    for (int o = 0; o < CO; ++o)
      for (int t = 0; t < TO; ++t)
        for (int y = 0; y < HO; ++y)
          for (int xx = 0; xx < WO; ++xx) {
            double acc = b[o];
            for (int c = 0; c < CI; ++c)
              for (int kt = 0; kt < K; ++kt) {
                int st = t * 2 - 1 + kt;
                if (st < 0 || st >= T) continue;
                for (int ky = 0; ky < K; ++ky) {
                  int sy = y * 2 - 1 + ky;
                  if (sy < 0 || sy >= H) continue;
                  for (int kx = 0; kx < K; ++kx) {
                    int sx = xx * 2 - 1 + kx;
                    if (sx < 0 || sx >= W) continue;
                    acc += w.data[(((static_cast<size_t>(o) * CI + c) * K + kt) * K + ky) * K + kx] *
                           xv(c, st, sy, sx);
                  }
                }
              }
            out.data[((static_cast<size_t>(o) * TO + t) * HO + y) * WO + xx] =
                acc >= 0 ? acc : 0.2 * acc;
          }
    return out;
  }
};

/// Frechet distance between video-feature Gaussians of two clip sets.
inline double fvd_proxy(const std::vector<std::vector<Image>>& real_clips,
                        const std::vector<std::vector<Image>>& gen_clips,
                        const VideoFeatureNet& net) {
  if (real_clips.size() < 2 || gen_clips.size() < 2)
    throw Error("fvd_proxy: need at least 2 clips per side");
  auto featurize = [&](const std::vector<std::vector<Image>>& clips) {
    Tensor f({static_cast<int>(clips.size()), 16});
    for (size_t i = 0; i < clips.size(); ++i) {
      Tensor row = net.features(clips[i]);
      std::copy(row.data.begin(), row.data.end(), f.data.begin() + static_cast<int64_t>(i) * 16);
    }
    return f;
  };
  return fgd(featurize(real_clips), featurize(gen_clips));
}

// ---- report ------------------------------------------------------------------------------

struct EvalConfig {
  uint64_t seed = 2024;        // frozen feature extractors
  int crop_size = 32;          // hand/lip crops are resized to this before scoring
  ParamStore* lpe_params = nullptr;  // trained motion-feature extractor, if available
  DeviationConfig dev;               // geometry for lpe_params
  PerceptualConfig perc;             // LPIPS proxy net
};

/// Seed-frozen stand-in motion-feature extractor for FGD when no trained
/// parameters are supplied.
inline ParamStore make_proxy_lpe(uint64_t seed, int K, int in_channels = 3) {
  ParamStore ps;
  Rng rng(seed);
  Conv2dLayer{"lpe.c0", in_channels, 16, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{"lpe.c1", 16, 32, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{"lpe.c2", 32, 64, 3, 2, 1}.init(ps, rng);
  LinearLayer{"lpe.fc", 64, K}.init(ps, rng);
  return ps;
}

inline Tensor clip_motion_features(ParamStore& lpe, const std::vector<Image>& frames,
                                   const DeviationConfig& dev) {
  Tensor out({static_cast<int>(frames.size()), dev.K});
  for (size_t i = 0; i < frames.size(); ++i) {
    Exec ex(lpe, /*training=*/false);
    MotionFeature mf = estimate_latent_motion(ex, ex.g.constant(frames[i].to_chw()), dev);
    std::copy(mf.v->val.data.begin(), mf.v->val.data.end(),
              out.data.begin() + static_cast<int64_t>(i) * dev.K);
  }
  return out;
}

/// Mouth region: lower-center portion of the face box.
inline Box lip_box(const Box& face) {
  Box b;
  int w = face.width(), h = face.height();
  b.x0 = face.x0 + w / 4;
  b.x1 = std::max(b.x0 + 2, face.x1 - w / 4);
  b.y0 = face.y0 + (h * 55) / 100;
  b.y1 = std::max(b.y0 + 2, face.y1);
  return b;
}

namespace detail {

// out-of-line on purpose: per-call-site FMA contraction would let crops of
// bit-identical frames differ in the last ulp, breaking gen==real saturation
[[gnu::noinline]] inline Image crop_to(const Image& im, const Box& b, int size) {
  if (!b.valid_in(im.w, im.h)) throw Error("metric crop out of bounds");
  return resize_image(crop_image(im, b), size, size);
}

struct RegionAccum {
  double psnr_sum = 0, ssim_sum = 0, lpips_sum = 0;
  int64_t n = 0;
  bool psnr_inf = false;
  void add(const Image& a, const Image& b, const PerceptualNet& net) {
    double p = devgest::psnr(a, b);
    if (std::isinf(p)) psnr_inf = true;
    else psnr_sum += p;
    ssim_sum += devgest::ssim(a, b);
    lpips_sum += lpips_proxy(a, b, net);
    ++n;
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    if (n == 0) return j;
    // any exactly-identical pair saturates the average
    if (psnr_inf) j["psnr"] = "inf";
    else j["psnr"] = psnr_sum / n;
    j["ssim"] = ssim_sum / n;
    j["lpips"] = lpips_sum / n;
    return j;
  }
};

}  // namespace detail

/// Paired-clip evaluation: hand/lip/full-frame similarity metrics plus
/// set-level FGD, diversity, and the FVD proxy. Returns the report JSON.
inline nlohmann::json evaluate_report(const std::vector<std::vector<Image>>& real_clips,
                                      const std::vector<std::vector<Image>>& gen_clips,
                                      const std::vector<std::vector<FrameBoxes>>& boxes,
                                      const EvalConfig& cfg = {}) {
  if (real_clips.size() != gen_clips.size() || real_clips.empty())
    throw Error("evaluate_report: need equal nonempty clip sets");
  if (boxes.size() != real_clips.size())
    throw Error("evaluate_report: region metrics need boxes for every clip");
  for (size_t c = 0; c < real_clips.size(); ++c) {
    if (real_clips[c].size() != gen_clips[c].size())
      throw Error("evaluate_report: paired clips must have equal frame counts");
    if (boxes[c].size() != real_clips[c].size())
      throw Error("evaluate_report: boxes must cover every frame");
  }

  PerceptualConfig pc = cfg.perc;
  pc.seed = cfg.seed;
  PerceptualNet perc = PerceptualNet::make_random(pc);
  detail::RegionAccum hand, lip, full;

  for (size_t c = 0; c < real_clips.size(); ++c)
    for (size_t f = 0; f < real_clips[c].size(); ++f) {
      const Image& re = real_clips[c][f];
      const Image& ge = gen_clips[c][f];
      if (re.w != ge.w || re.h != ge.h) throw Error("evaluate_report: frame size mismatch");
      const FrameBoxes& fb = boxes[c][f];
      full.add(re, ge, perc);
      for (const Box& hb : fb.hands)
        hand.add(detail::crop_to(re, hb, cfg.crop_size), detail::crop_to(ge, hb, cfg.crop_size),
                 perc);
      Box lb = lip_box(fb.face);
      lip.add(detail::crop_to(re, lb, cfg.crop_size), detail::crop_to(ge, lb, cfg.crop_size),
              perc);
    }
  if (hand.n == 0) throw Error("evaluate_report: no hand boxes present");

  // set metrics on per-frame motion features
  ParamStore proxy_lpe;
  ParamStore* lpe = cfg.lpe_params;
  DeviationConfig dev = cfg.dev;
  std::string provenance = "trained-lpe";
  if (!lpe) {
    proxy_lpe = make_proxy_lpe(cfg.seed, dev.K);
    lpe = &proxy_lpe;
    provenance = "proxy";
  }
  std::vector<Tensor> real_rows, gen_rows;
  int64_t total_real = 0, total_gen = 0;
  for (size_t c = 0; c < real_clips.size(); ++c) {
    real_rows.push_back(clip_motion_features(*lpe, real_clips[c], dev));
    gen_rows.push_back(clip_motion_features(*lpe, gen_clips[c], dev));
    total_real += real_rows.back().dim(0);
    total_gen += gen_rows.back().dim(0);
  }
  auto stack = [&](const std::vector<Tensor>& rows, int64_t total) {
    Tensor out({static_cast<int>(total), dev.K});
    int64_t at = 0;
    for (const Tensor& r : rows) {
      std::copy(r.data.begin(), r.data.end(), out.data.begin() + at * dev.K);
      at += r.dim(0);
    }
    return out;
  };
  Tensor rf = stack(real_rows, total_real);
  Tensor gf = stack(gen_rows, total_gen);

  nlohmann::json report;
  report["version"] = 1;
  report["provenance"] = provenance;
  report["regions"] = {{"hand", hand.to_json()}, {"lip", lip.to_json()}, {"full", full.to_json()}};
  report["set_metrics"] = {{"fgd", fgd(rf, gf)},
                           {"div", diversity(gf)},
                           {"fvd", fvd_proxy(real_clips, gen_clips,
                                             VideoFeatureNet::make(cfg.seed))}};
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(std::hash<std::string>{}(
                    std::to_string(cfg.seed) + ":" + std::to_string(cfg.crop_size) + ":" +
                    std::to_string(dev.K) + ":" + provenance)));
  report["config_hash"] = hash;
  return report;
}

}  // namespace devgest
