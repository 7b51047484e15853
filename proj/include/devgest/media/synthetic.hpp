#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "devgest/core/rng.hpp"
#include "devgest/media/audio.hpp"
#include "devgest/media/dataset.hpp"

namespace devgest {

/// Configuration for the procedural talking-figure dataset.
struct SynthSpec {
  int width = 64, height = 64;
  int clips = 4;
  double duration_s = 2.0;
  double fps = 16.0;
  int sample_rate = 16000;
  uint64_t seed = 7;
  int size_multiple = 16;  // spatial dims must divide cleanly through the encoder
  std::string split = "train";
};

namespace sdf {
struct P {
  double x, y;
};
inline double sd_circle(P p, P c, double r) { return std::hypot(p.x - c.x, p.y - c.y) - r; }
inline double sd_ellipse(P p, P c, double rx, double ry) {
  double q = std::hypot((p.x - c.x) / rx, (p.y - c.y) / ry);
  return (q - 1.0) * std::min(rx, ry);
}
inline double sd_segment(P p, P a, P b, double r) {
  double bax = b.x - a.x, bay = b.y - a.y;
  double pax = p.x - a.x, pay = p.y - a.y;
  double h = std::clamp((pax * bax + pay * bay) / (bax * bax + bay * bay + 1e-12), 0.0, 1.0);
  return std::hypot(pax - bax * h, pay - bay * h) - r;
}
inline double sd_box(P p, P c, double hx, double hy) {
  double qx = std::abs(p.x - c.x) - hx, qy = std::abs(p.y - c.y) - hy;
  double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(qx, qy), 0.0);
}
}  // namespace sdf

namespace detail {

struct FigureParams {
  double torso_r = 0.18, torso_g = 0.25, torso_b = 0.46;
  double skin_r = 0.85, skin_g = 0.68, skin_b = 0.56;
  double bg_r = 0.82, bg_g = 0.84, bg_b = 0.88;
  double carrier_hz = 220.0;
  double f1 = 0.7, f2 = 0.2, p1 = 0.0, p2 = 0.0;  // envelope modulation
  double arm_gain_l = 0.85, arm_gain_r = 0.75;
  double arm_base_l = 0.55, arm_base_r = 0.55;
};

inline FigureParams sample_figure(Rng& rng) {
  FigureParams fp;
  auto jitter = [&](double v, double a) { return v + rng.uniform(-a, a); };
  fp.torso_r = jitter(fp.torso_r, 0.05);
  fp.torso_g = jitter(fp.torso_g, 0.05);
  fp.torso_b = jitter(fp.torso_b, 0.05);
  fp.skin_r = jitter(fp.skin_r, 0.03);
  fp.skin_g = jitter(fp.skin_g, 0.03);
  fp.skin_b = jitter(fp.skin_b, 0.03);
  fp.bg_r = jitter(fp.bg_r, 0.03);
  fp.bg_g = jitter(fp.bg_g, 0.03);
  fp.bg_b = jitter(fp.bg_b, 0.03);
  fp.carrier_hz = rng.uniform(190.0, 260.0);
  fp.f1 = rng.uniform(0.5, 0.85);
  fp.f2 = rng.uniform(0.15, 0.28);
  fp.p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  fp.p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  fp.arm_gain_l = rng.uniform(0.7, 0.95);
  fp.arm_gain_r = rng.uniform(0.6, 0.9);
  fp.arm_base_l = rng.uniform(0.48, 0.62);
  fp.arm_base_r = rng.uniform(0.48, 0.62);
  return fp;
}

/// Amplitude envelope in [0.15, 0.95].
inline double envelope(const FigureParams& fp, double t) {
  return 0.55 + 0.40 * std::sin(2.0 * std::numbers::pi * fp.f1 * t + fp.p1) *
                    std::cos(2.0 * std::numbers::pi * fp.f2 * t + fp.p2);
}

struct FramePose {
  double t = 0, env = 0, mouth = 0;
  double arm_l = 0, arm_r = 0;            // radians from straight down
  double hand_l[2] = {0, 0}, hand_r[2] = {0, 0};  // pixel coords
  double head[2] = {0, 0};
};

inline Image render_frame(const FigureParams& fp, const FramePose& pose, int W, int H) {
  using sdf::P;
  Image im(H, W);
  const double aa = 1.5 / std::min(W, H);
  const P head{0.5, 0.30}, torso{0.5, 0.70};
  const P sh_l{0.33, 0.56}, sh_r{0.67, 0.56};
  const double arm_len = 0.23, arm_rad = 0.030, hand_rad = 0.038, head_rad = 0.13;
  P hl{sh_l.x - arm_len * std::sin(pose.arm_l), sh_l.y + arm_len * std::cos(pose.arm_l)};
  P hr{sh_r.x + arm_len * std::sin(pose.arm_r), sh_r.y + arm_len * std::cos(pose.arm_r)};
  const P mouth{0.5, 0.355};
  const double mouth_hx = 0.045, mouth_hy = 0.006 + 0.026 * pose.mouth;

  auto blend = [&](double& r, double& g, double& b, double d, double cr, double cg, double cb) {
    double a = std::clamp(0.5 - d / aa, 0.0, 1.0);
    r = (1 - a) * r + a * cr;
    g = (1 - a) * g + a * cg;
    b = (1 - a) * b + a * cb;
  };

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      P p{(x + 0.5) / W, (y + 0.5) / H};
      double r = fp.bg_r + 0.05 * (p.y - 0.5);
      double g = fp.bg_g + 0.05 * (p.y - 0.5);
      double b = fp.bg_b + 0.05 * (p.y - 0.5);
      blend(r, g, b, sdf::sd_ellipse(p, torso, 0.20, 0.26), fp.torso_r, fp.torso_g, fp.torso_b);
      blend(r, g, b, sdf::sd_segment(p, sh_l, hl, arm_rad), fp.torso_r * 0.8, fp.torso_g * 0.8, fp.torso_b * 0.8);
      blend(r, g, b, sdf::sd_segment(p, sh_r, hr, arm_rad), fp.torso_r * 0.8, fp.torso_g * 0.8, fp.torso_b * 0.8);
      blend(r, g, b, sdf::sd_circle(p, hl, hand_rad), fp.skin_r, fp.skin_g, fp.skin_b);
      blend(r, g, b, sdf::sd_circle(p, hr, hand_rad), fp.skin_r, fp.skin_g, fp.skin_b);
      blend(r, g, b, sdf::sd_circle(p, head, head_rad), fp.skin_r, fp.skin_g, fp.skin_b);
      blend(r, g, b, sdf::sd_box(p, mouth, mouth_hx, mouth_hy), 0.45, 0.12, 0.12);
      im.at(y, x, 0) = std::clamp(r, 0.0, 1.0);
      im.at(y, x, 1) = std::clamp(g, 0.0, 1.0);
      im.at(y, x, 2) = std::clamp(b, 0.0, 1.0);
    }
  }
  return im;
}

inline Box clamp_box(double cx, double cy, double half, int W, int H) {
  Box b;
  b.x0 = std::max(0, static_cast<int>(std::floor(cx - half)));
  b.y0 = std::max(0, static_cast<int>(std::floor(cy - half)));
  b.x1 = std::min(W, static_cast<int>(std::ceil(cx + half)));
  b.y1 = std::min(H, static_cast<int>(std::ceil(cy + half)));
  if (b.x1 <= b.x0) b.x1 = std::min(W, b.x0 + 1);
  if (b.y1 <= b.y0) b.y1 = std::min(H, b.y0 + 1);
  return b;
}

}  // namespace detail

/// Generate one clip's frames / audio / boxes / motion log. Deterministic in `rng`.
struct SynthClip {
  std::vector<Image> frames;
  Waveform audio;
  std::vector<FrameBoxes> boxes;
  json motion;
};

inline SynthClip synthesize_clip(const SynthSpec& spec, Rng& rng) {
  detail::FigureParams fp = detail::sample_figure(rng);
  const int n_frames = static_cast<int>(std::floor(spec.duration_s * spec.fps));
  if (n_frames < 1) throw Error("synthetic: duration too short for one frame");
  const long n_samples = std::lround(n_frames * spec.sample_rate / spec.fps);

  SynthClip clip;
  clip.audio.sample_rate = spec.sample_rate;
  clip.audio.samples.resize(n_samples);
  for (long i = 0; i < n_samples; ++i) {
    double t = static_cast<double>(i) / spec.sample_rate;
    double env = detail::envelope(fp, t);
    double c = 0.72 * std::sin(2.0 * std::numbers::pi * fp.carrier_hz * t) +
               0.28 * std::sin(2.0 * std::numbers::pi * 2.0 * fp.carrier_hz * t + 1.7);
    clip.audio.samples[i] = 0.85 * env * c;
  }

  // arms track a low-passed copy of the amplitude envelope
  const double lp_cut_hz = 3.5;
  const double alpha = 1.0 - std::exp(-2.0 * std::numbers::pi * lp_cut_hz / spec.fps);
  double lp = 0.0;
  json frames_log = json::array();
  for (int i = 0; i < n_frames; ++i) {
    detail::FramePose pose;
    pose.t = (i + 0.5) / spec.fps;
    pose.env = detail::envelope(fp, pose.t);
    lp = (i == 0) ? pose.env : lp + alpha * (pose.env - lp);
    pose.mouth = std::clamp((pose.env - 0.15) / 0.80, 0.0, 1.0);
    pose.arm_l = fp.arm_base_l + fp.arm_gain_l * (lp - 0.55);
    pose.arm_r = fp.arm_base_r + fp.arm_gain_r * (lp - 0.55);
    const double arm_len = 0.23;
    pose.hand_l[0] = (0.33 - arm_len * std::sin(pose.arm_l)) * spec.width;
    pose.hand_l[1] = (0.56 + arm_len * std::cos(pose.arm_l)) * spec.height;
    pose.hand_r[0] = (0.67 + arm_len * std::sin(pose.arm_r)) * spec.width;
    pose.hand_r[1] = (0.56 + arm_len * std::cos(pose.arm_r)) * spec.height;
    pose.head[0] = 0.5 * spec.width;
    pose.head[1] = 0.30 * spec.height;
    clip.frames.push_back(detail::render_frame(fp, pose, spec.width, spec.height));

    FrameBoxes fb;
    double hand_half = 0.075 * std::min(spec.width, spec.height);
    double face_half = 0.16 * std::min(spec.width, spec.height);
    fb.hands.push_back(detail::clamp_box(pose.hand_l[0], pose.hand_l[1], hand_half, spec.width, spec.height));
    fb.hands.push_back(detail::clamp_box(pose.hand_r[0], pose.hand_r[1], hand_half, spec.width, spec.height));
    fb.face = detail::clamp_box(pose.head[0], pose.head[1], face_half, spec.width, spec.height);
    clip.boxes.push_back(fb);

    json jf;
    jf["t"] = pose.t;
    jf["envelope"] = pose.env;
    jf["mouth"] = pose.mouth;
    jf["arm_left"] = pose.arm_l;
    jf["arm_right"] = pose.arm_r;
    jf["hand_left"] = {pose.hand_l[0], pose.hand_l[1]};
    jf["hand_right"] = {pose.hand_r[0], pose.hand_r[1]};
    jf["head"] = {pose.head[0], pose.head[1]};
    frames_log.push_back(jf);
  }
  clip.motion["frames"] = frames_log;
  clip.motion["carrier_hz"] = fp.carrier_hz;
  clip.motion["envelope_f1"] = fp.f1;
  clip.motion["envelope_f2"] = fp.f2;
  return clip;
}

/// Generate and write the full dataset tree under `root`; returns the saved manifest.
inline DatasetManifest generate_synthetic_dataset(const SynthSpec& spec, const fs::path& root) {
  if (spec.width < 16 || spec.height < 16)
    throw Error("synthetic: frame size must be at least 16x16");
  if (spec.width % spec.size_multiple != 0 || spec.height % spec.size_multiple != 0)
    throw Error("synthetic: frame size must be a multiple of " + std::to_string(spec.size_multiple));
  if (spec.clips < 1) throw Error("synthetic: need at least one clip");
  if (spec.fps <= 0 || spec.sample_rate <= 0) throw Error("synthetic: bad fps/sample rate");

  DatasetManifest m;
  m.root = root;
  m.seed = spec.seed;
  m.fps = spec.fps;
  m.sample_rate = spec.sample_rate;
  m.width = spec.width;
  m.height = spec.height;

  Rng master(spec.seed);
  for (int c = 0; c < spec.clips; ++c) {
    Rng rng = master.split(static_cast<uint64_t>(c) + 1);
    SynthClip clip = synthesize_clip(spec, rng);
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "clip%04d", c);
    ClipRecord rec;
    rec.id = idbuf;
    rec.rel_dir = std::string("clips/") + idbuf;
    rec.n_frames = static_cast<int>(clip.frames.size());
    rec.split = spec.split;
    rec.has_boxes = true;
    write_clip_dir(root / rec.rel_dir, clip.frames, clip.audio, &clip.boxes, &clip.motion);
    m.clips.push_back(rec);
  }
  m.save();
  return m;
}

}  // namespace devgest
