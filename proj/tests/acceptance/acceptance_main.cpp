// Release gate: ten independent checks over the whole library, each printed as
// one [PASS]/[FAIL] line. Exit code is the number of failures.
//
// Heavy training checks write their datasets under the system temp directory
// and re-use deterministic seeds, so the binary is safe to re-run.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "devgest/media/synthetic.hpp"
#include "devgest/metrics/metrics.hpp"
#include "devgest/pipeline/pipeline.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace devgest;
using devgest::testing::FdReport;
using devgest::testing::fd_compare;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

void expect(Outcome& o, bool cond, const std::string& what) {
  if (!cond && o.ok) {
    o.ok = false;
    o.detail = what;
  }
}

double now_s() {
  using clk = std::chrono::steady_clock;
  return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

std::string fmt(double v) {
  char b[48];
  std::snprintf(b, sizeof(b), "%.4g", v);
  return b;
}

Tensor random_chw(int c, int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor t({c, h, w});
  for (auto& v : t.data) v = rng.uniform(0.05, 0.95);
  return t;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---- 1: finite-difference gradients through the full reconstruction --------------

Outcome c1_gradients() {
  Outcome o;
  double t0 = now_s();
  double worst = 0.0;
  std::string worst_op = "-";
  long coords = 0;
  auto note = [&](const std::string& op, const FdReport& r, int64_t n) {
    coords += n;
    if (r.max_rel > worst) {
      worst = r.max_rel;
      worst_op = op;
    }
  };

  EncoderConfig enc;
  enc.depth = 2;
  enc.base_width = 4;
  DeviationConfig dev;
  dev.K = 8;
  dev.n_regions = 2;
  dev.mask_level = 1;
  ParamStore ps;
  Rng rng(41);
  init_encoder_params(ps, enc, rng);
  init_deviation_params(ps, dev, enc, rng);
  // nudge zero-initialized tensors so heads are off their symmetric points
  Rng jrng(77);
  for (auto& [name, t] : ps.t)
    for (auto& v : t.data) v += jrng.uniform(-0.02, 0.02);

  // sweeps d(loss)/d(theta) for every parameter tensor the graph touched
  auto sweep_params = [&](const std::string& op, Exec& ex, ParamStore& store,
                          const std::function<double(ParamStore&)>& loss_ps) {
    for (auto& [name, t] : store.t) {
      const Tensor* gptr = ex.grad_of(name);
      if (!gptr) continue;
      auto f = [&](const Tensor& v) {
        ParamStore ps2 = store;
        ps2.get(name) = v;
        return loss_ps(ps2);
      };
      note(op + "/" + name, fd_compare(f, t, *gptr), t.numel());
    }
  };

  // -- feature pyramid: input pixels plus every conv weight and bias --
  {
    Tensor img = random_chw(3, 16, 16, 7);
    auto enc_loss = [&](Exec& e, Var x) {
      auto py = encode_image(e, x, enc);
      Var l = sum_all(e.g, vsquare(e.g, py.phi[0]));
      for (size_t s = 1; s < py.phi.size(); ++s)
        l = add(e.g, l, sum_all(e.g, vsquare(e.g, py.phi[s])));
      return l;
    };
    Exec ex(ps, true);
    Var x = ex.g.leaf(img);
    ex.g.backward(enc_loss(ex, x));
    note("encode/input",
         fd_compare([&](const Tensor& t) {
           Exec e(ps, false);
           return enc_loss(e, e.g.constant(t))->val[0];
         }, img, x->grad),
         img.numel());
    sweep_params("encode", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return enc_loss(e, e.g.constant(img))->val[0];
    });
  }

  // -- feature enhancement, both normalization modes --
  for (int mode = 0; mode < 2; ++mode) {
    EncoderConfig ecfg = enc;
    ecfg.scalar_stats = (mode == 1);
    Tensor F = random_chw(4, 8, 8, 11 + mode);
    auto enh_loss = [&](Exec& e, Var x) {
      return mean_all(e.g, vsquare(e.g, enhance_features(e, x, ecfg, "enh.l0")));
    };
    Exec ex(ps, true);
    Var x = ex.g.leaf(F);
    ex.g.backward(enh_loss(ex, x));
    note("enhance/input",
         fd_compare([&](const Tensor& t) {
           Exec e(ps, false);
           return enh_loss(e, e.g.constant(t))->val[0];
         }, F, x->grad),
         F.numel());
    sweep_params("enhance", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return enh_loss(e, e.g.constant(F))->val[0];
    });
  }

  // -- latent motion estimator --
  {
    Tensor img = random_chw(3, 16, 16, 13);
    auto lpe_loss = [&](Exec& e, Var x) {
      return sum_all(e.g, vsquare(e.g, estimate_latent_motion(e, x, dev).v));
    };
    Exec ex(ps, true);
    Var x = ex.g.leaf(img);
    ex.g.backward(lpe_loss(ex, x));
    note("latent-motion/input",
         fd_compare([&](const Tensor& t) {
           Exec e(ps, false);
           return lpe_loss(e, e.g.constant(t))->val[0];
         }, img, x->grad),
         img.numel());
    sweep_params("latent-motion", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return lpe_loss(e, e.g.constant(img))->val[0];
    });
  }

  // -- pose transform head (tanh-squashed translations) --
  {
    Tensor mfv({1, dev.K});
    Rng mr(17);
    for (auto& v : mfv.data) v = mr.uniform(-1.0, 1.0);
    Tensor w({dev.n_regions, 3});
    for (auto& v : w.data) v = mr.normal();
    auto pose_loss = [&](Exec& e, Var x) {
      Var rt = pose_transform(e, MotionFeature{x}, dev).rt;
      return sum_all(e.g, mul(e.g, rt, e.g.constant(w)));
    };
    Exec ex(ps, true);
    Var x = ex.g.leaf(mfv);
    ex.g.backward(pose_loss(ex, x));
    note("pose/input",
         fd_compare([&](const Tensor& t) {
           Exec e(ps, false);
           return pose_loss(e, e.g.constant(t))->val[0];
         }, mfv, x->grad),
         mfv.numel());
    sweep_params("pose", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return pose_loss(e, e.g.constant(mfv))->val[0];
    });
  }

  // -- region masks (softmax head; weighted sum breaks the sum-to-one null space) --
  {
    int c = encoder_width(enc, dev.mask_level);
    Tensor phi = random_chw(c, 8, 8, 19);
    Tensor w({dev.n_regions + 1, 8, 8});
    Rng mr(23);
    for (auto& v : w.data) v = mr.normal();
    auto mask_loss = [&](Exec& e, Var x) {
      return sum_all(e.g, mul(e.g, region_masks(e, x, dev), e.g.constant(w)));
    };
    Exec ex(ps, true);
    Var x = ex.g.leaf(phi);
    ex.g.backward(mask_loss(ex, x));
    note("masks/input",
         fd_compare([&](const Tensor& t) {
           Exec e(ps, false);
           return mask_loss(e, e.g.constant(t))->val[0];
         }, phi, x->grad),
         phi.numel());
    sweep_params("masks", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return mask_loss(e, e.g.constant(phi))->val[0];
    });
  }

  // -- region flow composition (includes the mask-centroid path) --
  {
    const int h = 6, w = 5, R = dev.n_regions;
    Rng fr(31);
    Tensor masks({R + 1, h, w});
    for (auto& v : masks.data) v = fr.uniform(0.05, 0.95);
    Tensor rt({R, 3});
    for (int r = 0; r < R; ++r) {
      rt.at2(r, 0) = fr.uniform(-0.8, 0.8);
      rt.at2(r, 1) = fr.uniform(-0.5, 0.5);
      rt.at2(r, 2) = fr.uniform(-0.5, 0.5);
    }
    Tensor wsum({h, w, 2});
    for (auto& v : wsum.data) v = fr.normal();
    auto flow_loss = [&](Graph& g, Var m, Var q) {
      return sum_all(g, mul(g, compose_region_flow(g, m, q), g.constant(wsum)));
    };
    Graph g;
    Var m = g.leaf(masks);
    Var q = g.leaf(rt);
    g.backward(flow_loss(g, m, q));
    note("flow/masks",
         fd_compare([&](const Tensor& t) {
           Graph g2;
           return flow_loss(g2, g2.constant(t), g2.constant(rt))->val[0];
         }, masks, m->grad),
         masks.numel());
    note("flow/transforms",
         fd_compare([&](const Tensor& t) {
           Graph g2;
           return flow_loss(g2, g2.constant(masks), g2.constant(t))->val[0];
         }, rt, q->grad),
         rt.numel());
  }

  // -- feature warping: flow kept interior and off the bilinear cell boundaries --
  {
    Rng fr(12);
    Tensor f({2, 6, 5});
    for (auto& v : f.data) v = fr.normal();
    Tensor flow = identity_grid(4, 4);
    Rng jit(91);
    for (auto& v : flow.data) v = v * 0.6 + jit.uniform(-0.03, 0.03);
    auto warp_loss = [&](Graph& g, Var feats, Var fl) {
      return sum_all(g, vsquare(g, warp_features(g, feats, fl)));
    };
    Graph g;
    Var feats = g.leaf(f);
    Var fl = g.leaf(flow);
    g.backward(warp_loss(g, feats, fl));
    note("warp/flow",
         fd_compare([&](const Tensor& t) {
           Graph g2;
           return warp_loss(g2, g2.constant(f), g2.constant(t))->val[0];
         }, flow, fl->grad, 1e-6),
         flow.numel());
    note("warp/features",
         fd_compare([&](const Tensor& t) {
           Graph g2;
           return warp_loss(g2, g2.constant(t), g2.constant(flow))->val[0];
         }, f, feats->grad),
         f.numel());
  }

  // -- deviation gate, fixed and learned amplitude --
  for (int mode = 0; mode < 2; ++mode) {
    DeviationConfig dcfg = dev;
    dcfg.learned_L = (mode == 1);
    ParamStore psd = ps;
    if (dcfg.learned_L) {
      Tensor L({1});
      L[0] = 0.1;
      psd.add("dev.L0", L);
    }
    Tensor warped = random_chw(4, 7, 7, 29 + mode);
    Tensor w({1, 7, 7});
    Rng dr(37);
    for (auto& v : w.data) v = dr.normal();
    auto dev_loss = [&](Exec& e, Var x) {
      return sum_all(e.g, mul(e.g, compute_deviation(e, x, 0, dcfg), e.g.constant(w)));
    };
    Exec ex(psd, true);
    Var x = ex.g.leaf(warped);
    ex.g.backward(dev_loss(ex, x));
    note("deviation/input",
         fd_compare([&](const Tensor& t) {
           Exec e(psd, false);
           return dev_loss(e, e.g.constant(t))->val[0];
         }, warped, x->grad),
         warped.numel());
    sweep_params("deviation", ex, psd, [&](ParamStore& st) {
      Exec e(st, true);
      return dev_loss(e, e.g.constant(warped))->val[0];
    });
  }

  // -- gated decoding: skip features, gate maps, and all decoder parameters --
  {
    Tensor w0 = random_chw(4, 8, 8, 43);
    Tensor w1 = random_chw(8, 4, 4, 47);
    Tensor d0({1, 8, 8}), d1({1, 4, 4});
    Rng gr(53);
    for (auto& v : d0.data) v = gr.uniform(0.1, 0.9);
    for (auto& v : d1.data) v = gr.uniform(0.1, 0.9);
    auto dec_loss = [&](Exec& e, Var a, Var b, Var da, Var db) {
      return sum_all(e.g, vsquare(e.g, gated_decode(e, {a, b}, {da, db}, enc)));
    };
    Exec ex(ps, true);
    Var a = ex.g.leaf(w0), b = ex.g.leaf(w1);
    Var da = ex.g.leaf(d0), db = ex.g.leaf(d1);
    ex.g.backward(dec_loss(ex, a, b, da, db));
    struct Probe {
      const char* name;
      Tensor* val;
      Var leaf;
    } probes[] = {{"decode/skip0", &w0, a}, {"decode/skip1", &w1, b},
                  {"decode/gate0", &d0, da}, {"decode/gate1", &d1, db}};
    for (auto& pr : probes) {
      Tensor base = *pr.val;
      note(pr.name,
           fd_compare([&](const Tensor& t) {
             *pr.val = t;
             Exec e2(ps, false);
             Var la = e2.g.constant(w0), lb = e2.g.constant(w1);
             Var lda = e2.g.constant(d0), ldb = e2.g.constant(d1);
             double out = dec_loss(e2, la, lb, lda, ldb)->val[0];
             *pr.val = base;
             return out;
           }, base, pr.leaf->grad),
           base.numel());
    }
    sweep_params("decode", ex, ps, [&](ParamStore& st) {
      Exec e(st, true);
      return dec_loss(e, e.g.constant(w0), e.g.constant(w1), e.g.constant(d0),
                      e.g.constant(d1))->val[0];
    });
  }

  // -- whole reconstruction w.r.t. the source image (zero pose head keeps the
  //    sampling grid at the identity, a point of differentiability) --
  {
    ParamStore ps0;
    Rng r0(101);
    init_encoder_params(ps0, enc, r0);
    init_deviation_params(ps0, dev, enc, r0);
    Tensor drv = random_chw(3, 16, 16, 59);
    Tensor src = random_chw(3, 16, 16, 61);
    auto rec_loss = [&](Exec& e, Var x) {
      MotionFeature mf = estimate_latent_motion(e, e.g.constant(drv), dev);
      return mean_all(e.g, vsquare(e.g, reconstruct(e, x, mf, enc, dev).image));
    };
    Exec ex(ps0, false);
    Var x = ex.g.leaf(src);
    ex.g.backward(rec_loss(ex, x));
    note("reconstruct/source",
         fd_compare([&](const Tensor& t) {
           Exec e(ps0, false);
           return rec_loss(e, e.g.constant(t))->val[0];
         }, src, x->grad),
         src.numel());
  }

  double mins = (now_s() - t0) / 60.0;
  expect(o, worst < 1e-4, "max rel err " + fmt(worst) + " at " + worst_op +
                              " over " + std::to_string(coords) + " coords");
  expect(o, mins < 2.0, "took " + fmt(mins) + " min > 2");
  if (o.ok)
    o.detail = "max rel err " + fmt(worst) + " over " + std::to_string(coords) +
               " coords, worst at " + worst_op;
  return o;
}

// ---- 2: closed-form layer identities ------------------------------------------------

Outcome c2_closed_forms() {
  Outcome o;
  // constant feature map through the normalizer returns beta exactly
  {
    EncoderConfig enc;
    ParamStore ps;
    Tensor gamma({4}), beta({4});
    for (int i = 0; i < 4; ++i) {
      gamma[i] = 0.7 + 0.1 * i;
      beta[i] = -0.3 + 0.2 * i;
    }
    ps.add("n.gamma", gamma);
    ps.add("n.beta", beta);
    Exec ex(ps, false);
    Var F = ex.g.constant(Tensor::full({4, 6, 6}, 0.37));
    Var out = enhance_features(ex, F, enc, "n");
    double err = 0;
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 36; ++i)
        err = std::max(err, std::fabs(out->val.data[static_cast<size_t>(c) * 36 + i] - beta[c]));
    expect(o, err < 1e-9, "zero-variance normalization off beta by " + fmt(err));
  }
  // zero gate pre-activation emits exactly half the ceiling
  {
    DeviationConfig dev;
    dev.L = 1.6;
    ParamStore ps;
    ps.add("dev.gate0.w", Tensor({1, 5, 1, 1}));
    ps.add("dev.gate0.b", Tensor({1}));
    Exec ex(ps, false);
    Var warped = ex.g.constant(random_chw(5, 4, 4, 3));
    Var delta = compute_deviation(ex, warped, 0, dev);
    double err = 0;
    for (double v : delta->val.data) err = std::max(err, std::fabs(v - dev.L / 2.0));
    expect(o, err < 1e-12, "zero-logit gate off L/2 by " + fmt(err));
  }
  // output activation endpoints: slope 0 halts negatives, slope 1 is identity
  {
    Graph g;
    Tensor z({7});
    for (int i = 0; i < 7; ++i) z[i] = -3.0 + i;
    Var zero = activation(g, g.constant(z), 0.0);
    Var one = activation(g, g.constant(z), 1.0);
    for (int i = 0; i < 7; ++i) {
      expect(o, zero->val[i] == std::max(0.0, z[i]), "slope-0 activation is not a rectifier");
      expect(o, one->val[i] == z[i], "slope-1 activation is not identity");
    }
  }
  // identity flow reproduces the features it samples
  {
    Graph g;
    Tensor feats = random_chw(3, 9, 9, 11);
    Var out = grid_sample(g, g.constant(feats), g.constant(identity_grid(9, 9)));
    double err = 0;
    for (int64_t i = 0; i < feats.numel(); ++i)
      err = std::max(err, std::fabs(out->val[i] - feats[i]));
    expect(o, err < 1e-6, "identity-flow passthrough err " + fmt(err));
  }
  return o;
}

// ---- 3: integer-shift warp oracle ---------------------------------------------------

Outcome c3_warp_oracle() {
  Outcome o;
  Rng rng(333);
  int failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int h = 6 + rng.uniform_int(0, 6);
    int w = 6 + rng.uniform_int(0, 6);
    int dx = rng.uniform_int(-2, 2);
    int dy = rng.uniform_int(-2, 2);
    Tensor feats({2, h, w});
    int iy = 2 + rng.uniform_int(0, h - 5);
    int ix = 2 + rng.uniform_int(0, w - 5);
    feats.at3(0, iy, ix) = 1.0;
    feats.at3(1, iy, ix) = -0.5;

    // output (y,x) reads source (y+dy, x+dx)
    Tensor grid = identity_grid(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        grid.data[(static_cast<size_t>(y) * w + x) * 2 + 0] += 2.0 * dx / (w - 1);
        grid.data[(static_cast<size_t>(y) * w + x) * 2 + 1] += 2.0 * dy / (h - 1);
      }
    Graph g;
    Var out = grid_sample(g, g.constant(feats), g.constant(grid));

    bool good = true;
    for (int c = 0; c < 2; ++c)
      for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) {
          int sy = y + dy, sx = x + dx;
          double want = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? feats.at3(c, sy, sx) : 0.0;
          if (std::fabs(out->val.at3(c, y, x) - want) > 1e-12) good = false;
        }
    if (!good) ++failures;
  }
  expect(o, failures == 0, std::to_string(failures) + "/100 integer-shift cases disagreed");
  if (o.ok) o.detail = "100/100 cases exact";
  return o;
}

// ---- 4: stage-1 overfit --------------------------------------------------------------

Outcome c4_stage1_overfit() {
  Outcome o;
  double t0 = now_s();
  SynthSpec spec;  // 4 clips, 64x64, 2 s at 16 fps
  DatasetManifest m =
      generate_synthetic_dataset(spec, fs::temp_directory_path() / "devgest_acc_ds1");

  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.lr_stage1 = 1e-3;
  cfg.weights.gan = 0.0;  // pure reconstruction: the overfit rate is the contract here
  cfg.weights.discr = 0.0;
  auto clips = load_training_clips(m, cfg);
  Stage1Result r = train_stage1(clips, cfg);

  double first = 0, at200 = 0;
  for (const LossRow& row : r.history) {
    if (row.name != "l_per") continue;
    if (row.step == 1) first = row.value;
    if (row.step == 200) at200 = row.value;
  }
  double psnr_db = reconstruction_psnr(r.ckpt.params, clips, cfg);
  double mins = (now_s() - t0) / 60.0;

  expect(o, first > 0, "no step-1 loss row");
  expect(o, at200 <= 0.5 * first,
         "l_per " + fmt(first) + " -> " + fmt(at200) + " at step 200 (needs half)");
  expect(o, psnr_db >= 30.0, "train PSNR " + fmt(psnr_db) + " dB < 30");
  expect(o, mins <= 15.0, "took " + fmt(mins) + " min > 15");
  if (o.ok)
    o.detail = "l_per " + fmt(first) + " -> " + fmt(at200) + " @200, PSNR " + fmt(psnr_db) +
               " dB, " + fmt(mins) + " min";
  return o;
}

// ---- 5: stage-2 single-window overfit --------------------------------------------------

Outcome c5_stage2_overfit() {
  Outcome o;
  double t0 = now_s();
  SynthSpec spec;
  spec.clips = 1;
  spec.duration_s = 0.75;  // 12 frames = window + 4: exactly one training window
  DatasetManifest m =
      generate_synthetic_dataset(spec, fs::temp_directory_path() / "devgest_acc_ds2");

  TrainConfig cfg;
  cfg.steps = 1;  // the feature extractor only has to exist, not be good
  auto clips = load_training_clips(m, cfg);
  Stage1Result s1 = train_stage1(clips, cfg);

  TrainConfig cfg2 = cfg;
  cfg2.stage = 2;
  cfg2.steps = 500;
  cfg2.lr_stage2 = 1e-3;
  Stage2Result s2 = train_stage2(clips, s1.ckpt, cfg2);

  double first = 0, last = 0;
  for (const LossRow& row : s2.history)
    if (row.name == "l_diff") {
      if (row.step == 1) first = row.value;
      last = row.value;
    }
  expect(o, first > 0, "no initial loss");
  expect(o, last < 0.10 * first,
         "l_diff " + fmt(first) + " -> " + fmt(last) + " (needs < 10% of start)");

  // sample the trained window and compare against the frozen-feature truth
  ParamStore frozen = s1.ckpt.params;
  Tensor track = extract_motion_features(frozen, clips[0], cfg2.dev);
  const int M = cfg2.diff.M, s = 4;
  Condition cond;
  cond.audio = Tensor({M, cfg2.diff.audio_dim});
  for (int r0 = 0; r0 < M; ++r0)
    for (int c = 0; c < cfg2.diff.audio_dim; ++c)
      cond.audio.at2(r0, c) = clips[0].frame_audio.at2(s + r0, c);
  cond.prev4 = Tensor({4, cfg2.diff.K});
  for (int r0 = 0; r0 < 4; ++r0)
    for (int c = 0; c < cfg2.diff.K; ++c) cond.prev4.at2(r0, c) = track.at2(s - 4 + r0, c);
  cond.source_mf = Tensor({1, cfg2.diff.K});
  for (int c = 0; c < cfg2.diff.K; ++c) cond.source_mf.at2(0, c) = track.at2(0, c);

  DiffusionSchedule sched = make_schedule(cfg2.diff.t_steps);
  Tensor xhat = sample(s2.ckpt.params, cfg2.diff, cond, sched, cfg2.diff.t_steps, 17);

  double mean = 0;
  for (int r0 = 0; r0 < M; ++r0)
    for (int c = 0; c < cfg2.diff.K; ++c) mean += track.at2(s + r0, c);
  mean /= M * cfg2.diff.K;
  double var = 0, mse = 0;
  for (int r0 = 0; r0 < M; ++r0)
    for (int c = 0; c < cfg2.diff.K; ++c) {
      double gt = track.at2(s + r0, c);
      var += (gt - mean) * (gt - mean);
      mse += (xhat.at2(r0, c) - gt) * (xhat.at2(r0, c) - gt);
    }
  var /= M * cfg2.diff.K;
  mse /= M * cfg2.diff.K;
  double mins = (now_s() - t0) / 60.0;
  expect(o, mse < 0.10 * var,
         "sampled MSE " + fmt(mse) + " vs 10% of truth variance " + fmt(0.10 * var));
  expect(o, mins <= 5.0, "took " + fmt(mins) + " min > 5");
  if (o.ok)
    o.detail = "l_diff " + fmt(first) + " -> " + fmt(last) + ", MSE/var " + fmt(mse / var) +
               ", " + fmt(mins) + " min";
  return o;
}

// ---- 6: forward-noising algebra ---------------------------------------------------------

Outcome c6_noising_algebra() {
  Outcome o;
  DiffusionSchedule edge;
  edge.t_steps = 2;
  edge.alpha_bar = {1.0, 0.0};
  Rng rng(5);
  Tensor x0({3, 4}), eps({3, 4});
  for (auto& v : x0.data) v = rng.normal();
  for (auto& v : eps.data) v = rng.normal();

  Tensor keep = q_sample(x0, 1, eps, edge);    // alpha_bar = 1 -> data unchanged
  Tensor noise = q_sample(x0, 2, eps, edge);   // alpha_bar = 0 -> pure noise
  for (int64_t i = 0; i < x0.numel(); ++i) {
    expect(o, keep[i] == x0[i], "alpha_bar=1 endpoint not exact");
    expect(o, noise[i] == eps[i], "alpha_bar=0 endpoint not exact");
  }

  // Monte-Carlo: Var(x_t - sqrt(ab) x0) == 1 - ab
  {
    DiffusionSchedule s;
    s.t_steps = 1;
    s.alpha_bar = {0.36};
    const int n = 10000;
    Tensor one({1, 1});
    one[0] = 0.7;
    double sum = 0, sum2 = 0;
    Rng mc(777);
    for (int i = 0; i < n; ++i) {
      Tensor e({1, 1});
      e[0] = mc.normal();
      double xt = q_sample(one, 1, e, s)[0];
      double centered = xt - std::sqrt(0.36) * one[0];
      sum += centered;
      sum2 += centered * centered;
    }
    double var = sum2 / n - (sum / n) * (sum / n);
    expect(o, std::fabs(var - 0.64) < 0.05 * 0.64,
           "MC variance " + fmt(var) + " not within 5% of 0.64");
  }

  // hand-computed window loss: rows 0,1,2 against zeros
  {
    Graph g;
    Tensor xh({3, 1});
    xh.at2(0, 0) = 0;
    xh.at2(1, 0) = 1;
    xh.at2(2, 0) = 2;
    DiffLossParts parts = diffusion_loss(g, g.constant(xh), g.constant(Tensor({3, 1})));
    expect(o, std::fabs(parts.mf->val[0] - 5.0 / 3.0) < 1e-9,
           "window term " + fmt(parts.mf->val[0]) + " != 5/3");
    expect(o, std::fabs(parts.vel->val[0] - 1.0) < 1e-9,
           "velocity term " + fmt(parts.vel->val[0]) + " != 1");
    expect(o, std::fabs(parts.acc->val[0]) < 1e-9,
           "acceleration term " + fmt(parts.acc->val[0]) + " != 0");
  }
  return o;
}

// ---- 7: metric closed forms ----------------------------------------------------------------

Outcome c7_metric_closed_forms() {
  Outcome o;
  // analytic mean shift
  {
    GaussianStats s1, s2;
    s1.mean = Tensor({3});
    s2.mean = Tensor({3});
    s2.mean[0] = 1;
    s2.mean[1] = 2;
    s2.mean[2] = 2;
    s1.cov = Tensor({3, 3});
    s2.cov = Tensor({3, 3});
    for (int i = 0; i < 3; ++i) {
      s1.cov.at2(i, i) = 1;
      s2.cov.at2(i, i) = 1;
    }
    double d = frechet_distance(s1, s2);
    expect(o, std::fabs(d - 9.0) < 1e-9, "analytic mean-shift distance " + fmt(d) + " != 9");
  }
  // sampled mean shift within 2%
  {
    const int n = 10000, dim = 3;
    Rng rng(2718);
    Tensor a({n, dim}), b({n, dim});
    const double shift[3] = {1, 2, 2};
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dim; ++j) {
        a.at2(i, j) = rng.normal();
        b.at2(i, j) = rng.normal() + shift[j];
      }
    double d = fgd(a, b);
    expect(o, std::fabs(d - 9.0) < 0.02 * 9.0, "sampled distance " + fmt(d) + " not 9 +- 2%");
  }
  // image metrics
  {
    Image a(16, 16);
    Rng rng(4);
    for (auto& v : a.px) v = rng.uniform(0.0, 1.0);
    expect(o, ssim(a, a) == 1.0, "self-SSIM is not exactly 1");

    Image z(8, 8), u(8, 8);
    for (auto& v : u.px) v = 1.0;  // unit error everywhere -> MSE exactly 1
    double p = psnr(z, u, 255.0);
    expect(o, std::fabs(p - 48.1308) < 1e-3, "unit-MSE peak-255 PSNR " + fmt(p));
  }
  // collinear diversity
  {
    Tensor pts({3, 1});
    pts.at2(0, 0) = 0;
    pts.at2(1, 0) = 1;
    pts.at2(2, 0) = 2;
    double d = diversity(pts);
    expect(o, std::fabs(d - 4.0 / 3.0) < 1e-12, "collinear diversity " + fmt(d) + " != 4/3");
  }
  return o;
}

// ---- 8: ablation pathway contract ------------------------------------------------------------

Outcome c8_ablation_contract() {
  Outcome o;
  SynthSpec spec;
  spec.clips = 1;
  spec.duration_s = 1.0;
  DatasetManifest m =
      generate_synthetic_dataset(spec, fs::temp_directory_path() / "devgest_acc_ds3");
  TrainConfig base;
  base.steps = 2;
  base.dev.K = 16;
  base.diff.K = 16;
  auto clips = load_training_clips(m, base);

  auto prefix_equal = [](const ParamStore& a, const ParamStore& b, const std::string& pre) {
    for (const auto& [name, t] : a.t) {
      if (name.rfind(pre, 0) != 0) continue;
      const Tensor& u = b.get(name);
      if (u.data != t.data) return false;
    }
    return true;
  };
  Stage1Result ref = train_stage1(clips, base);
  Rng init_rng(base.seed);
  ParamStore init = init_stage1_params(base, init_rng);

  // deviation gates sit still and are never invoked when the flag is up
  {
    TrainConfig cfg = apply_ablation(base, {"disable_deviation"});
    long calls_before = counters().compute_deviation;
    Stage1Result r = train_stage1(clips, cfg);
    expect(o, counters().compute_deviation == calls_before,
           "disable_deviation still invoked the gate");
    expect(o, prefix_equal(r.ckpt.params, init, "dev.gate"),
           "disable_deviation still moved gate weights");
    expect(o, !prefix_equal(ref.ckpt.params, init, "dev.gate"),
           "baseline run left gate weights untouched");
  }
  // normalizer parameters only move when the stage is enabled
  {
    TrainConfig cfg = apply_ablation(base, {"disable_enhancer"});
    Stage1Result r = train_stage1(clips, cfg);
    expect(o, prefix_equal(r.ckpt.params, init, "enh."),
           "disable_enhancer still moved normalizer weights");
    expect(o, !prefix_equal(ref.ckpt.params, init, "enh."),
           "baseline run left normalizer weights untouched");
  }
  // region-mask head is bypassed by the single-transform ablation
  {
    TrainConfig cfg = apply_ablation(base, {"disable_motion_decoder"});
    Stage1Result r = train_stage1(clips, cfg);
    expect(o, prefix_equal(r.ckpt.params, init, "mask."),
           "disable_motion_decoder still moved mask-head weights");
    expect(o, !prefix_equal(ref.ckpt.params, init, "mask."),
           "baseline run left mask-head weights untouched");
  }
  // default flags are bit-identical to explicitly cleared flags
  {
    TrainConfig cleared = base;
    cleared.flags.disable_deviation = false;
    cleared.flags.disable_enhancer = false;
    cleared.flags.disable_motion_decoder = false;
    Stage1Result r = train_stage1(clips, cleared);
    bool same = r.ckpt.params.t.size() == ref.ckpt.params.t.size();
    for (const auto& [name, t] : ref.ckpt.params.t)
      same = same && r.ckpt.params.get(name).data == t.data;
    expect(o, same, "cleared flags diverge from default flags");
  }
  return o;
}

// ---- 9: end-to-end determinism -------------------------------------------------------------

Outcome c9_determinism() {
  Outcome o;
  auto run_once = [&](const fs::path& root) {
    fs::remove_all(root);
    SynthSpec spec;
    spec.clips = 2;
    spec.duration_s = 1.0;
    DatasetManifest m = generate_synthetic_dataset(spec, root / "ds");

    TrainConfig cfg;
    cfg.steps = 2;
    cfg.dev.K = 16;
    cfg.diff.K = 16;
    cfg.diff.width = 16;
    cfg.diff.blocks = 1;
    cfg.diff.heads = 2;
    cfg.diff.t_steps = 10;
    cfg.diff.M = 4;
    cfg.sample_steps = 4;
    auto clips = load_training_clips(m, cfg);
    Stage1Result s1 = train_stage1(clips, cfg);
    save_checkpoint(root / "stage1.ckpt", s1.ckpt);
    TrainConfig cfg2 = cfg;
    cfg2.stage = 2;
    Stage2Result s2 = train_stage2(clips, s1.ckpt, cfg2);
    save_checkpoint(root / "stage2.ckpt", s2.ckpt);

    Clip c0 = load_clip(m, 0);
    VideoClip vid = generate_video(s1.ckpt, s2.ckpt, c0.audio, c0.frames[0], 3);
    fs::create_directories(root / "frames");
    char name[32];
    for (size_t i = 0; i < vid.frames.size(); ++i) {
      std::snprintf(name, sizeof(name), "%05zu.png", i);
      write_png(root / "frames" / name, vid.frames[i]);
    }

    std::vector<std::vector<Image>> real;
    std::vector<std::vector<FrameBoxes>> boxes;
    for (int i = 0; i < 2; ++i) {
      Clip c = load_clip(m, i);
      real.push_back(c.frames);
      boxes.push_back(c.boxes);
    }
    EvalConfig ec;
    std::ofstream rep(root / "report.json");
    rep << evaluate_report(real, real, boxes, ec).dump(2) << "\n";
  };
  fs::path r1 = fs::temp_directory_path() / "devgest_acc_run1";
  fs::path r2 = fs::temp_directory_path() / "devgest_acc_run2";
  run_once(r1);
  run_once(r2);

  for (const char* rel : {"stage1.ckpt", "stage2.ckpt", "frames/00000.png", "frames/00015.png",
                          "report.json", "ds/manifest.json", "ds/clips/clip0000/frames/00003.png"}) {
    if (file_bytes(r1 / rel) != file_bytes(r2 / rel)) {
      expect(o, false, std::string("runs differ at ") + rel);
      return o;
    }
  }
  o.detail = "checkpoints, frames, and reports byte-identical";
  return o;
}

// ---- 10: deviation ablation loses on reconstruction quality ---------------------------------

Outcome c10_deviation_gap() {
  Outcome o;
  double t0 = now_s();
  SynthSpec spec;
  DatasetManifest m =
      generate_synthetic_dataset(spec, fs::temp_directory_path() / "devgest_acc_ds10");
  TrainConfig cfg;
  cfg.steps = 600;
  cfg.lr_stage1 = 1e-3;
  cfg.weights.gan = 0.0;
  cfg.weights.discr = 0.0;
  auto clips = load_training_clips(m, cfg);

  Stage1Result full = train_stage1(clips, cfg);
  TrainConfig cut = apply_ablation(cfg, {"disable_deviation"});
  Stage1Result ablated = train_stage1(clips, cut);

  double p_full = reconstruction_psnr(full.ckpt.params, clips, cfg);
  double p_cut = reconstruction_psnr(ablated.ckpt.params, clips, cut);
  double mins = (now_s() - t0) / 60.0;
  expect(o, p_full > p_cut,
         "full " + fmt(p_full) + " dB vs ablated " + fmt(p_cut) + " dB: no gap");
  expect(o, mins <= 30.0, "took " + fmt(mins) + " min > 30");
  if (o.ok)
    o.detail = "full " + fmt(p_full) + " dB > ablated " + fmt(p_cut) + " dB, " + fmt(mins) + " min";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  struct Row {
    const char* name;
    Outcome (*fn)();
  };
  const Row rows[] = {
      {"finite-difference gradients, op by op", c1_gradients},
      {"closed-form layer identities", c2_closed_forms},
      {"integer-shift warp oracle", c3_warp_oracle},
      {"stage-1 overfit: loss halves by 200, 30 dB by 2000", c4_stage1_overfit},
      {"stage-2 single-window overfit and resampling", c5_stage2_overfit},
      {"forward-noising algebra", c6_noising_algebra},
      {"metric closed forms", c7_metric_closed_forms},
      {"ablation pathway contract", c8_ablation_contract},
      {"end-to-end determinism", c9_determinism},
      {"deviation ablation loses on reconstruction PSNR", c10_deviation_gap},
  };
  // optional args: criterion numbers to run (default all), e.g. `devgest_acceptance 1 9`
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  int failures = 0;
  int idx = 0;
  for (const Row& row : rows) {
    ++idx;
    if (!only.empty() && std::find(only.begin(), only.end(), idx) == only.end()) continue;
    double t0 = now_s();
    Outcome out;
    try {
      out = row.fn();
    } catch (const std::exception& e) {
      out.ok = false;
      out.detail = std::string("exception: ") + e.what();
    }
    double dt = now_s() - t0;
    std::printf("[%s] %2d. %s (%.1fs)%s%s\n", out.ok ? "PASS" : "FAIL", idx, row.name, dt,
                out.detail.empty() ? "" : " — ", out.detail.c_str());
    std::fflush(stdout);
    if (!out.ok) ++failures;
  }
  if (failures) std::printf("%d of 10 criteria failed\n", failures);
  else std::printf("all 10 criteria passed\n");
  return failures;
}
