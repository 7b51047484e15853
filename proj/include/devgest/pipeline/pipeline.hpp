#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "devgest/core/optim.hpp"
#include "devgest/core/serialize.hpp"
#include "devgest/media/dataset.hpp"
#include "devgest/model/deviation.hpp"
#include "devgest/model/diffusion.hpp"
#include "devgest/model/encoder.hpp"
#include "devgest/model/losses.hpp"

namespace devgest {

// ---- configuration ---------------------------------------------------------------

struct TrainConfig {
  int stage = 1;
  int steps = 200;
  int batch = 1;
  double lr_stage1 = 2e-4;
  double lr_stage2 = 1e-4;
  uint64_t seed = 0;
  int d_every = 1;        // discriminator update cadence (steps)
  double fps = 16.0;      // video frame rate for feature alignment and rendering
  int sample_steps = 10;  // denoising steps at inference
  GanKind gan_kind = GanKind::LeastSquares;
  LossWeights weights;
  EncoderConfig enc;
  DeviationConfig dev;
  DiffusionConfig diff;
  AblationFlags flags;
  PerceptualConfig perc;
  // fractional fallback crops (x0,y0,x1,y1) for datasets without box annotations
  std::array<double, 4> face_frac = {0.30, 0.05, 0.70, 0.40};
  std::array<double, 4> hand_frac = {0.10, 0.55, 0.90, 0.95};

  bool valid() const {
    return (stage == 1 || stage == 2) && steps >= 0 && batch >= 1 && lr_stage1 > 0 &&
           lr_stage2 > 0 && d_every >= 1 && fps > 0 && sample_steps >= 1 && weights.valid();
  }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["stage"] = c.stage;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["lr_stage1"] = c.lr_stage1;
  j["lr_stage2"] = c.lr_stage2;
  j["seed"] = c.seed;
  j["d_every"] = c.d_every;
  j["fps"] = c.fps;
  j["sample_steps"] = c.sample_steps;
  j["gan_kind"] = c.gan_kind == GanKind::Hinge ? "hinge" : "lsgan";
  j["weights"] = {{"per_glo", c.weights.per_glo}, {"per_loc", c.weights.per_loc},
                  {"per", c.weights.per},         {"gan", c.weights.gan},
                  {"discr", c.weights.discr},     {"J", c.weights.J}};
  j["enc"] = {{"depth", c.enc.depth},
              {"base_width", c.enc.base_width},
              {"epsilon", c.enc.epsilon},
              {"scalar_stats", c.enc.scalar_stats}};
  j["dev"] = {{"K", c.dev.K},
              {"n_regions", c.dev.n_regions},
              {"mask_level", c.dev.mask_level},
              {"L", c.dev.L},
              {"learned_L", c.dev.learned_L},
              {"c_lambda", c.dev.c_lambda},
              {"relative_motion", c.dev.relative_motion}};
  j["diff"] = {{"K", c.diff.K},
              {"M", c.diff.M},
              {"audio_dim", c.diff.audio_dim},
              {"width", c.diff.width},
              {"blocks", c.diff.blocks},
              {"heads", c.diff.heads},
              {"t_steps", c.diff.t_steps},
              {"lambda_vel", c.diff.lambda_vel},
              {"lambda_acc", c.diff.lambda_acc}};
  j["flags"] = {{"disable_deviation", c.flags.disable_deviation},
                {"disable_enhancer", c.flags.disable_enhancer},
                {"disable_motion_decoder", c.flags.disable_motion_decoder}};
  j["perc"] = {{"widths", c.perc.widths},
               {"strides", c.perc.strides},
               {"layer_weights", c.perc.layer_weights},
               {"seed", c.perc.seed},
               {"local_size", c.perc.local_size}};
  j["face_frac"] = c.face_frac;
  j["hand_frac"] = c.hand_frac;
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.stage = j.at("stage").get<int>();
  c.steps = j.at("steps").get<int>();
  c.batch = j.at("batch").get<int>();
  c.lr_stage1 = j.at("lr_stage1").get<double>();
  c.lr_stage2 = j.at("lr_stage2").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.d_every = j.at("d_every").get<int>();
  c.fps = j.at("fps").get<double>();
  c.sample_steps = j.at("sample_steps").get<int>();
  c.gan_kind = j.at("gan_kind").get<std::string>() == "hinge" ? GanKind::Hinge
                                                              : GanKind::LeastSquares;
  const auto& w = j.at("weights");
  c.weights.per_glo = w.at("per_glo").get<double>();
  c.weights.per_loc = w.at("per_loc").get<double>();
  c.weights.per = w.at("per").get<double>();
  c.weights.gan = w.at("gan").get<double>();
  c.weights.discr = w.at("discr").get<double>();
  c.weights.J = w.at("J").get<int>();
  const auto& e = j.at("enc");
  c.enc.depth = e.at("depth").get<int>();
  c.enc.base_width = e.at("base_width").get<int>();
  c.enc.epsilon = e.at("epsilon").get<double>();
  c.enc.scalar_stats = e.at("scalar_stats").get<bool>();
  const auto& d = j.at("dev");
  c.dev.K = d.at("K").get<int>();
  c.dev.n_regions = d.at("n_regions").get<int>();
  c.dev.mask_level = d.at("mask_level").get<int>();
  c.dev.L = d.at("L").get<double>();
  c.dev.learned_L = d.at("learned_L").get<bool>();
  c.dev.c_lambda = d.at("c_lambda").get<double>();
  c.dev.relative_motion = d.at("relative_motion").get<bool>();
  const auto& f = j.at("diff");
  c.diff.K = f.at("K").get<int>();
  c.diff.M = f.at("M").get<int>();
  c.diff.audio_dim = f.at("audio_dim").get<int>();
  c.diff.width = f.at("width").get<int>();
  c.diff.blocks = f.at("blocks").get<int>();
  c.diff.heads = f.at("heads").get<int>();
  c.diff.t_steps = f.at("t_steps").get<int>();
  c.diff.lambda_vel = f.at("lambda_vel").get<double>();
  c.diff.lambda_acc = f.at("lambda_acc").get<double>();
  const auto& fl = j.at("flags");
  c.flags.disable_deviation = fl.at("disable_deviation").get<bool>();
  c.flags.disable_enhancer = fl.at("disable_enhancer").get<bool>();
  c.flags.disable_motion_decoder = fl.at("disable_motion_decoder").get<bool>();
  const auto& p = j.at("perc");
  c.perc.widths = p.at("widths").get<std::vector<int>>();
  c.perc.strides = p.at("strides").get<std::vector<int>>();
  c.perc.layer_weights = p.at("layer_weights").get<std::vector<double>>();
  c.perc.seed = p.at("seed").get<uint64_t>();
  c.perc.local_size = p.at("local_size").get<int>();
  c.face_frac = j.at("face_frac").get<std::array<double, 4>>();
  c.hand_frac = j.at("hand_frac").get<std::array<double, 4>>();
  return c;
}

// ---- ablation --------------------------------------------------------------------

/// Translate flag names ("disable_deviation", ...) into the switch struct.
inline AblationFlags parse_ablation_flags(const std::vector<std::string>& names) {
  AblationFlags f;
  for (const std::string& n : names) {
    if (n == "disable_deviation") f.disable_deviation = true;
    else if (n == "disable_enhancer") f.disable_enhancer = true;
    else if (n == "disable_motion_decoder") f.disable_motion_decoder = true;
    else throw Error("unknown ablation flag: " + n);
  }
  return f;
}

inline TrainConfig apply_ablation(TrainConfig cfg, const std::vector<std::string>& names) {
  cfg.flags = parse_ablation_flags(names);
  return cfg;
}

// ---- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  int stage = 0;
  int64_t step = 0;
  std::string rng_state;
  TrainConfig cfg;
  ParamStore params;
};

inline ParamStore init_stage1_params(const TrainConfig& cfg, Rng& rng) {
  ParamStore ps;
  init_encoder_params(ps, cfg.enc, rng);
  init_deviation_params(ps, cfg.dev, cfg.enc, rng);
  init_discriminator_params(ps, rng);
  return ps;
}

inline ParamStore init_stage2_params(const TrainConfig& cfg, Rng& rng) {
  ParamStore ps;
  init_denoiser_params(ps, cfg.diff, rng);
  return ps;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  TensorFile tf;
  tf.meta["stage"] = ck.stage;
  tf.meta["step"] = ck.step;
  tf.meta["rng_state"] = ck.rng_state;
  tf.meta["config"] = config_to_json(ck.cfg);
  for (const auto& [name, t] : ck.params.t) tf.tensors.emplace_back(name, t);
  write_tensor_file(path, tf);
}

/// expect_stage = 0 accepts either stage. Validates that the parameter set is
/// exactly the one the stored config implies.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, int expect_stage = 0) {
  TensorFile tf = read_tensor_file(path);
  if (!tf.meta.contains("stage") || !tf.meta.contains("config"))
    throw FileError("not a checkpoint (missing stage/config): " + path.string());
  Checkpoint ck;
  ck.stage = tf.meta["stage"].get<int>();
  ck.step = tf.meta.value("step", int64_t{0});
  ck.rng_state = tf.meta.value("rng_state", std::string{});
  ck.cfg = config_from_json(tf.meta["config"]);
  if (expect_stage != 0 && ck.stage != expect_stage)
    throw Error("checkpoint stage mismatch: file has stage " + std::to_string(ck.stage) +
                ", expected " + std::to_string(expect_stage));
  for (auto& [name, t] : tf.tensors) ck.params.add(name, t);

  Rng scratch(0);
  ParamStore expected = ck.stage == 1 ? init_stage1_params(ck.cfg, scratch)
                                      : init_stage2_params(ck.cfg, scratch);
  for (const auto& [name, t] : expected.t) {
    if (!ck.params.has(name)) throw FileError("checkpoint missing parameter: " + name);
    if (ck.params.get(name).shape != t.shape)
      throw FileError("checkpoint parameter shape mismatch: " + name);
  }
  for (const auto& [name, t] : ck.params.t)
    if (!expected.has(name)) throw FileError("checkpoint has unknown parameter: " + name);
  return ck;
}

// ---- dataset views ------------------------------------------------------------------

/// One clip pre-converted for training: frames as {3,H,W} tensors, per-frame
/// boxes (synthesized from the fractional defaults when the clip ships none),
/// and per-video-frame audio feature rows.
struct TrainClip {
  std::vector<Tensor> frames;
  std::vector<FrameBoxes> boxes;
  Tensor frame_audio;  // {n_frames, audio_dim}
};

inline Box frac_box(const std::array<double, 4>& f, int w, int h) {
  Box b;
  b.x0 = std::clamp(static_cast<int>(std::floor(f[0] * w)), 0, w - 2);
  b.y0 = std::clamp(static_cast<int>(std::floor(f[1] * h)), 0, h - 2);
  b.x1 = std::clamp(static_cast<int>(std::ceil(f[2] * w)), b.x0 + 2, w);
  b.y1 = std::clamp(static_cast<int>(std::ceil(f[3] * h)), b.y0 + 2, h);
  return b;
}

inline Tensor frame_audio_matrix(const AudioFeatures& af, int n_frames, double fps) {
  Tensor out({n_frames, af.bands()});
  for (int i = 0; i < n_frames; ++i) {
    int r = af.row_for_frame(i, fps);
    std::copy(af.feats.data.begin() + static_cast<size_t>(r) * af.bands(),
              af.feats.data.begin() + static_cast<size_t>(r + 1) * af.bands(),
              out.data.begin() + static_cast<size_t>(i) * af.bands());
  }
  return out;
}

inline std::vector<TrainClip> load_training_clips(const DatasetManifest& m,
                                                  const TrainConfig& cfg) {
  if (m.clips.empty()) throw Error("load_training_clips: empty dataset");
  AudioConfig ac;
  ac.bands = cfg.diff.audio_dim;
  std::vector<TrainClip> out;
  for (size_t i = 0; i < m.clips.size(); ++i) {
    Clip clip = load_clip(m, static_cast<int>(i));
    TrainClip tc;
    tc.frames.reserve(clip.frames.size());
    for (const Image& im : clip.frames) tc.frames.push_back(im.to_chw());
    if (clip.has_boxes()) {
      tc.boxes = clip.boxes;
    } else {
      const int w = clip.frames.front().w, h = clip.frames.front().h;
      FrameBoxes fb;
      fb.face = frac_box(cfg.face_frac, w, h);
      fb.hands = {frac_box(cfg.hand_frac, w, h)};
      tc.boxes.assign(clip.frames.size(), fb);
    }
    AudioFeatures af = extract_audio_features(clip.audio, ac);
    tc.frame_audio = frame_audio_matrix(af, static_cast<int>(clip.frames.size()), cfg.fps);
    out.push_back(std::move(tc));
  }
  return out;
}

// ---- loss history --------------------------------------------------------------------

struct LossRow {
  int64_t step = 0;
  std::string name;
  double value = 0.0;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FileError("cannot write loss history: " + path.string());
  f << "step,loss_name,value\n";
  char buf[64];
  for (const LossRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    f << r.step << "," << r.name << "," << buf << "\n";
  }
}

// ---- stage 1 ----------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, Tensor> take_grads(Exec& ex, const ParamStore& ps,
                                                bool disc_side) {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, t] : ps.t) {
    bool is_disc = name.rfind("disc.", 0) == 0;
    if (is_disc != disc_side) continue;
    const Tensor* g = ex.grad_of(name);
    if (g) grads.emplace(name, *g);
  }
  return grads;
}

inline void accumulate(std::map<std::string, Tensor>& into,
                       const std::map<std::string, Tensor>& add) {
  for (const auto& [name, g] : add) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g);
    } else {
      for (int64_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
    }
  }
}

inline void scale(std::map<std::string, Tensor>& grads, double s) {
  for (auto& [name, g] : grads)
    for (auto& v : g.data) v *= s;
}

}  // namespace detail

struct Stage1Result {
  Checkpoint ckpt;
  std::vector<LossRow> history;
};

/// Self-supervised reconstruction training on random same-clip frame pairs.
/// The generator and the discriminator run on separate graphs so their
/// gradient flows stay disjoint by construction.
inline Stage1Result train_stage1(const std::vector<TrainClip>& clips, const TrainConfig& cfg) {
  if (cfg.stage != 1) throw Error("train_stage1: config stage must be 1");
  if (!cfg.valid()) throw Error("train_stage1: invalid config");
  if (clips.empty()) throw Error("train_stage1: empty dataset");
  for (const TrainClip& c : clips)
    if (c.frames.size() < 2) throw Error("train_stage1: clip with fewer than 2 frames");

  Rng rng(cfg.seed);
  ParamStore params = init_stage1_params(cfg, rng);
  PerceptualNet net = PerceptualNet::make_random(cfg.perc);
  Adam opt_g, opt_d;
  opt_g.lr = cfg.lr_stage1;
  opt_d.lr = cfg.lr_stage1;

  Stage1Result out;
  const bool use_gan = cfg.weights.gan > 0.0;
  const bool use_disc = cfg.weights.discr > 0.0;

  for (int step = 1; step <= cfg.steps; ++step) {
    std::map<std::string, Tensor> g_grads, d_grads;
    double per_sum = 0, gan_sum = 0, discr_sum = 0, gen_sum = 0;
    const bool d_turn = use_disc && (step % cfg.d_every == 0);

    for (int b = 0; b < cfg.batch; ++b) {
      int ci = clips.size() > 1 ? rng.uniform_int(0, static_cast<int>(clips.size()) - 1) : 0;
      const TrainClip& clip = clips[static_cast<size_t>(ci)];
      int nf = static_cast<int>(clip.frames.size());
      int is = rng.uniform_int(0, nf - 1);
      int id = rng.uniform_int(0, nf - 2);
      if (id >= is) ++id;

      Exec ex(params, /*training=*/true);
      Graph& g = ex.g;
      Var source = g.constant(clip.frames[static_cast<size_t>(is)]);
      Var driving = g.constant(clip.frames[static_cast<size_t>(id)]);

      MotionFeature mf = estimate_latent_motion(ex, driving, cfg.dev);
      ReconstructOut recon = reconstruct(ex, source, mf, cfg.enc, cfg.dev, cfg.flags);

      Stage1Parts parts;
      parts.per_glo = perceptual_global(ex, driving, recon.image, net, cfg.weights.J);
      const FrameBoxes& fb = clip.boxes[static_cast<size_t>(id)];
      LocalLosses ll = perceptual_local(ex, driving, recon.image, fb.hands, fb.face, net);
      parts.hand = ll.hand;
      parts.face = ll.face;
      if (use_gan) {
        Var d_fake = discriminate(ex, recon.image);
        parts.l_gan = cfg.gan_kind == GanKind::LeastSquares
                          ? mean_all(g, vsquare(g, add_scalar(g, d_fake, -1.0)))
                          : vneg(g, mean_all(g, d_fake));
      } else {
        parts.l_gan = g.constant(Tensor::scalar(0.0));
      }
      parts.l_discr = g.constant(Tensor::scalar(0.0));

      Stage1Total total = stage1_total(g, parts, cfg.weights);
      g.backward(total.generator);
      detail::accumulate(g_grads, detail::take_grads(ex, params, /*disc_side=*/false));

      per_sum += total.per->val[0];
      gan_sum += parts.l_gan->val[0];
      gen_sum += total.generator->val[0];

      if (d_turn) {
        Exec exd(params, /*training=*/true);
        Graph& gd = exd.g;
        Var d_real = discriminate(exd, gd.constant(clip.frames[static_cast<size_t>(id)]));
        Var d_fake = discriminate(exd, gd.constant(recon.image->val));
        Var l_discr;
        if (cfg.gan_kind == GanKind::LeastSquares) {
          l_discr = add(gd, mean_all(gd, vsquare(gd, add_scalar(gd, d_real, -1.0))),
                        mean_all(gd, vsquare(gd, d_fake)));
        } else {
          auto relu = [&](Var v) { return leaky(gd, v, 0.0); };
          l_discr = add(gd, mean_all(gd, relu(add_scalar(gd, vneg(gd, d_real), 1.0))),
                        mean_all(gd, relu(add_scalar(gd, d_fake, 1.0))));
        }
        Var scaled = mul_scalar(gd, l_discr, cfg.weights.discr);
        gd.backward(scaled);
        detail::accumulate(d_grads, detail::take_grads(exd, params, /*disc_side=*/true));
        discr_sum += l_discr->val[0];
      }
    }

    detail::scale(g_grads, 1.0 / cfg.batch);
    opt_g.step(params, g_grads);
    if (d_turn && !d_grads.empty()) {
      detail::scale(d_grads, 1.0 / cfg.batch);
      opt_d.step(params, d_grads);
    }

    out.history.push_back({step, "l_per", per_sum / cfg.batch});
    out.history.push_back({step, "l_gan", gan_sum / cfg.batch});
    out.history.push_back({step, "l_discr", d_turn ? discr_sum / cfg.batch : 0.0});
    out.history.push_back({step, "l_total", gen_sum / cfg.batch});
  }

  out.ckpt.stage = 1;
  out.ckpt.step = cfg.steps;
  out.ckpt.rng_state = rng.state();
  out.ckpt.cfg = cfg;
  out.ckpt.params = std::move(params);
  return out;
}

inline Stage1Result train_stage1(const DatasetManifest& data, const TrainConfig& cfg) {
  return train_stage1(load_training_clips(data, cfg), cfg);
}

/// Mean PSNR (peak 1) of reconstructing three fixed driving frames per clip
/// from its frame 0. Deterministic probe used by ablation comparisons.
inline double reconstruction_psnr(ParamStore& params, const std::vector<TrainClip>& clips,
                                  const TrainConfig& cfg) {
  if (clips.empty()) throw Error("reconstruction_psnr: no clips");
  double sum = 0.0;
  int n = 0;
  for (const TrainClip& clip : clips) {
    const int nf = static_cast<int>(clip.frames.size());
    int probes[3] = {nf / 6, nf / 2, (5 * nf) / 6};
    int last = -1;
    for (int k : probes) {
      k = std::clamp(k, 1, nf - 1);
      if (k == last) continue;  // tiny clips collapse probe indices
      last = k;
      Exec ex(params, /*training=*/false);
      MotionFeature mf = estimate_latent_motion(ex, ex.g.constant(clip.frames[static_cast<size_t>(k)]), cfg.dev);
      auto rec = reconstruct(ex, ex.g.constant(clip.frames[0]), mf, cfg.enc, cfg.dev, cfg.flags);
      const Tensor& a = rec.image->val;
      const Tensor& b = clip.frames[static_cast<size_t>(k)];
      double mse = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        mse += d * d;
      }
      mse /= static_cast<double>(a.numel());
      sum += mse == 0.0 ? 1e9 : 10.0 * std::log10(1.0 / mse);
      ++n;
    }
  }
  return sum / n;
}

// ---- stage 2 ---------------------------------------------------------------------------

/// Frozen-LPE motion features for every frame of a clip, one row per frame.
inline Tensor extract_motion_features(ParamStore& stage1_params, const TrainClip& clip,
                                      const DeviationConfig& dev) {
  Tensor out({static_cast<int>(clip.frames.size()), dev.K});
  for (size_t i = 0; i < clip.frames.size(); ++i) {
    Exec ex(stage1_params, /*training=*/false);
    MotionFeature mf = estimate_latent_motion(ex, ex.g.constant(clip.frames[i]), dev);
    std::copy(mf.v->val.data.begin(), mf.v->val.data.end(),
              out.data.begin() + static_cast<int64_t>(i) * dev.K);
  }
  return out;
}

struct Stage2Result {
  Checkpoint ckpt;
  std::vector<LossRow> history;
};

/// Denoiser training on windows of frozen stage-1 motion features. prev4 is
/// teacher-forced from the extracted ground-truth features.
inline Stage2Result train_stage2(const std::vector<TrainClip>& clips, const Checkpoint& ck1,
                                 const TrainConfig& cfg) {
  if (cfg.stage != 2) throw Error("train_stage2: config stage must be 2");
  if (!cfg.valid()) throw Error("train_stage2: invalid config");
  if (ck1.stage != 1) throw Error("train_stage2: first checkpoint is not stage 1");
  if (cfg.diff.K != ck1.cfg.dev.K)
    throw Error("train_stage2: motion feature width mismatch between stages");
  if (clips.empty()) throw Error("train_stage2: empty dataset");
  const int M = cfg.diff.M;
  for (const TrainClip& c : clips) {
    if (static_cast<int>(c.frames.size()) < M + 4)
      throw Error("train_stage2: clip shorter than window + 4 context frames");
    if (c.frame_audio.dim(1) != cfg.diff.audio_dim)
      throw Error("train_stage2: audio feature width mismatch");
  }

  ParamStore frozen = ck1.params;  // local copy; never written back
  std::vector<Tensor> mf_tracks;
  for (const TrainClip& c : clips)
    mf_tracks.push_back(extract_motion_features(frozen, c, ck1.cfg.dev));

  Rng rng(cfg.seed);
  ParamStore params = init_stage2_params(cfg, rng);
  DiffusionSchedule sched = make_schedule(cfg.diff.t_steps);
  Adam opt;
  opt.lr = cfg.lr_stage2;

  Stage2Result out;
  const int K = cfg.diff.K;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::map<std::string, Tensor> grads;
    double loss_sum = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      int ci = clips.size() > 1 ? rng.uniform_int(0, static_cast<int>(clips.size()) - 1) : 0;
      const TrainClip& clip = clips[static_cast<size_t>(ci)];
      const Tensor& track = mf_tracks[static_cast<size_t>(ci)];
      int nf = track.dim(0);
      int s = rng.uniform_int(4, nf - M);

      Tensor x0({M, K}), prev4({4, K});
      std::copy(track.data.begin() + static_cast<int64_t>(s) * K,
                track.data.begin() + static_cast<int64_t>(s + M) * K, x0.data.begin());
      std::copy(track.data.begin() + static_cast<int64_t>(s - 4) * K,
                track.data.begin() + static_cast<int64_t>(s) * K, prev4.data.begin());

      Condition cond;
      cond.prev4 = std::move(prev4);
      cond.source_mf = Tensor({1, K});
      std::copy(track.data.begin(), track.data.begin() + K, cond.source_mf.data.begin());
      cond.audio = Tensor({M, cfg.diff.audio_dim});
      std::copy(clip.frame_audio.data.begin() + static_cast<int64_t>(s) * cfg.diff.audio_dim,
                clip.frame_audio.data.begin() +
                    static_cast<int64_t>(s + M) * cfg.diff.audio_dim,
                cond.audio.data.begin());

      int t = rng.uniform_int(1, cfg.diff.t_steps);
      Tensor eps({M, K});
      for (auto& v : eps.data) v = rng.normal();
      Tensor xt = q_sample(x0, t, eps, sched);

      Exec ex(params, /*training=*/true);
      Var xhat = predict_clean(ex, cfg.diff, ex.g.constant(xt), t, cond);
      DiffLossParts parts = diffusion_loss(ex.g, xhat, ex.g.constant(x0),
                                           cfg.diff.lambda_vel, cfg.diff.lambda_acc);
      ex.g.backward(parts.total);
      detail::accumulate(grads, detail::take_grads(ex, params, /*disc_side=*/false));
      loss_sum += parts.total->val[0];
    }
    detail::scale(grads, 1.0 / cfg.batch);
    opt.step(params, grads);
    out.history.push_back({step, "l_diff", loss_sum / cfg.batch});
  }

  out.ckpt.stage = 2;
  out.ckpt.step = cfg.steps;
  out.ckpt.rng_state = rng.state();
  out.ckpt.cfg = cfg;
  out.ckpt.params = std::move(params);
  return out;
}

inline Stage2Result train_stage2(const DatasetManifest& data, const Checkpoint& ck1,
                                 const TrainConfig& cfg) {
  return train_stage2(load_training_clips(data, cfg), ck1, cfg);
}

// ---- inference -------------------------------------------------------------------------

struct VideoClip {
  std::vector<Image> frames;
  double fps = 16.0;
};

/// Audio + one source image -> gesture video. Frame count is floor(duration * fps).
inline VideoClip generate_video(const Checkpoint& ck1, const Checkpoint& ck2,
                                const Waveform& audio, const Image& source, uint64_t seed) {
  if (ck1.stage != 1) throw Error("generate_video: first checkpoint is not stage 1");
  if (ck2.stage != 2) throw Error("generate_video: second checkpoint is not stage 2");
  if (ck1.cfg.dev.K != ck2.cfg.diff.K)
    throw Error("generate_video: incompatible checkpoints (motion feature width)");
  const double fps = ck1.cfg.fps;
  const int n_frames =
      static_cast<int>(std::floor(fps * audio.samples.size() / audio.sample_rate));
  if (n_frames < ck2.cfg.diff.M)
    throw Error("generate_video: audio shorter than one diffusion window");

  AudioConfig ac;
  ac.bands = ck2.cfg.diff.audio_dim;
  AudioFeatures af = extract_audio_features(audio, ac);
  Tensor frame_audio = frame_audio_matrix(af, n_frames, fps);

  ParamStore s1 = ck1.params;
  ParamStore s2 = ck2.params;
  Tensor src = source.to_chw();

  Tensor source_mf;
  {
    Exec ex(s1, /*training=*/false);
    source_mf =
        estimate_latent_motion(ex, ex.g.constant(src), ck1.cfg.dev).v->val;
  }

  DiffusionSchedule sched = make_schedule(ck2.cfg.diff.t_steps);
  Tensor mfs = rollout(s2, ck2.cfg.diff, frame_audio, source_mf, sched,
                       ck2.cfg.sample_steps, seed);

  VideoClip clip;
  clip.fps = fps;
  clip.frames.reserve(static_cast<size_t>(n_frames));
  const int K = ck1.cfg.dev.K;
  for (int i = 0; i < n_frames; ++i) {
    Exec ex(s1, /*training=*/false);
    Tensor row({1, K});
    std::copy(mfs.data.begin() + static_cast<int64_t>(i) * K,
              mfs.data.begin() + static_cast<int64_t>(i + 1) * K, row.data.begin());
    MotionFeature mf{ex.g.constant(std::move(row))};
    ReconstructOut rec =
        reconstruct(ex, ex.g.constant(src), mf, ck1.cfg.enc, ck1.cfg.dev, ck1.cfg.flags);
    clip.frames.push_back(Image::from_chw(rec.image->val));
  }
  return clip;
}

}  // namespace devgest
