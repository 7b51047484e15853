// Operator surface: dataset synthesis, training, generation, evaluation,
// ablation sweeps, and report plotting.
//
// Exit codes: 0 success, 1 runtime failure, 2 unknown flag / bad usage,
// 3 invalid config key or value, 4 missing file.
//
// Config precedence (high to low): explicit flag > --set key=value >
// DEVGEST_* environment variable > --config file > built-in default.
// Env names map from config keys by uppercasing and replacing '.' with '_'
// (weights.gan -> DEVGEST_WEIGHTS_GAN). Unknown keys in a config file or
// --set are rejected; stray DEVGEST_* variables are never read.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "devgest/media/synthetic.hpp"
#include "devgest/metrics/metrics.hpp"
#include "devgest/pipeline/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace devgest;

namespace {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kBadKey = 3, kMissing = 4 };

int fail(ExitCode code, const std::string& msg) {
  std::fprintf(stderr, "error code=%d msg=\"%s\"\n", static_cast<int>(code), msg.c_str());
  return code;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw FileError(what + " not found: " + p.string());
}

// ---- config stack -------------------------------------------------------------

void flatten_keys(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten_keys(*it, key, out);
    else out.push_back(key);
  }
}

json* leaf_at(json& j, const std::string& dotted) {
  json* cur = &j;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string part = dotted.substr(start, dot - start);
    if (!cur->is_object() || !cur->contains(part)) return nullptr;
    cur = &(*cur)[part];
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

/// Parse `text` with the type of the existing leaf so config_from_json sees
/// the shapes it expects.
json typed_value(const json& like, const std::string& key, const std::string& text) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError("");
    }
    if (like.is_number_integer()) return std::stoll(text);
    if (like.is_number_unsigned()) return static_cast<uint64_t>(std::stoull(text));
    if (like.is_number_float()) return std::stod(text);
    if (like.is_string()) return text;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid value for config key " + key + ": '" + text + "'");
}

void set_key(json& cfg, const std::string& key, const std::string& text) {
  json* leaf = leaf_at(cfg, key);
  if (!leaf) throw ConfigError("unknown config key: " + key);
  *leaf = typed_value(*leaf, key, text);
}

std::string env_name(const std::string& key) {
  std::string name = "DEVGEST_";
  for (char c : key) name += c == '.' ? '_' : static_cast<char>(std::toupper(c));
  return name;
}

/// Known path keys settable from file or environment; flags still win.
const std::vector<std::string> kPathKeys = {
    "paths.data", "paths.out",  "paths.ckpt1", "paths.ckpt2", "paths.audio",
    "paths.image", "paths.real", "paths.gen",  "paths.report",
};

struct ConfigStack {
  json cfg = config_to_json(TrainConfig{});
  std::map<std::string, std::string> paths;

  bool is_path_key(const std::string& k) const {
    for (const auto& p : kPathKeys)
      if (p == k) return true;
    return false;
  }

  void apply(const std::string& key, const std::string& value) {
    if (is_path_key(key)) paths[key.substr(6)] = value;
    else set_key(cfg, key, value);
  }

  void load_file(const fs::path& p) {
    require_file(p, "config file");
    std::ifstream f(p);
    std::string line;
    int ln = 0;
    while (std::getline(f, line)) {
      ++ln;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(p.string() + ":" + std::to_string(ln) + ": expected key = value");
      apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load_env() {
    std::vector<std::string> keys;
    flatten_keys(cfg, "", keys);
    keys.insert(keys.end(), kPathKeys.begin(), kPathKeys.end());
    for (const std::string& k : keys)
      if (const char* v = std::getenv(env_name(k).c_str())) apply(k, v);
  }

  void load_sets(const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
      size_t eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
  }

  /// file -> env -> --set, in ascending precedence. Explicit flags are applied
  /// afterwards by the caller.
  TrainConfig resolve(const std::string& config_path, const std::vector<std::string>& sets) {
    if (!config_path.empty()) load_file(config_path);
    load_env();
    load_sets(sets);
    return config_from_json(cfg);
  }

  std::string path_or(const std::string& flag_value, const std::string& key,
                      const std::string& fallback = "") const {
    if (!flag_value.empty()) return flag_value;
    auto it = paths.find(key);
    if (it != paths.end()) return it->second;
    return fallback;
  }
};

// ---- small chart renderer -------------------------------------------------------

void draw_bar_chart(const fs::path& out, const std::vector<double>& values, double vmax,
                    double r, double g, double b) {
  const int W = 480, H = 320, mx = 40, my = 30;
  Image im(H, W);
  for (auto& v : im.px) v = 1.0;  // white canvas
  auto put = [&](int y, int x, double pr, double pg, double pb) {
    if (y < 0 || y >= H || x < 0 || x >= W) return;
    size_t i = (static_cast<size_t>(y) * W + x) * 3;
    im.px[i] = pr;
    im.px[i + 1] = pg;
    im.px[i + 2] = pb;
  };
  if (vmax <= 0) vmax = 1.0;
  // quarter gridlines + axes
  for (int q = 0; q <= 4; ++q) {
    int y = H - my - q * (H - 2 * my) / 4;
    for (int x = mx; x < W - mx; ++x) put(y, x, 0.85, 0.85, 0.85);
  }
  const int n = static_cast<int>(values.size());
  const int span = (W - 2 * mx) / std::max(1, n);
  for (int i = 0; i < n; ++i) {
    double v = std::min(values[static_cast<size_t>(i)], vmax);
    int h = static_cast<int>((H - 2 * my) * (v / vmax));
    int x0 = mx + i * span + span / 6, x1 = mx + (i + 1) * span - span / 6;
    for (int y = H - my - h; y < H - my; ++y)
      for (int x = x0; x < x1; ++x) put(y, x, r, g, b);
  }
  for (int x = mx; x < W - mx; ++x) put(H - my, x, 0.1, 0.1, 0.1);
  for (int y = my; y <= H - my; ++y) put(y, mx, 0.1, 0.1, 0.1);
  write_png(out, im);
}

// ---- commands -------------------------------------------------------------------

int cmd_synth_data(const std::string& out, uint64_t seed, int clips, int size, double seconds,
                   double fps) {
  SynthSpec spec;
  spec.seed = seed;
  spec.clips = clips;
  spec.width = spec.height = size;
  spec.duration_s = seconds;
  spec.fps = fps;
  DatasetManifest m = generate_synthetic_dataset(spec, out);
  std::printf("dataset %s clips=%zu frames_per_clip=%d\n", out.c_str(), m.clips.size(),
              m.clips.empty() ? 0 : m.clips[0].n_frames);
  return kOk;
}

int cmd_train(TrainConfig cfg, ConfigStack& stack, const std::string& data_flag,
              const std::string& out_flag, const std::string& ckpt1_flag) {
  std::string data = stack.path_or(data_flag, "data");
  std::string out = stack.path_or(out_flag, "out", "runs");
  if (data.empty()) throw Error("train: no dataset directory (--data)");
  require_file(fs::path(data) / "manifest.json", "dataset manifest");
  DatasetManifest m = DatasetManifest::load(data);
  auto clips = load_training_clips(m, cfg);
  fs::create_directories(out);

  if (cfg.stage == 1) {
    Stage1Result r = train_stage1(clips, cfg);
    save_checkpoint(fs::path(out) / "stage1.ckpt", r.ckpt);
    write_loss_csv(fs::path(out) / "losses_stage1.csv", r.history);
    std::printf("stage1 steps=%d final_l_per=%.6f ckpt=%s\n", cfg.steps,
                r.history.empty() ? 0.0 : r.history[r.history.size() - 4].value,
                (fs::path(out) / "stage1.ckpt").c_str());
    return kOk;
  }
  std::string ck1_path = stack.path_or(ckpt1_flag, "ckpt1", (fs::path(out) / "stage1.ckpt").string());
  require_file(ck1_path, "stage-1 checkpoint");
  Checkpoint ck1 = load_checkpoint(ck1_path, 1);
  Stage2Result r = train_stage2(clips, ck1, cfg);
  save_checkpoint(fs::path(out) / "stage2.ckpt", r.ckpt);
  write_loss_csv(fs::path(out) / "losses_stage2.csv", r.history);
  std::printf("stage2 steps=%d final_l_diff=%.6f ckpt=%s\n", cfg.steps,
              r.history.empty() ? 0.0 : r.history.back().value,
              (fs::path(out) / "stage2.ckpt").c_str());
  return kOk;
}

int cmd_generate(const std::string& audio, const std::string& image, const std::string& ckpt1,
                 const std::string& ckpt2, const std::string& out, uint64_t seed) {
  require_file(audio, "audio file");
  require_file(image, "source image");
  require_file(ckpt1, "stage-1 checkpoint");
  require_file(ckpt2, "stage-2 checkpoint");
  Checkpoint ck1 = load_checkpoint(ckpt1, 1);
  Checkpoint ck2 = load_checkpoint(ckpt2, 2);
  Waveform wav = read_wav(audio);
  Image source = read_png(image);
  VideoClip clip = generate_video(ck1, ck2, wav, source, seed);

  fs::create_directories(fs::path(out) / "frames");
  char name[32];
  for (size_t i = 0; i < clip.frames.size(); ++i) {
    std::snprintf(name, sizeof(name), "%05zu.png", i);
    write_png(fs::path(out) / "frames" / name, clip.frames[i]);
  }
  json manifest;
  manifest["n_frames"] = clip.frames.size();
  manifest["fps"] = clip.fps;
  manifest["width"] = clip.frames.empty() ? 0 : clip.frames[0].w;
  manifest["height"] = clip.frames.empty() ? 0 : clip.frames[0].h;
  manifest["seed"] = seed;
  std::ofstream mf(fs::path(out) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  std::printf("generated %zu frames at %.3g fps -> %s\n", clip.frames.size(), clip.fps,
              out.c_str());
  return kOk;
}

int cmd_evaluate(const std::string& real_dir, const std::string& gen_dir, const std::string& out,
                 const std::string& ckpt1, uint64_t seed) {
  require_file(fs::path(real_dir) / "manifest.json", "real dataset manifest");
  require_file(fs::path(gen_dir) / "manifest.json", "generated dataset manifest");
  DatasetManifest mr = DatasetManifest::load(real_dir);
  DatasetManifest mg = DatasetManifest::load(gen_dir);

  std::vector<std::vector<Image>> real, gen;
  std::vector<std::vector<FrameBoxes>> boxes;
  for (size_t i = 0; i < mr.clips.size(); ++i) {
    Clip c = load_clip(mr, static_cast<int>(i));
    real.push_back(std::move(c.frames));
    boxes.push_back(std::move(c.boxes));
  }
  for (size_t i = 0; i < mg.clips.size(); ++i)
    gen.push_back(load_clip(mg, static_cast<int>(i)).frames);

  EvalConfig ec;
  ec.seed = seed;
  Checkpoint ck1;
  if (!ckpt1.empty()) {
    require_file(ckpt1, "stage-1 checkpoint");
    ck1 = load_checkpoint(ckpt1, 1);
    ec.lpe_params = &ck1.params;
    ec.dev = ck1.cfg.dev;
  }
  json report = evaluate_report(real, gen, boxes, ec);
  fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path());
  std::ofstream f(out);
  if (!f) throw FileError("cannot write report: " + out);
  f << report.dump(2) << "\n";
  std::printf("fgd=%.6g div=%.6g fvd=%.6g -> %s\n",
              report["set_metrics"]["fgd"].get<double>(),
              report["set_metrics"]["div"].get<double>(),
              report["set_metrics"]["fvd"].get<double>(), out.c_str());
  return kOk;
}

int cmd_ablate(TrainConfig base, ConfigStack& stack, const std::string& data_flag,
               const std::string& out_flag, std::vector<std::string> variants) {
  std::string data = stack.path_or(data_flag, "data");
  std::string out = stack.path_or(out_flag, "out", "ablations");
  if (data.empty()) throw Error("ablate: no dataset directory (--data)");
  require_file(fs::path(data) / "manifest.json", "dataset manifest");
  DatasetManifest m = DatasetManifest::load(data);
  auto clips = load_training_clips(m, base);

  if (variants.size() == 1 && variants[0] == "all")
    variants = {"disable_deviation", "disable_enhancer", "disable_motion_decoder"};
  variants.insert(variants.begin(), "full");

  json summary;
  for (const std::string& name : variants) {
    TrainConfig cfg = name == "full" ? base : apply_ablation(base, {name});
    cfg.stage = 1;
    Stage1Result r = train_stage1(clips, cfg);
    fs::path dir = fs::path(out) / name;
    fs::create_directories(dir);
    save_checkpoint(dir / "stage1.ckpt", r.ckpt);
    write_loss_csv(dir / "losses.csv", r.history);
    double last_per = 0;
    for (const LossRow& row : r.history)
      if (row.name == "l_per") last_per = row.value;
    double psnr_db = reconstruction_psnr(r.ckpt.params, clips, cfg);
    summary[name] = {{"l_per", last_per}, {"train_psnr", psnr_db}};
    std::printf("%-24s l_per=%.4f train_psnr=%.2f\n", name.c_str(), last_per, psnr_db);
  }
  std::ofstream f(fs::path(out) / "summary.json");
  f << summary.dump(2) << "\n";
  return kOk;
}

int cmd_plot_report(const std::string& report_path, const std::string& out) {
  require_file(report_path, "report file");
  std::ifstream f(report_path);
  json report;
  try {
    f >> report;
  } catch (const std::exception& e) {
    throw Error(std::string("unreadable report: ") + e.what());
  }
  fs::create_directories(out);

  auto num = [](const json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    std::ostringstream ss;
    ss << v.get<double>();
    return ss.str();
  };
  std::ofstream md(fs::path(out) / "report.md");
  md << "# Evaluation report\n\n";
  md << "provenance: " << report["provenance"].get<std::string>() << "  \n";
  md << "config: `" << report["config_hash"].get<std::string>() << "`\n\n";
  md << "| region | PSNR (dB) | SSIM | LPIPS |\n|---|---|---|---|\n";
  std::vector<double> ssim_bars, lpips_bars;
  for (const char* region : {"full", "hand", "lip"}) {
    const json& r = report["regions"][region];
    md << "| " << region << " | " << num(r["psnr"]) << " | " << num(r["ssim"]) << " | "
       << num(r["lpips"]) << " |\n";
    ssim_bars.push_back(r["ssim"].get<double>());
    lpips_bars.push_back(r["lpips"].get<double>());
  }
  const json& sm = report["set_metrics"];
  md << "\n| FGD | Diversity | FVD |\n|---|---|---|\n| " << num(sm["fgd"]) << " | "
     << num(sm["div"]) << " | " << num(sm["fvd"]) << " |\n";
  md << "\n![region SSIM](region_ssim.png) ![region LPIPS](region_lpips.png) "
        "![set metrics](set_metrics.png)\n";
  md.close();

  draw_bar_chart(fs::path(out) / "region_ssim.png", ssim_bars, 1.0, 0.24, 0.47, 0.85);
  double lmax = 0;
  for (double v : lpips_bars) lmax = std::max(lmax, v);
  draw_bar_chart(fs::path(out) / "region_lpips.png", lpips_bars, lmax > 0 ? lmax * 1.1 : 1.0,
                 0.85, 0.45, 0.2);
  std::vector<double> set_bars = {sm["fgd"].get<double>(), sm["div"].get<double>(),
                                  sm["fvd"].get<double>()};
  double smax = 0;
  for (double v : set_bars) smax = std::max(smax, v);
  draw_bar_chart(fs::path(out) / "set_metrics.png", set_bars, smax > 0 ? smax * 1.1 : 1.0, 0.3,
                 0.65, 0.35);
  std::printf("wrote %s\n", (fs::path(out) / "report.md").c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"devgest: two-stage co-speech gesture video toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "key = value config file with dotted sections");
  app.add_option("--set", sets, "override any config key, e.g. --set weights.gan=0")
      ->take_all();

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a procedural talking-figure dataset");
  std::string s_out = "data/synth";
  uint64_t s_seed = 7;
  int s_clips = 4, s_size = 64;
  double s_seconds = 2.0, s_fps = 16.0;
  synth->add_option("--out", s_out, "dataset directory");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_option("--clips", s_clips, "number of clips");
  synth->add_option("--size", s_size, "frame width and height");
  synth->add_option("--seconds", s_seconds, "clip duration");
  synth->add_option("--fps", s_fps, "frame rate");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  int t_stage = 1;
  std::string t_data, t_out, t_ckpt1;
  int t_steps = -1;
  uint64_t t_seed = 0;
  bool t_seed_set = false;
  double t_lr = -1;
  train->add_option("--stage", t_stage, "1 or 2")->check(CLI::Range(1, 2));
  train->add_option("--data", t_data, "dataset directory");
  train->add_option("--out", t_out, "output directory (default runs)");
  train->add_option("--ckpt1", t_ckpt1, "stage-1 checkpoint (stage 2 only)");
  train->add_option("--steps", t_steps, "optimizer steps");
  train->add_option("--seed", t_seed, "training seed")->each([&](const std::string&) {
    t_seed_set = true;
  });
  train->add_option("--lr", t_lr, "learning rate for the selected stage");

  // generate
  auto* gen = app.add_subcommand("generate", "audio + source image -> PNG frame sequence");
  std::string g_audio, g_image, g_ckpt1, g_ckpt2, g_out = "generated";
  uint64_t g_seed = 0;
  gen->add_option("--audio", g_audio, "driving wav")->required();
  gen->add_option("--image", g_image, "source frame png")->required();
  gen->add_option("--ckpt1", g_ckpt1, "stage-1 checkpoint")->required();
  gen->add_option("--ckpt2", g_ckpt2, "stage-2 checkpoint")->required();
  gen->add_option("--out", g_out, "output directory");
  gen->add_option("--seed", g_seed, "sampling seed");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "paired dataset metrics -> report json");
  std::string e_real, e_gen, e_out = "report.json", e_ckpt1;
  uint64_t e_seed = 2024;
  eval->add_option("--real", e_real, "reference dataset directory")->required();
  eval->add_option("--gen", e_gen, "generated dataset directory")->required();
  eval->add_option("--out", e_out, "report json path");
  eval->add_option("--ckpt1", e_ckpt1, "stage-1 checkpoint for motion features (else proxy)");
  eval->add_option("--seed", e_seed, "frozen feature-net seed");

  // ablate
  auto* abl = app.add_subcommand("ablate", "train pathway-ablated variants and summarize");
  std::string a_data, a_out;
  std::vector<std::string> a_flags = {"all"};
  int a_steps = -1;
  uint64_t a_seed = 0;
  bool a_seed_set = false;
  abl->add_option("--data", a_data, "dataset directory");
  abl->add_option("--out", a_out, "output directory (default ablations)");
  abl->add_option("--flags", a_flags, "comma list or 'all'")->delimiter(',');
  abl->add_option("--steps", a_steps, "optimizer steps per variant");
  abl->add_option("--seed", a_seed, "training seed")->each([&](const std::string&) {
    a_seed_set = true;
  });

  // plot-report
  auto* plot = app.add_subcommand("plot-report", "report json -> charts + markdown table");
  std::string p_report, p_out = "plots";
  plot->add_option("--report", p_report, "report json")->required();
  plot->add_option("--out", p_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::ostringstream ss;
    ss << e.what();
    return fail(kUsage, ss.str());
  }

  try {
    if (synth->parsed())
      return cmd_synth_data(s_out, s_seed, s_clips, s_size, s_seconds, s_fps);

    ConfigStack stack;
    TrainConfig cfg = stack.resolve(config_path, sets);

    if (train->parsed()) {
      cfg.stage = t_stage;
      if (t_steps >= 0) cfg.steps = t_steps;
      if (t_seed_set) cfg.seed = t_seed;
      if (t_lr > 0) (t_stage == 1 ? cfg.lr_stage1 : cfg.lr_stage2) = t_lr;
      return cmd_train(cfg, stack, t_data, t_out, t_ckpt1);
    }
    if (gen->parsed()) return cmd_generate(g_audio, g_image, g_ckpt1, g_ckpt2, g_out, g_seed);
    if (eval->parsed()) return cmd_evaluate(e_real, e_gen, e_out, e_ckpt1, e_seed);
    if (abl->parsed()) {
      cfg.stage = 1;
      if (a_steps >= 0) cfg.steps = a_steps;
      if (a_seed_set) cfg.seed = a_seed;
      return cmd_ablate(cfg, stack, a_data, a_out, a_flags);
    }
    if (plot->parsed()) return cmd_plot_report(p_report, p_out);
  } catch (const ConfigError& e) {
    return fail(kBadKey, e.what());
  } catch (const FileError& e) {
    return fail(kMissing, e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, e.what());
  }
  return fail(kUsage, "no command");
}
