#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "devgest/core/errors.hpp"
#include "devgest/media/audio.hpp"
#include "devgest/media/image.hpp"
#include "devgest/media/wav.hpp"

namespace devgest {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ClipRecord {
  std::string id;
  std::string rel_dir;  // relative to dataset root, e.g. "clips/clip0000"
  int n_frames = 0;
  std::string split = "train";
  bool has_boxes = false;
};

struct DatasetManifest {
  fs::path root;
  int format_version = 1;
  uint64_t seed = 0;
  double fps = 16.0;
  int sample_rate = 16000;
  int width = 64, height = 64;
  std::vector<ClipRecord> clips;

  fs::path clip_dir(int i) const { return root / clips.at(i).rel_dir; }

  void save() const {
    json j;
    j["format_version"] = format_version;
    j["seed"] = seed;
    j["fps"] = fps;
    j["sample_rate"] = sample_rate;
    j["width"] = width;
    j["height"] = height;
    j["clips"] = json::array();
    for (const auto& c : clips) {
      json jc;
      jc["id"] = c.id;
      jc["dir"] = c.rel_dir;
      jc["frames"] = c.n_frames;
      jc["split"] = c.split;
      jc["has_boxes"] = c.has_boxes;
      j["clips"].push_back(jc);
    }
    fs::create_directories(root);
    std::ofstream f(root / "manifest.json");
    if (!f) throw FileError("cannot write manifest: " + (root / "manifest.json").string());
    f << j.dump(2) << "\n";
  }

  static DatasetManifest load(const fs::path& root) {
    fs::path mp = root / "manifest.json";
    std::ifstream f(mp);
    if (!f) throw FileError("missing dataset manifest: " + mp.string());
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw FileError("corrupt dataset manifest: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.root = root;
    m.format_version = j.value("format_version", 0);
    if (m.format_version != 1)
      throw FileError("unsupported dataset format_version: " + std::to_string(m.format_version));
    m.seed = j.value("seed", 0ull);
    m.fps = j.value("fps", 16.0);
    m.sample_rate = j.value("sample_rate", 16000);
    m.width = j.value("width", 64);
    m.height = j.value("height", 64);
    for (const auto& jc : j.value("clips", json::array())) {
      ClipRecord c;
      c.id = jc.value("id", "");
      c.rel_dir = jc.value("dir", "");
      c.n_frames = jc.value("frames", 0);
      c.split = jc.value("split", "train");
      c.has_boxes = jc.value("has_boxes", false);
      if (c.id.empty() || c.rel_dir.empty() || c.n_frames <= 0)
        throw FileError("invalid clip record in manifest: " + jc.dump());
      m.clips.push_back(c);
    }
    if (m.clips.empty()) throw FileError("dataset manifest lists no clips");
    return m;
  }
};

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.png", i);
  return buf;
}

inline json boxes_to_json(const std::vector<FrameBoxes>& boxes) {
  json arr = json::array();
  for (const auto& fb : boxes) {
    json jf;
    jf["hands"] = json::array();
    for (const auto& b : fb.hands) jf["hands"].push_back({b.x0, b.y0, b.x1, b.y1});
    jf["face"] = {fb.face.x0, fb.face.y0, fb.face.x1, fb.face.y1};
    arr.push_back(jf);
  }
  return arr;
}

inline std::vector<FrameBoxes> boxes_from_json(const json& arr) {
  std::vector<FrameBoxes> out;
  for (const auto& jf : arr) {
    FrameBoxes fb;
    for (const auto& jb : jf.value("hands", json::array()))
      fb.hands.push_back({jb.at(0), jb.at(1), jb.at(2), jb.at(3)});
    if (jf.contains("face")) {
      const auto& jb = jf["face"];
      fb.face = {jb.at(0), jb.at(1), jb.at(2), jb.at(3)};
    }
    out.push_back(fb);
  }
  return out;
}

/// Write one clip directory: frames/%05d.png, audio.wav, optional boxes.json / motion.json.
inline void write_clip_dir(const fs::path& dir, const std::vector<Image>& frames, const Waveform& audio,
                           const std::vector<FrameBoxes>* boxes = nullptr, const json* motion = nullptr) {
  fs::create_directories(dir / "frames");
  for (size_t i = 0; i < frames.size(); ++i)
    write_png(dir / "frames" / frame_name(static_cast<int>(i)), frames[i]);
  write_wav(dir / "audio.wav", audio);
  if (boxes) {
    std::ofstream f(dir / "boxes.json");
    f << boxes_to_json(*boxes).dump(2) << "\n";
  }
  if (motion) {
    std::ofstream f(dir / "motion.json");
    f << motion->dump(2) << "\n";
  }
}

/// A fully loaded clip: frames in [0,1], waveform, optional per-frame boxes.
struct Clip {
  std::string id;
  double fps = 16.0;
  std::vector<Image> frames;
  Waveform audio;
  std::vector<FrameBoxes> boxes;  // empty when absent
  bool has_boxes() const { return !boxes.empty(); }
};

inline Clip load_clip(const DatasetManifest& m, int index) {
  if (index < 0 || index >= static_cast<int>(m.clips.size()))
    throw Error("load_clip: index out of range");
  const ClipRecord& rec = m.clips[index];
  fs::path dir = m.root / rec.rel_dir;
  Clip clip;
  clip.id = rec.id;
  clip.fps = m.fps;
  clip.frames.reserve(rec.n_frames);
  for (int i = 0; i < rec.n_frames; ++i) {
    fs::path fp = dir / "frames" / frame_name(i);
    if (!fs::exists(fp)) throw FileError("missing frame: " + fp.string());
    Image im = read_png(fp);
    if (im.w != m.width || im.h != m.height)
      throw FileError("frame size mismatch in " + fp.string() + ": got " + std::to_string(im.w) + "x" +
                      std::to_string(im.h) + ", manifest says " + std::to_string(m.width) + "x" +
                      std::to_string(m.height));
    clip.frames.push_back(std::move(im));
  }
  fs::path ap = dir / "audio.wav";
  if (!fs::exists(ap)) throw FileError("missing audio: " + ap.string());
  clip.audio = read_wav(ap);
  if (clip.audio.sample_rate != m.sample_rate)
    throw FileError("audio sample rate mismatch in " + ap.string());
  if (rec.has_boxes) {
    fs::path bp = dir / "boxes.json";
    std::ifstream f(bp);
    if (!f) throw FileError("missing boxes: " + bp.string());
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw FileError("corrupt boxes.json: " + std::string(e.what()));
    }
    clip.boxes = boxes_from_json(j);
    if (static_cast<int>(clip.boxes.size()) != rec.n_frames)
      throw FileError("boxes.json frame count mismatch in " + bp.string());
  }
  return clip;
}

}  // namespace devgest
