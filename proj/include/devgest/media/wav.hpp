#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "devgest/core/errors.hpp"

namespace devgest {

/// Mono audio, samples in [-1,1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
  double duration_s() const { return samples.empty() ? 0.0 : static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {
inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
  for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
}  // namespace detail

/// 16-bit PCM mono RIFF/WAVE.
inline void write_wav(const std::filesystem::path& path, const Waveform& wav) {
  const uint32_t n = static_cast<uint32_t>(wav.samples.size());
  const uint32_t data_bytes = n * 2;
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<uint32_t>(wav.sample_rate));
  detail::put_u32(out, static_cast<uint32_t>(wav.sample_rate) * 2);
  detail::put_u16(out, 2);   // block align
  detail::put_u16(out, 16);  // bits
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double v : wav.samples) {
    double c = std::clamp(v, -1.0, 1.0);
    int s = static_cast<int>(std::lrint(c * 32767.0));
    detail::put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(s)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FileError("short write: " + path.string());
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open: " + path.string());
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw FileError("not a RIFF/WAVE file: " + path.string());
  Waveform wav;
  bool got_fmt = false, got_data = false;
  uint16_t channels = 0, bits = 0, format = 0;
  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const char* id = reinterpret_cast<const char*>(buf.data() + pos);
    uint32_t sz = detail::get_u32(buf.data() + pos + 4);
    size_t body = pos + 8;
    if (body + sz > buf.size()) throw FileError("truncated WAV chunk: " + path.string());
    if (std::memcmp(id, "fmt ", 4) == 0 && sz >= 16) {
      format = detail::get_u16(buf.data() + body);
      channels = detail::get_u16(buf.data() + body + 2);
      wav.sample_rate = static_cast<int>(detail::get_u32(buf.data() + body + 4));
      bits = detail::get_u16(buf.data() + body + 14);
      got_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!got_fmt) throw FileError("WAV data before fmt: " + path.string());
      if (format != 1 || bits != 16) throw FileError("unsupported WAV encoding (need 16-bit PCM): " + path.string());
      if (channels < 1) throw FileError("bad WAV channel count: " + path.string());
      uint32_t frames = sz / (2u * channels);
      wav.samples.resize(frames);
      for (uint32_t i = 0; i < frames; ++i) {
        // average channels down to mono
        double acc = 0.0;
        for (uint16_t c = 0; c < channels; ++c) {
          int16_t s = static_cast<int16_t>(detail::get_u16(buf.data() + body + (static_cast<size_t>(i) * channels + c) * 2));
          acc += s / 32767.0;
        }
        wav.samples[i] = acc / channels;
      }
      got_data = true;
    }
    pos = body + sz + (sz & 1);
  }
  if (!got_fmt || !got_data) throw FileError("incomplete WAV file: " + path.string());
  return wav;
}

}  // namespace devgest
