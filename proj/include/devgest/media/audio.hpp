#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "devgest/core/errors.hpp"
#include "devgest/core/tensor.hpp"
#include "devgest/media/wav.hpp"

namespace devgest {

/// In-place radix-2 Cooley-Tukey. n must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw Error("fft: size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        auto u = a[i + k];
        auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

enum class AudioFeatureKind { LogMel, Mfcc };

struct AudioConfig {
  AudioFeatureKind kind = AudioFeatureKind::LogMel;
  int bands = 26;            // mel bands (and MFCC coefficient count when kind==Mfcc)
  double hop_seconds = 0.010;
  double win_seconds = 0.025;
  int nfft = 512;
  double fmin = 0.0;
  double fmax = 0.0;         // 0 -> Nyquist
  double energy_floor = 1e-10;
};

constexpr double kLogEnergyFloor = -23.025850929940457;  // ln(1e-10)

/// Rows = analysis frames, cols = bands. hop_seconds preserved for frame alignment.
struct AudioFeatures {
  Tensor feats;  // {T_a, bands}
  double hop_seconds = 0.010;
  int rows() const { return feats.dim(0); }
  int bands() const { return feats.dim(1); }
  /// Feature row aligned with video frame i at the given frame rate.
  int row_for_frame(int frame, double fps) const {
    int r = static_cast<int>(std::floor(frame / (fps * hop_seconds)));
    return std::min(std::max(r, 0), rows() - 1);
  }
};

namespace detail {
inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// Triangular mel filterbank over FFT bins [0, nfft/2].
inline std::vector<std::vector<double>> mel_filterbank(int bands, int nfft, int sr, double fmin, double fmax) {
  const int nbins = nfft / 2 + 1;
  double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
  std::vector<double> centers(bands + 2);
  for (int i = 0; i < bands + 2; ++i)
    centers[i] = mel_to_hz(mlo + (mhi - mlo) * i / (bands + 1));
  std::vector<std::vector<double>> fb(bands, std::vector<double>(nbins, 0.0));
  for (int b = 0; b < bands; ++b) {
    double fl = centers[b], fc = centers[b + 1], fr = centers[b + 2];
    for (int k = 0; k < nbins; ++k) {
      double f = static_cast<double>(k) * sr / nfft;
      if (f > fl && f < fc)
        fb[b][k] = (f - fl) / (fc - fl);
      else if (f >= fc && f < fr)
        fb[b][k] = (fr - f) / (fr - fc);
    }
  }
  return fb;
}
}  // namespace detail

inline AudioFeatures extract_audio_features(const Waveform& wav, const AudioConfig& cfg = {}) {
  if (wav.sample_rate <= 0) throw Error("audio features: bad sample rate");
  const int hop = static_cast<int>(std::lround(cfg.hop_seconds * wav.sample_rate));
  const int win = static_cast<int>(std::lround(cfg.win_seconds * wav.sample_rate));
  if (hop <= 0 || win <= 0) throw Error("audio features: hop/window too small for sample rate");
  if (static_cast<int>(wav.samples.size()) < hop)
    throw Error("audio features: waveform shorter than one hop");
  if (cfg.nfft < win) throw Error("audio features: nfft smaller than analysis window");
  if ((cfg.nfft & (cfg.nfft - 1)) != 0) throw Error("audio features: nfft must be a power of two");
  if (cfg.bands < 1) throw Error("audio features: bands must be positive");

  const int rows = static_cast<int>(wav.samples.size()) / hop;
  const double fmax = cfg.fmax > 0.0 ? cfg.fmax : wav.sample_rate / 2.0;
  auto fb = detail::mel_filterbank(cfg.bands, cfg.nfft, wav.sample_rate, cfg.fmin, fmax);

  std::vector<double> hann(win);
  for (int i = 0; i < win; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (win - 1));

  AudioFeatures out;
  out.hop_seconds = cfg.hop_seconds;
  out.feats = Tensor({rows, cfg.bands});
  std::vector<std::complex<double>> buf(cfg.nfft);
  const int nbins = cfg.nfft / 2 + 1;
  std::vector<double> power(nbins);
  std::vector<double> logmel(cfg.bands);
  for (int t = 0; t < rows; ++t) {
    const long start = static_cast<long>(t) * hop;
    for (int i = 0; i < cfg.nfft; ++i) {
      long idx = start + i;
      double s = (i < win && idx < static_cast<long>(wav.samples.size())) ? wav.samples[idx] * hann[i] : 0.0;
      buf[i] = {s, 0.0};
    }
    fft_inplace(buf);
    for (int k = 0; k < nbins; ++k) power[k] = std::norm(buf[k]) / cfg.nfft;
    for (int b = 0; b < cfg.bands; ++b) {
      double e = 0.0;
      for (int k = 0; k < nbins; ++k) e += fb[b][k] * power[k];
      logmel[b] = std::log(std::max(e, cfg.energy_floor));
    }
    if (cfg.kind == AudioFeatureKind::LogMel) {
      for (int b = 0; b < cfg.bands; ++b) out.feats.at2(t, b) = logmel[b];
    } else {
      // orthonormal DCT-II of the log-mel vector
      const int n = cfg.bands;
      for (int c = 0; c < n; ++c) {
        double acc = 0.0;
        for (int b = 0; b < n; ++b)
          acc += logmel[b] * std::cos(std::numbers::pi * c * (2 * b + 1) / (2.0 * n));
        double scale = std::sqrt((c == 0 ? 1.0 : 2.0) / n);
        out.feats.at2(t, c) = scale * acc;
      }
    }
  }
  return out;
}

/// Per-frame RMS level of the waveform, one value per video frame.
inline std::vector<double> frame_rms(const Waveform& wav, int n_frames, double fps) {
  std::vector<double> rms(n_frames, 0.0);
  const double spf = wav.sample_rate / fps;
  for (int i = 0; i < n_frames; ++i) {
    long a = static_cast<long>(std::floor(i * spf));
    long b = std::min<long>(static_cast<long>(std::floor((i + 1) * spf)), static_cast<long>(wav.samples.size()));
    double acc = 0.0;
    long n = 0;
    for (long s = a; s < b; ++s, ++n) acc += wav.samples[s] * wav.samples[s];
    rms[i] = n > 0 ? std::sqrt(acc / n) : 0.0;
  }
  return rms;
}

}  // namespace devgest
