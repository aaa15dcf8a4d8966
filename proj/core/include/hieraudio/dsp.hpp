#pragma once

#include <cstdint>
#include <vector>

#include "hieraudio/waveform.hpp"

namespace hieraudio::dsp {

// Row-major matrix of per-frame feature vectors.
struct FrameMatrix {
  int64_t rows = 0;
  int cols = 0;
  double frame_rate_hz = 0.0;
  std::vector<double> values;  // rows * cols

  double* row(int64_t r) { return values.data() + r * cols; }
  const double* row(int64_t r) const { return values.data() + r * cols; }
  double& at(int64_t r, int c) { return values[r * cols + c]; }
  double at(int64_t r, int c) const { return values[r * cols + c]; }
};

inline constexpr int kFrameLen = 320;
inline constexpr int kLogmelWin = 400;   // 25 ms
inline constexpr int kLogmelHop = 160;   // 10 ms
inline constexpr int kLogmelBins = 64;
inline constexpr int kLogmelFft = 512;
inline constexpr double kLogFloor = 1e-10;
inline constexpr int kSemanticDim = 128;  // 64 mels + 64 deltas

// Non-overlapping 320-sample frames at 50 Hz. Input length must be a
// multiple of 320.
FrameMatrix frame(const Waveform& w);

// Inverse of frame(): concatenates rows back into samples.
Waveform unframe(const FrameMatrix& frames);

// Orthonormal DCT-II over a 320-sample frame; dct_inverse is the exact
// transpose (DCT-III), so inverse(forward(x)) == x to numerical precision.
std::vector<double> dct_forward(const std::vector<double>& frame);
std::vector<double> dct_inverse(const std::vector<double>& coeffs);

// Applies the forward/inverse DCT row-wise.
FrameMatrix dct_rows(const FrameMatrix& frames);
FrameMatrix idct_rows(const FrameMatrix& coeffs);

// 64-bin HTK log-mel features: 25 ms Hann window, 10 ms hop, length-512 DFT
// magnitude, triangular filters over 0..8000 Hz, natural log floored at 1e-10.
FrameMatrix logmel(const Waveform& w);

// Center frequencies (Hz) of the 64 mel filters.
std::vector<double> mel_filter_centers_hz();

// 25 Hz semantic features: log-mel mean-pooled in groups of 4 frames plus
// first-order temporal deltas. Input length must be a multiple of 640;
// output has exactly len/640 rows of 128 dims.
FrameMatrix semantic_features(const Waveform& w);

// In-place complex radix-2 FFT helper (size must be a power of two).
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

}  // namespace hieraudio::dsp
