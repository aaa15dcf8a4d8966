#pragma once

#include <cstdint>
#include <vector>

namespace hieraudio {

inline constexpr int kSampleRate = 16000;
inline constexpr int kAcousticHop = 320;   // 50 Hz frames
inline constexpr int kSemanticHop = 640;   // 25 Hz frames

// Mono audio at 16 kHz, samples in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = kSampleRate;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
  double seconds() const { return static_cast<double>(size()) / sample_rate_hz; }
};

// Appends zeros so the length becomes a multiple of `multiple`.
void pad_to_multiple(Waveform& w, int multiple);

// Copy of samples [begin, end).
Waveform slice(const Waveform& w, int64_t begin, int64_t end);

// Throws if any sample is non-finite.
void check_finite(const Waveform& w);

}  // namespace hieraudio
