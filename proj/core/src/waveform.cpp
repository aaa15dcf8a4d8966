#include "hieraudio/waveform.hpp"

#include <cmath>

#include "hieraudio/common.hpp"

namespace hieraudio {

void pad_to_multiple(Waveform& w, int multiple) {
  int64_t rem = w.size() % multiple;
  if (rem != 0) w.samples.resize(static_cast<size_t>(w.size() + multiple - rem), 0.0);
}

Waveform slice(const Waveform& w, int64_t begin, int64_t end) {
  require(begin >= 0 && begin <= end && end <= w.size(), "slice out of range");
  Waveform out;
  out.sample_rate_hz = w.sample_rate_hz;
  out.samples.assign(w.samples.begin() + begin, w.samples.begin() + end);
  return out;
}

void check_finite(const Waveform& w) {
  for (double s : w.samples) {
    if (!std::isfinite(s)) fail_numerical("waveform contains non-finite sample");
  }
}

}  // namespace hieraudio
