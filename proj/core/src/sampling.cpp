#include "hieraudio/sampling.hpp"

#include <cmath>

#include "hieraudio/common.hpp"

namespace hieraudio::nn {

int argmax_in_range(std::span<const double> logits, int lo, int hi) {
  int best = lo;
  for (int i = lo + 1; i < hi; ++i) {
    if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

int sample_next_in_range(std::span<const double> logits, double temperature, Rng& rng,
                         int lo, int hi) {
  require(lo >= 0 && hi <= static_cast<int>(logits.size()) && lo < hi,
          "sample range out of bounds");
  for (int i = lo; i < hi; ++i) {
    if (!std::isfinite(logits[static_cast<size_t>(i)])) {
      fail_numerical("non-finite logit at index " + std::to_string(i));
    }
  }
  require(temperature >= 0.0, "temperature must be >= 0");
  if (temperature == 0.0) return argmax_in_range(logits, lo, hi);

  double max_l = logits[static_cast<size_t>(lo)];
  for (int i = lo + 1; i < hi; ++i) max_l = std::max(max_l, logits[static_cast<size_t>(i)]);
  double total = 0.0;
  for (int i = lo; i < hi; ++i) {
    total += std::exp((logits[static_cast<size_t>(i)] - max_l) / temperature);
  }
  double u = rng.next_double() * total;
  double acc = 0.0;
  int pick = hi - 1;
  for (int i = lo; i < hi; ++i) {
    acc += std::exp((logits[static_cast<size_t>(i)] - max_l) / temperature);
    if (u < acc) {
      pick = i;
      break;
    }
  }
  return pick;
}

int sample_next(std::span<const double> logits, double temperature, Rng& rng) {
  return sample_next_in_range(logits, temperature, rng, 0, static_cast<int>(logits.size()));
}

}  // namespace hieraudio::nn
