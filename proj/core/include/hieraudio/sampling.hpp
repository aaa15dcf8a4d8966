#pragma once

#include <span>

#include "hieraudio/rng.hpp"

namespace hieraudio::nn {

// Samples from softmax(logits / temperature) by inverse CDF on one uniform
// draw. temperature == 0 returns the argmax (lowest index on ties).
// Non-finite logits are rejected.
int sample_next(std::span<const double> logits, double temperature, Rng& rng);

// As sample_next but restricted to ids in [lo, hi).
int sample_next_in_range(std::span<const double> logits, double temperature, Rng& rng,
                         int lo, int hi);

// Argmax over [lo, hi), lowest index on ties.
int argmax_in_range(std::span<const double> logits, int lo, int hi);

}  // namespace hieraudio::nn
