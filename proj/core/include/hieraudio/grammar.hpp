#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hieraudio/rng.hpp"

namespace hieraudio::corpus {

// Symbol grammar with a designated set of forbidden bigrams (logit -inf).
// Every row keeps at least one finite entry so sampling can always proceed.
struct GrammarSpec {
  int num_symbols = 12;
  std::vector<double> bigram_logits;  // S*S row-major; -inf marks forbidden
  std::vector<double> dur_ms;         // per-symbol duration, in [60, 160]
  std::vector<double> f0_start_hz;    // per-symbol contour start, [110, 700]
  std::vector<double> f0_end_hz;      // per-symbol contour end, [110, 700]
  std::vector<double> formant_hz;     // per-symbol resonance center
  int min_len = 22;
  int max_len = 36;

  double logit(int from, int to) const { return bigram_logits[from * num_symbols + to]; }
  bool forbidden(int from, int to) const;
  bool has_forbidden_bigram(const std::vector<int>& transcript) const;
  int count_forbidden_pairs() const;
};

// Deterministic grammar from a seed. Symbols get geometrically spaced f0
// contours and shuffled log-spaced resonance centers; self-transitions plus
// a random subset of pairs are forbidden.
GrammarSpec default_grammar(int num_symbols, uint64_t seed);

// Samples a transcript (length uniform in [min_len, max_len] unless given).
// Never emits a forbidden bigram.
std::vector<int> sample_transcript(const GrammarSpec& g, Rng& rng, int length = 0);

// Per-speaker rendering parameters, a pure function of (corpus seed, id).
struct SpeakerSpec {
  int speaker_id = 0;
  double f0_offset_semitones = 0.0;       // [-6, 6]
  std::array<double, 8> harmonic_profile{};  // [0, 1]
  double noise_floor_db = -44.0;          // [-60, -30]
  double reverb_decay = 0.2;              // [0, 0.4]
};

SpeakerSpec default_speaker(uint64_t corpus_seed, int speaker_id, int num_speakers);

}  // namespace hieraudio::corpus
