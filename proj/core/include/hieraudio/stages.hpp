#pragma once

#include <cstdint>
#include <vector>

#include "hieraudio/rvq.hpp"
#include "hieraudio/semantic.hpp"
#include "hieraudio/trainer.hpp"
#include "hieraudio/transformer.hpp"

namespace hieraudio::stages {

// Joint vocabulary layout for the three stages. Semantic ids come first,
// then per-layer acoustic blocks, then the control tokens.
struct VocabMap {
  int k = 64;        // semantic vocabulary
  int n = 64;        // acoustic codebook size per layer
  int q = 6;         // acoustic layers
  int q_prime = 2;   // coarse layers

  // stage 1: {semantic 0..K-1} + BOS + EOS
  int s1_vocab() const { return k + 2; }
  int s1_bos() const { return k; }
  int s1_eos() const { return k + 1; }

  // stage 2: {semantic} + {coarse acoustic: layer q token n -> K+(q-1)N+n} + BOS + SEP
  int s2_vocab() const { return k + q_prime * n + 2; }
  int s2_bos() const { return k + q_prime * n; }
  int s2_sep() const { return k + q_prime * n + 1; }

  // stage 3: {acoustic layer q token n -> (q-1)N+n, all q} + BOS + SEP
  int s3_vocab() const { return q * n + 2; }
  int s3_bos() const { return q * n; }
  int s3_sep() const { return q * n + 1; }
};

struct StageBundle {
  sem::SemanticTokenizer tokenizer;
  rvq::RvqCodec codec;
  VocabMap vocab;
  nn::TransformerLM lm1;
  nn::TransformerLM lm2;
  nn::TransformerLM lm3;  // absent (unused) when q_prime == q
  double temp1 = 0.6;
  double temp2 = 0.8;
  double temp3 = 0.6;
  double chunk_seconds = 3.0;

  bool has_stage3() const { return vocab.q_prime < vocab.q; }
  int chunk_frames() const { return static_cast<int>(chunk_seconds * 50.0 + 0.5); }
};

// Training sequences. Stage 1: BOS, dedup(z), EOS with loss everywhere.
// Stage 2: BOS, dedup(z), SEP, coarse flat tokens; loss only after SEP.
// Stage 3 (per non-overlapping chunk): BOS, coarse flat, SEP, fine flat;
// loss only after SEP. Rejected when Q' == Q (stage disabled).
nn::LmSequence build_stage1(const sem::SemanticTokens& z, const VocabMap& vm);
nn::LmSequence build_stage2(const sem::SemanticTokens& z, const rvq::AcousticTokens& y,
                            const VocabMap& vm);
std::vector<nn::LmSequence> build_stage3(const rvq::AcousticTokens& y, const VocabMap& vm,
                                         int chunk_frames);

// Autoregressive semantic continuation: returns prompt + continuation
// (semantic ids only). Sampling at temp1 until EOS or max_new tokens;
// an immediately repeated token is resampled once.
std::vector<int> generate_semantic(const StageBundle& bundle, const std::vector<int>& prompt,
                                   int max_new, uint64_t seed);

// Coarse acoustic tokens for target_frames frames, conditioned on the full
// semantic sequence and an optional coarse prompt (layers 1..Q'). Layer-range
// constrained sampling at temp2.
rvq::AcousticTokens generate_coarse(const StageBundle& bundle, const std::vector<int>& z_full,
                                    const rvq::AcousticTokens* prompt_coarse,
                                    int64_t target_frames, uint64_t seed);

// Fine layers per 3 s chunk, conditioned on the chunk's coarse tokens;
// identity pass-through when Q' == Q. Coarse columns are copied bitwise.
rvq::AcousticTokens generate_fine(const StageBundle& bundle,
                                  const rvq::AcousticTokens& coarse, uint64_t seed);

// Full pipelines (§ generation modes): continuation of a >= 1 s prompt to
// total_seconds, unconditional generation, and acoustic generation from the
// ground-truth semantic tokens of w.
Waveform continue_audio(const StageBundle& bundle, const Waveform& prompt,
                        double total_seconds, uint64_t seed);
Waveform unconditional_generate(const StageBundle& bundle, double seconds, uint64_t seed);
Waveform acoustic_generation(const StageBundle& bundle, const Waveform& w, uint64_t seed);

}  // namespace hieraudio::stages
