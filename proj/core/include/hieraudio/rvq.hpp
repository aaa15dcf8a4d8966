#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hieraudio/dsp.hpp"
#include "hieraudio/waveform.hpp"

namespace hieraudio::rvq {

// 50 Hz token matrix, T_A rows x Q layers, entries in [0, N).
struct AcousticTokens {
  int64_t t_a = 0;
  int q = 0;
  std::vector<int> tokens;  // row-major

  int& at(int64_t t, int layer) { return tokens[t * q + layer]; }
  int at(int64_t t, int layer) const { return tokens[t * q + layer]; }
};

// Flattened token sequence with per-layer index offsets applied. `layer_lo`
// and `layer_hi` are 1-based inclusive; the offset of a token from layer q
// is (q-1)*N regardless of the range, so layer ranges never collide.
struct FlatTokens {
  std::vector<int> tokens;
  int layer_lo = 1;
  int layer_hi = 1;
  int n = 0;  // codebook size used for offsets

  int layers_used() const { return layer_hi - layer_lo + 1; }
};

// Residual vector quantizer over 320-point DCT frame embeddings.
struct RvqCodec {
  int q = 6;        // layer count
  int n = 64;       // codebook size per layer
  int q_prime = 2;  // coarse layer count, 1 <= q_prime <= q
  std::vector<double> codebooks;  // q x n x 320 row-major

  const double* centroid(int layer, int code) const {  // layer 0-based
    return codebooks.data() +
           (static_cast<size_t>(layer) * n + static_cast<size_t>(code)) * dsp::kFrameLen;
  }
};

// Greedy residual training: layer q is k-means over the residuals left by
// layers < q. Per-layer mean residual energy is non-increasing.
RvqCodec fit_rvq(const dsp::FrameMatrix& dct_frames, int q, int n, int q_prime, int iters,
                 uint64_t seed);

AcousticTokens encode_acoustic(const RvqCodec& codec, const Waveform& w);

// Reconstruction from layers 1..layers_used (1-based count). Throws when
// layers_used exceeds Q.
Waveform decode_acoustic(const RvqCodec& codec, const AcousticTokens& y, int layers_used);

// Row-major flattening of the layer range [layer_lo, layer_hi] (1-based)
// with offsets applied; unflatten is its exact inverse.
FlatTokens flatten(const AcousticTokens& y, int n, int layer_lo, int layer_hi);
AcousticTokens unflatten(const FlatTokens& flat, int64_t t_a);

// Mean over non-overlapping 20 ms segments of 10*log10(Sref^2/Serr^2),
// per-segment values clamped to [-10, 35] dB; silent reference segments are
// skipped. Lengths must match.
double segmental_snr(const Waveform& ref, const Waveform& est);

// Token file: `#acoustic N=<N> Q=<Q> Qp=<Q'> rate=50` header, then one
// utterance per line, row-major with offsets applied.
void write_acoustic_tokens(const std::string& path, const RvqCodec& codec,
                           const std::vector<AcousticTokens>& lines,
                           const std::string& config_hash);
std::vector<AcousticTokens> read_acoustic_tokens(const std::string& path, int* n_out = nullptr,
                                                 int* q_out = nullptr, int* qp_out = nullptr);

}  // namespace hieraudio::rvq
