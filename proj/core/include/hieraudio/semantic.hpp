#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hieraudio/dsp.hpp"
#include "hieraudio/waveform.hpp"

namespace hieraudio::sem {

// Discrete semantic codes at 25 Hz, values in [0, K).
struct SemanticTokens {
  std::vector<int> tokens;
  static constexpr double frame_rate_hz = 25.0;
};

// Per-dimension standardization followed by k-means over 25 Hz features.
// recon_table holds the mean 640-sample waveform frame per token, used only
// to measure semantic-token reconstruction quality.
struct SemanticTokenizer {
  int k = 0;
  std::vector<double> mean;       // dim 128
  std::vector<double> std;        // dim 128, > 0
  std::vector<int> degenerate;    // dims whose std was substituted with 1
  std::vector<double> codebook;   // k x 128, standardized space
  std::vector<double> recon_table;  // k x 640 mean waveform frames
  std::vector<uint8_t> recon_seen;  // per token: 1 if observed in training
};

// Population mean/std per dimension. Dimensions with std < 1e-8 get std 1
// and are flagged. Requires >= 2 rows.
void fit_normalizer(const dsp::FrameMatrix& features, std::vector<double>& mean,
                    std::vector<double>& std, std::vector<int>& degenerate);

// Standardizes rows in place with the tokenizer's statistics.
void standardize(const SemanticTokenizer& tok, dsp::FrameMatrix& features);

// Fits normalizer + k-means codebook on stacked features.
SemanticTokenizer fit_semantic_tokenizer(const dsp::FrameMatrix& features, int k, int iters,
                                         uint64_t seed);

// Learns the token -> mean 640-sample frame table over training waveforms.
void fit_reconstruction_table(SemanticTokenizer& tok, const std::vector<const Waveform*>& train);

SemanticTokens tokenize_semantic(const SemanticTokenizer& tok, const Waveform& w);

// Collapses runs of identical tokens; idempotent.
SemanticTokens dedup(const SemanticTokens& z);

// Concatenates per-token mean frames; unseen tokens emit silence and are
// counted in *unseen_flagged when provided.
Waveform semantic_reconstruct(const SemanticTokenizer& tok, const SemanticTokens& z_full_rate,
                              int64_t* unseen_flagged = nullptr);

// Token file: `#semantic K=<K> rate=25` header, then one utterance per line
// of space-separated decimal tokens.
void write_semantic_tokens(const std::string& path, int k,
                           const std::vector<SemanticTokens>& lines,
                           const std::string& config_hash);
std::vector<SemanticTokens> read_semantic_tokens(const std::string& path, int* k_out = nullptr);

}  // namespace hieraudio::sem
