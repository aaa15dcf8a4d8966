#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hieraudio/conv_net.hpp"
#include "hieraudio/corpus.hpp"
#include "hieraudio/rvq.hpp"
#include "hieraudio/semantic.hpp"
#include "hieraudio/stages.hpp"
#include "hieraudio/trainer.hpp"
#include "hieraudio/transformer.hpp"

namespace hieraudio::eval {

enum class ReprKind { semantic, acoustic };

// Quantized representations: per-frame assigned centroid vectors (semantic,
// standardized space, 25 Hz) or per-frame sums of assigned RVQ centroids
// (acoustic, DCT domain, 50 Hz).
dsp::FrameMatrix representation(ReprKind kind, const sem::SemanticTokenizer& tok,
                                const rvq::RvqCodec& codec, const Waveform& w);

// DTW alignment cost with per-frame cosine distance, normalized by the
// alignment path length. Symmetric; zero on identical sequences.
double dtw_distance(const dsp::FrameMatrix& a, const dsp::FrameMatrix& b);

struct AbxResult {
  double error_percent = 0.0;
  int n_triples = 0;
};

// Fraction of triples with d(X,B) < d(X,A); exact ties count 0.5.
AbxResult abx_error_rate(const std::vector<corpus::AbxTriple>& triples, ReprKind kind,
                         const sem::SemanticTokenizer& tok, const rvq::RvqCodec& codec);

// (sum_t log p(x_t | x_<t)) / #predicted, over the masked positions.
double normalized_loglik(const nn::TransformerLM& lm, const std::vector<int>& tokens,
                         const std::vector<uint8_t>& mask);

struct ProbeResult {
  double accuracy_percent = 0.0;
  int n_pairs = 0;
};

// Positive identified by the higher length-normalized log-likelihood of its
// stage-1 sequence; ties count 0.5.
ProbeResult probe_accuracy(const nn::TransformerLM& lm1, const stages::VocabMap& vm,
                           const sem::SemanticTokenizer& tok,
                           const std::vector<corpus::ProbePair>& pairs);

// Majority-vote symbol per semantic token over aligned training frames.
// kSilenceSymbol marks tokens with no vote (or frames past the last
// boundary).
inline constexpr int kSilenceSymbol = -1;

struct TokenSymbolMap {
  std::vector<int> token_to_symbol;  // per token; kSilenceSymbol when unseen
  int64_t unseen_tokens = 0;
};

struct AlignedUtterance {
  const Waveform* waveform;
  const std::vector<int>* transcript;
  const std::vector<int64_t>* boundaries;
};

TokenSymbolMap learn_token_symbol_map(const sem::SemanticTokenizer& tok,
                                      const std::vector<AlignedUtterance>& train);

// tokenize -> map -> collapse repeats -> drop silence.
std::vector<int> decode_symbols(const TokenSymbolMap& map, const sem::SemanticTokenizer& tok,
                                const Waveform& w);

int edit_distance(const std::vector<int>& a, const std::vector<int>& b);

// Symbol error rate in percent: edit distance / reference length * 100.
double transcript_ser(const TokenSymbolMap& map, const sem::SemanticTokenizer& tok,
                      const Waveform& w, const std::vector<int>& reference);

// Classifier inference on overlapping 1 s windows with 250 ms hop; mean of
// per-window logits, then argmax. Rejects sub-1 s utterances.
int windowed_predict(const nn::ConvClassifier& cls, const Waveform& w);
double windowed_accuracy(const nn::ConvClassifier& cls, const std::vector<Waveform>& utts,
                         const std::vector<int>& labels);

// 1 s crops for classifier training, `per_utt` random crops per utterance.
std::vector<nn::ConvExample> make_crops(const std::vector<Waveform>& utts,
                                        const std::vector<int>& labels, int per_utt,
                                        uint64_t seed);

// Fits the scalar input normalization from the crops.
void fit_input_norm(nn::ConvClassifier& cls, const std::vector<nn::ConvExample>& crops);

// Binary detector on codec-reconstructed originals (label 0) vs generated
// continuations (label 1). Rejects class imbalance worse than 60/40.
nn::ConvClassifier train_detector(const std::vector<Waveform>& originals,
                                  const std::vector<Waveform>& continuations,
                                  const nn::TrainConfig& cfg, const nn::ConvConfig& arch);

}  // namespace hieraudio::eval
