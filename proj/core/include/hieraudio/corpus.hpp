#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hieraudio/grammar.hpp"
#include "hieraudio/waveform.hpp"

namespace hieraudio::corpus {

// One rendered utterance with its ground truth. segment_boundaries has
// transcript.size()+1 entries: 0, then the end sample of each symbol
// segment; the last entry is the rendered extent (before 640-padding).
struct Utterance {
  Waveform waveform;
  std::vector<int> transcript;
  int speaker_id = 0;
  std::vector<int64_t> segment_boundaries;
};

// Renders concatenated harmonic segments with 10 ms linear cross-fades,
// additive noise at the speaker noise floor and single-tap feedback reverb.
// Deterministic in (grammar, speaker, seed, transcript). With no transcript
// one is sampled from the grammar.
Utterance synth_utterance(const GrammarSpec& grammar, const SpeakerSpec& speaker,
                          uint64_t seed, const std::vector<int>* transcript = nullptr);

struct ManifestEntry {
  std::string relpath;
  int speaker_id = 0;
  std::vector<int> transcript;
  bool is_eval = false;
  std::vector<int64_t> segment_boundaries;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  int num_speakers = 0;
  int utts_per_speaker = 0;

  std::vector<int> train_indices() const;
  std::vector<int> eval_indices() const;
};

// Renders the full corpus to out_dir/wav and writes manifest.tsv plus
// segments.tsv. Split is 90/10 per speaker: the last tenth of each
// speaker's utterances is held out.
CorpusManifest gen_corpus(const GrammarSpec& grammar, int num_speakers,
                          int utts_per_speaker, uint64_t seed,
                          const std::string& out_dir);

// Manifest/segments round-trip (formats documented in the functions).
void write_manifest(const CorpusManifest& m, const std::string& dir);
CorpusManifest read_manifest(const std::string& dir);

struct ProbePair {
  Utterance positive;
  Utterance negative;
};

// Minimal pairs: negative = positive with exactly one substituted symbol
// that introduces at least one forbidden bigram; same speaker and length.
std::vector<ProbePair> make_probe_pairs(const GrammarSpec& grammar, int num_speakers,
                                        int n, uint64_t seed);

struct AbxTriple {
  Waveform a;  // instance of the target trigram
  Waveform b;  // trigram differing only in the central symbol
  Waveform x;  // second instance of the target trigram
};

// Items the triple sampler draws from (audio + alignment).
struct AbxSource {
  const Waveform* waveform;
  const std::vector<int>* transcript;
  const std::vector<int64_t>* boundaries;
  int speaker_id;
};

// Within-speaker: a, b, x share the speaker. Across-speaker: x comes from a
// different speaker than a and b. Throws with an instance-count report when
// the corpus cannot supply n triples.
std::vector<AbxTriple> make_abx_triples(const std::vector<AbxSource>& sources, int n,
                                        bool within_speaker, uint64_t seed);

}  // namespace hieraudio::corpus
