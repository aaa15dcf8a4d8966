#include "hieraudio/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hieraudio/common.hpp"

namespace hieraudio::corpus {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

bool GrammarSpec::forbidden(int from, int to) const {
  return !(logit(from, to) > kNegInf);
}

bool GrammarSpec::has_forbidden_bigram(const std::vector<int>& transcript) const {
  for (size_t i = 0; i + 1 < transcript.size(); ++i) {
    if (forbidden(transcript[i], transcript[i + 1])) return true;
  }
  return false;
}

int GrammarSpec::count_forbidden_pairs() const {
  int n = 0;
  for (int i = 0; i < num_symbols; ++i)
    for (int j = 0; j < num_symbols; ++j)
      if (forbidden(i, j)) ++n;
  return n;
}

GrammarSpec default_grammar(int num_symbols, uint64_t seed) {
  require(num_symbols >= 3, "grammar needs at least 3 symbols");
  GrammarSpec g;
  g.num_symbols = num_symbols;
  Rng rng(derive_seed(seed, "grammar"));

  // f0 centers spaced geometrically so symbols are spectrally distinct.
  g.dur_ms.resize(num_symbols);
  g.f0_start_hz.resize(num_symbols);
  g.f0_end_hz.resize(num_symbols);
  g.formant_hz.resize(num_symbols);
  const double f_lo = 125.0, f_hi = 620.0;
  for (int s = 0; s < num_symbols; ++s) {
    double frac = num_symbols > 1 ? static_cast<double>(s) / (num_symbols - 1) : 0.0;
    double center = f_lo * std::pow(f_hi / f_lo, frac);
    double slope = rng.uniform(-0.18, 0.18);
    g.f0_start_hz[s] = std::clamp(center * (1.0 - 0.5 * slope), 110.0, 700.0);
    g.f0_end_hz[s] = std::clamp(center * (1.0 + 0.5 * slope), 110.0, 700.0);
    g.dur_ms[s] = rng.uniform(60.0, 160.0);
  }
  // Resonance centers log-spaced, assigned in shuffled order so formant rank
  // does not track f0 rank.
  std::vector<int> order(num_symbols);
  for (int i = 0; i < num_symbols; ++i) order[i] = i;
  for (int i = num_symbols - 1; i > 0; --i) {
    int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  for (int i = 0; i < num_symbols; ++i) {
    double frac = num_symbols > 1 ? static_cast<double>(i) / (num_symbols - 1) : 0.0;
    g.formant_hz[order[i]] = 450.0 * std::pow(5200.0 / 450.0, frac);
  }

  // Transition scores. Self-bigrams are always forbidden (keeps transcripts
  // free of adjacent repeats), plus a random subset of other pairs.
  g.bigram_logits.assign(static_cast<size_t>(num_symbols) * num_symbols, 0.0);
  for (int i = 0; i < num_symbols; ++i) {
    for (int j = 0; j < num_symbols; ++j) {
      double& l = g.bigram_logits[i * num_symbols + j];
      if (i == j || rng.next_double() < 0.18) {
        l = kNegInf;
      } else {
        l = rng.uniform(-1.0, 1.0);
      }
    }
    // keep >= 2 finite entries per row so substitution probes stay solvable
    int finite = 0;
    for (int j = 0; j < num_symbols; ++j)
      if (!g.forbidden(i, j)) ++finite;
    while (finite < 2) {
      int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(num_symbols)));
      if (j != i && g.forbidden(i, j)) {
        g.bigram_logits[i * num_symbols + j] = rng.uniform(-1.0, 1.0);
        ++finite;
      }
    }
  }
  return g;
}

std::vector<int> sample_transcript(const GrammarSpec& g, Rng& rng, int length) {
  int len = length > 0 ? length : rng.next_int(g.min_len, g.max_len);
  require(len >= 1, "transcript length must be positive");
  std::vector<int> out;
  out.reserve(static_cast<size_t>(len));
  int first = static_cast<int>(rng.next_below(static_cast<uint64_t>(g.num_symbols)));
  out.push_back(first);
  std::vector<double> probs(static_cast<size_t>(g.num_symbols));
  while (static_cast<int>(out.size()) < len) {
    int cur = out.back();
    double max_logit = -1e300;
    for (int j = 0; j < g.num_symbols; ++j) {
      double l = g.logit(cur, j);
      if (l > max_logit) max_logit = l;
    }
    double total = 0.0;
    for (int j = 0; j < g.num_symbols; ++j) {
      double l = g.logit(cur, j);
      probs[j] = std::isinf(l) ? 0.0 : std::exp(l - max_logit);
      total += probs[j];
    }
    double u = rng.next_double() * total;
    int pick = 0;
    double acc = 0.0;
    for (int j = 0; j < g.num_symbols; ++j) {
      acc += probs[j];
      if (u < acc) {
        pick = j;
        break;
      }
      pick = j;  // falls through to last nonzero on rounding
    }
    out.push_back(pick);
  }
  return out;
}

SpeakerSpec default_speaker(uint64_t corpus_seed, int speaker_id, int num_speakers) {
  SpeakerSpec sp;
  sp.speaker_id = speaker_id;
  Rng rng(derive_seed(corpus_seed, "speaker", static_cast<uint64_t>(speaker_id)));
  // Stratified f0 offsets keep speakers apart even for small counts.
  double frac = num_speakers > 1 ? static_cast<double>(speaker_id) / (num_speakers - 1) : 0.5;
  sp.f0_offset_semitones = std::clamp(-5.0 + 10.0 * frac + rng.uniform(-0.4, 0.4), -6.0, 6.0);
  sp.harmonic_profile[0] = rng.uniform(0.7, 1.0);
  for (int k = 1; k < 8; ++k) sp.harmonic_profile[k] = rng.uniform(0.05, 0.95);
  sp.noise_floor_db = rng.uniform(-48.0, -40.0);
  sp.reverb_decay = rng.uniform(0.05, 0.30);
  return sp;
}

}  // namespace hieraudio::corpus
