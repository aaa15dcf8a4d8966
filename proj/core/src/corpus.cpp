#include "hieraudio/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "hieraudio/common.hpp"
#include "hieraudio/threads.hpp"
#include "hieraudio/wav_io.hpp"

namespace hieraudio::corpus {

namespace {

constexpr int kCrossfade = 160;  // 10 ms
constexpr int kReverbDelay = 800;  // 50 ms single tap
constexpr int kPartials = 8;

// Renders one harmonic segment for (symbol, speaker); phases start from
// rng-drawn offsets, f0 ramps linearly along the segment.
std::vector<double> render_segment(const GrammarSpec& g, const SpeakerSpec& sp, int symbol,
                                   int64_t n_samples, Rng& rng) {
  const double shift = std::pow(2.0, sp.f0_offset_semitones / 12.0);
  const double f_start = g.f0_start_hz[symbol] * shift;
  const double f_end = g.f0_end_hz[symbol] * shift;
  const double f_mid = 0.5 * (f_start + f_end);
  const double log_formant = std::log(g.formant_hz[symbol]);

  double amps[kPartials];
  double total = 0.0;
  for (int k = 0; k < kPartials; ++k) {
    double f_k = (k + 1) * f_mid;
    double d = (std::log(f_k) - log_formant) / 0.55;
    amps[k] = sp.harmonic_profile[static_cast<size_t>(k)] * std::exp(-0.5 * d * d);
    total += amps[k];
  }
  if (total < 1e-9) total = 1e-9;
  for (double& a : amps) a *= 0.30 / total;

  double phase[kPartials];
  for (double& p : phase) p = rng.uniform(0.0, 2.0 * 3.14159265358979323846);

  std::vector<double> out(static_cast<size_t>(n_samples), 0.0);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int64_t i = 0; i < n_samples; ++i) {
    double t = n_samples > 1 ? static_cast<double>(i) / static_cast<double>(n_samples - 1) : 0.0;
    double f0 = f_start + (f_end - f_start) * t;
    double v = 0.0;
    for (int k = 0; k < kPartials; ++k) {
      phase[k] += two_pi * (k + 1) * f0 / kSampleRate;
      if (phase[k] > two_pi) phase[k] -= two_pi * std::floor(phase[k] / two_pi);
      v += amps[k] * std::sin(phase[k]);
    }
    out[static_cast<size_t>(i)] = v;
  }
  return out;
}

}  // namespace

Utterance synth_utterance(const GrammarSpec& grammar, const SpeakerSpec& speaker,
                          uint64_t seed, const std::vector<int>* transcript) {
  Rng rng(derive_seed(seed, "utt"));
  std::vector<int> syms;
  if (transcript != nullptr) {
    for (int s : *transcript) {
      require(s >= 0 && s < grammar.num_symbols, "transcript symbol out of range");
    }
    if (grammar.has_forbidden_bigram(*transcript)) {
      fail_input("transcript contains a forbidden bigram");
    }
    syms = *transcript;
  } else {
    syms = sample_transcript(grammar, rng);
  }
  require(!syms.empty(), "empty transcript");
  const int n = static_cast<int>(syms.size());

  // per-instance duration jitter, then render
  std::vector<int64_t> durs(static_cast<size_t>(n));
  std::vector<std::vector<double>> segs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double jitter = rng.uniform(0.9, 1.1);
    int64_t d = std::llround(grammar.dur_ms[syms[static_cast<size_t>(i)]] * jitter *
                             kSampleRate / 1000.0);
    durs[static_cast<size_t>(i)] = std::max<int64_t>(d, 2 * kCrossfade);
    segs[static_cast<size_t>(i)] =
        render_segment(grammar, speaker, syms[static_cast<size_t>(i)], durs[static_cast<size_t>(i)], rng);
  }

  // overlap-add with 10 ms linear cross-fades
  int64_t total = 0;
  std::vector<int64_t> starts(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    starts[static_cast<size_t>(i)] = i == 0 ? 0 : starts[static_cast<size_t>(i - 1)] +
                                                      durs[static_cast<size_t>(i - 1)] - kCrossfade;
  }
  total = starts[static_cast<size_t>(n - 1)] + durs[static_cast<size_t>(n - 1)];

  Utterance u;
  u.speaker_id = speaker.speaker_id;
  u.transcript = syms;
  u.waveform.samples.assign(static_cast<size_t>(total), 0.0);
  for (int i = 0; i < n; ++i) {
    const auto& seg = segs[static_cast<size_t>(i)];
    int64_t len = static_cast<int64_t>(seg.size());
    for (int64_t j = 0; j < len; ++j) {
      double gain = 1.0;
      if (i > 0 && j < kCrossfade) gain *= static_cast<double>(j) / kCrossfade;
      if (i + 1 < n && j >= len - kCrossfade) {
        gain *= static_cast<double>(len - 1 - j) / kCrossfade;
      }
      u.waveform.samples[static_cast<size_t>(starts[static_cast<size_t>(i)] + j)] +=
          gain * seg[static_cast<size_t>(j)];
    }
  }

  // noise floor + single-tap feedback reverb
  const double noise_amp = std::pow(10.0, speaker.noise_floor_db / 20.0);
  for (auto& s : u.waveform.samples) s += noise_amp * rng.next_normal();
  if (speaker.reverb_decay > 0.0) {
    for (int64_t i = kReverbDelay; i < total; ++i) {
      u.waveform.samples[static_cast<size_t>(i)] +=
          speaker.reverb_decay * u.waveform.samples[static_cast<size_t>(i - kReverbDelay)];
    }
  }
  for (auto& s : u.waveform.samples) s = std::clamp(s, -1.0, 1.0);

  // boundaries: 0, then segment ends at the cross-fade midpoints
  u.segment_boundaries.resize(static_cast<size_t>(n) + 1);
  u.segment_boundaries[0] = 0;
  for (int i = 1; i < n; ++i) {
    u.segment_boundaries[static_cast<size_t>(i)] = starts[static_cast<size_t>(i)] + kCrossfade / 2;
  }
  u.segment_boundaries[static_cast<size_t>(n)] = total;

  pad_to_multiple(u.waveform, kSemanticHop);
  return u;
}

std::vector<int> CorpusManifest::train_indices() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
    if (!entries[static_cast<size_t>(i)].is_eval) out.push_back(i);
  }
  return out;
}

std::vector<int> CorpusManifest::eval_indices() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
    if (entries[static_cast<size_t>(i)].is_eval) out.push_back(i);
  }
  return out;
}

CorpusManifest gen_corpus(const GrammarSpec& grammar, int num_speakers,
                          int utts_per_speaker, uint64_t seed,
                          const std::string& out_dir) {
  require(num_speakers >= 2, "gen_corpus requires at least 2 speakers");
  require(utts_per_speaker >= 1, "gen_corpus requires at least 1 utterance per speaker");

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "wav");

  CorpusManifest m;
  m.num_speakers = num_speakers;
  m.utts_per_speaker = utts_per_speaker;
  const int eval_start = (utts_per_speaker * 9) / 10;  // last tenth is eval
  m.entries.resize(static_cast<size_t>(num_speakers) * utts_per_speaker);

  std::vector<SpeakerSpec> speakers(static_cast<size_t>(num_speakers));
  for (int s = 0; s < num_speakers; ++s) speakers[static_cast<size_t>(s)] = default_speaker(seed, s, num_speakers);

  parallel_for(static_cast<int64_t>(num_speakers) * utts_per_speaker, [&](int64_t idx) {
    int spk = static_cast<int>(idx / utts_per_speaker);
    int k = static_cast<int>(idx % utts_per_speaker);
    uint64_t u_seed = derive_seed(seed, "utterance",
                                  static_cast<uint64_t>(spk) * 1000000ULL + static_cast<uint64_t>(k));
    Utterance u = synth_utterance(grammar, speakers[static_cast<size_t>(spk)], u_seed);
    char name[64];
    std::snprintf(name, sizeof(name), "wav/s%02d_u%04d.wav", spk, k);
    write_wav((fs::path(out_dir) / name).string(), u.waveform);
    ManifestEntry& e = m.entries[static_cast<size_t>(idx)];
    e.relpath = name;
    e.speaker_id = spk;
    e.transcript = u.transcript;
    e.segment_boundaries = u.segment_boundaries;
    e.is_eval = k >= eval_start;
  });

  write_manifest(m, out_dir);
  return m;
}

void write_manifest(const CorpusManifest& m, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ofstream mf(fs::path(dir) / "manifest.tsv", std::ios::trunc);
  require(static_cast<bool>(mf), "cannot write manifest.tsv in " + dir);
  for (const auto& e : m.entries) {
    mf << e.relpath << '\t' << e.speaker_id << '\t';
    for (size_t i = 0; i < e.transcript.size(); ++i) {
      if (i) mf << ' ';
      mf << e.transcript[i];
    }
    mf << '\n';
  }
  std::ofstream sf(fs::path(dir) / "segments.tsv", std::ios::trunc);
  require(static_cast<bool>(sf), "cannot write segments.tsv in " + dir);
  for (const auto& e : m.entries) {
    sf << e.relpath << '\t';
    for (size_t i = 0; i < e.segment_boundaries.size(); ++i) {
      if (i) sf << ' ';
      sf << e.segment_boundaries[i];
    }
    sf << '\n';
  }
}

CorpusManifest read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.tsv");
  if (!mf) fail_missing("manifest.tsv not found in " + dir + " (run `corpus synth` first)");
  CorpusManifest m;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty() || line[0] == '#') continue;
    ManifestEntry e;
    size_t t1 = line.find('\t');
    size_t t2 = line.find('\t', t1 + 1);
    require(t1 != std::string::npos && t2 != std::string::npos, "malformed manifest line: " + line);
    e.relpath = line.substr(0, t1);
    e.speaker_id = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    std::istringstream ids(line.substr(t2 + 1));
    int v;
    while (ids >> v) e.transcript.push_back(v);
    m.entries.push_back(std::move(e));
  }
  require(!m.entries.empty(), "manifest.tsv is empty in " + dir);

  std::ifstream sf(fs::path(dir) / "segments.tsv");
  if (!sf) fail_missing("segments.tsv not found in " + dir + " (run `corpus synth` first)");
  size_t row = 0;
  while (std::getline(sf, line)) {
    if (line.empty() || line[0] == '#') continue;
    require(row < m.entries.size(), "segments.tsv has more rows than manifest.tsv");
    size_t t1 = line.find('\t');
    require(t1 != std::string::npos, "malformed segments line: " + line);
    require(line.substr(0, t1) == m.entries[row].relpath, "segments.tsv out of sync with manifest");
    std::istringstream bs(line.substr(t1 + 1));
    int64_t b;
    while (bs >> b) m.entries[row].segment_boundaries.push_back(b);
    ++row;
  }
  require(row == m.entries.size(), "segments.tsv has fewer rows than manifest.tsv");

  // reconstruct speaker counts and the per-speaker last-tenth eval split
  std::map<int, int> seen;
  int max_spk = 0;
  for (auto& e : m.entries) max_spk = std::max(max_spk, e.speaker_id);
  std::map<int, int> per_spk;
  for (auto& e : m.entries) per_spk[e.speaker_id]++;
  m.num_speakers = max_spk + 1;
  m.utts_per_speaker = per_spk.empty() ? 0 : per_spk.begin()->second;
  for (auto& e : m.entries) {
    int k = seen[e.speaker_id]++;
    int count = per_spk[e.speaker_id];
    e.is_eval = k >= (count * 9) / 10;
  }
  return m;
}

std::vector<ProbePair> make_probe_pairs(const GrammarSpec& grammar, int num_speakers,
                                        int n, uint64_t seed) {
  require(n >= 1, "make_probe_pairs requires n >= 1");
  if (grammar.count_forbidden_pairs() == 0) {
    fail_input("grammar has no forbidden bigram; probe pairs are undefined");
  }
  std::vector<ProbePair> out(static_cast<size_t>(n));
  std::vector<SpeakerSpec> speakers(static_cast<size_t>(num_speakers));
  for (int s = 0; s < num_speakers; ++s) speakers[static_cast<size_t>(s)] = default_speaker(seed, s, num_speakers);

  parallel_for(n, [&](int64_t i) {
    Rng rng(derive_seed(seed, "probe", static_cast<uint64_t>(i)));
    int spk = static_cast<int>(rng.next_below(static_cast<uint64_t>(num_speakers)));
    for (int attempt = 0;; ++attempt) {
      require(attempt < 64, "probe pair construction failed repeatedly");
      std::vector<int> pos = sample_transcript(grammar, rng);
      // try random single-symbol substitutions until one creates a violation
      bool found = false;
      std::vector<int> neg;
      for (int t = 0; t < 400 && !found; ++t) {
        int p = static_cast<int>(rng.next_below(pos.size()));
        int s = static_cast<int>(rng.next_below(static_cast<uint64_t>(grammar.num_symbols)));
        if (s == pos[static_cast<size_t>(p)]) continue;
        neg = pos;
        neg[static_cast<size_t>(p)] = s;
        if (grammar.has_forbidden_bigram(neg)) found = true;
      }
      if (!found) continue;
      uint64_t r_seed = derive_seed(seed, "probe_render", static_cast<uint64_t>(i));
      out[static_cast<size_t>(i)].positive =
          synth_utterance(grammar, speakers[static_cast<size_t>(spk)], r_seed, &pos);
      // Negatives are invalid by design, so render them against a copy of
      // the grammar whose forbidden entries are finite; same seed keeps the
      // pair identical outside the substituted segment.
      GrammarSpec open = grammar;
      for (auto& l : open.bigram_logits) {
        if (std::isinf(l)) l = -30.0;
      }
      out[static_cast<size_t>(i)].negative =
          synth_utterance(open, speakers[static_cast<size_t>(spk)], r_seed, &neg);
      break;
    }
  });
  return out;
}

namespace {

struct TrigramInstance {
  int source = 0;
  int64_t begin = 0;
  int64_t end = 0;
  int speaker = 0;
};

int64_t trigram_key(int a, int b, int c, int s) {
  return (static_cast<int64_t>(a) * s + b) * s + c;
}

}  // namespace

std::vector<AbxTriple> make_abx_triples(const std::vector<AbxSource>& sources, int n,
                                        bool within_speaker, uint64_t seed) {
  require(n >= 1, "make_abx_triples requires n >= 1");
  require(!sources.empty(), "make_abx_triples requires a non-empty corpus");
  int num_symbols = 0;
  for (const auto& s : sources) {
    for (int sym : *s.transcript) num_symbols = std::max(num_symbols, sym + 1);
  }

  // index all trigram instances by (trigram, speaker) and by (a, c, speaker)
  std::map<std::pair<int64_t, int>, std::vector<TrigramInstance>> by_tri_spk;
  std::map<int64_t, std::vector<TrigramInstance>> by_tri;
  int64_t total_instances = 0;
  for (int si = 0; si < static_cast<int>(sources.size()); ++si) {
    const auto& src = sources[static_cast<size_t>(si)];
    const auto& tr = *src.transcript;
    const auto& bd = *src.boundaries;
    require(bd.size() == tr.size() + 1, "abx source boundaries out of sync with transcript");
    for (size_t k = 0; k + 2 < tr.size(); ++k) {
      TrigramInstance inst;
      inst.source = si;
      inst.begin = bd[k];
      inst.end = bd[k + 3];
      inst.speaker = src.speaker_id;
      int64_t key = trigram_key(tr[k], tr[k + 1], tr[k + 2], num_symbols);
      by_tri_spk[{key, src.speaker_id}].push_back(inst);
      by_tri[key].push_back(inst);
      ++total_instances;
    }
  }

  // candidate A/X pools
  struct Candidate {
    int64_t key;
    int a, b, c;
    int speaker;  // speaker of the A instance pool (within mode)
  };
  std::vector<Candidate> candidates;
  if (within_speaker) {
    for (const auto& [ks, insts] : by_tri_spk) {
      if (insts.size() < 2) continue;
      int64_t key = ks.first;
      int c = static_cast<int>(key % num_symbols);
      int b = static_cast<int>((key / num_symbols) % num_symbols);
      int a = static_cast<int>(key / num_symbols / num_symbols);
      candidates.push_back({key, a, b, c, ks.second});
    }
  } else {
    for (const auto& [key, insts] : by_tri) {
      // need instances from at least two speakers
      int first_spk = insts.front().speaker;
      bool multi = false;
      for (const auto& inst : insts) {
        if (inst.speaker != first_spk) {
          multi = true;
          break;
        }
      }
      if (!multi) continue;
      int c = static_cast<int>(key % num_symbols);
      int b = static_cast<int>((key / num_symbols) % num_symbols);
      int a = static_cast<int>(key / num_symbols / num_symbols);
      candidates.push_back({key, a, b, c, -1});
    }
  }
  if (candidates.empty()) {
    fail_input("insufficient trigram instances for ABX (" + std::to_string(total_instances) +
               " instances, 0 eligible trigrams)");
  }

  Rng rng(derive_seed(seed, within_speaker ? "abx_within" : "abx_across"));
  std::vector<AbxTriple> out;
  out.reserve(static_cast<size_t>(n));
  int64_t attempts = 0;
  const int64_t max_attempts = static_cast<int64_t>(n) * 2000;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > max_attempts) {
      fail_input("insufficient trigram instances for ABX: made " +
                 std::to_string(out.size()) + " of " + std::to_string(n) + " triples from " +
                 std::to_string(total_instances) + " instances");
    }
    const Candidate& cand = candidates[rng.next_below(candidates.size())];

    // pick B trigram: same outer context, different center, instance available
    int b_center = static_cast<int>(rng.next_below(static_cast<uint64_t>(num_symbols)));
    if (b_center == cand.b) continue;
    int64_t b_key = trigram_key(cand.a, b_center, cand.c, num_symbols);

    if (within_speaker) {
      auto ax_it = by_tri_spk.find({cand.key, cand.speaker});
      auto b_it = by_tri_spk.find({b_key, cand.speaker});
      if (b_it == by_tri_spk.end()) continue;
      const auto& ax = ax_it->second;
      const auto& bs = b_it->second;
      uint64_t ia = rng.next_below(ax.size());
      uint64_t ix = rng.next_below(ax.size());
      if (ia == ix) continue;
      uint64_t ib = rng.next_below(bs.size());
      const auto& A = ax[ia];
      const auto& X = ax[ix];
      const auto& B = bs[ib];
      AbxTriple t;
      t.a = slice(*sources[static_cast<size_t>(A.source)].waveform, A.begin, A.end);
      t.b = slice(*sources[static_cast<size_t>(B.source)].waveform, B.begin, B.end);
      t.x = slice(*sources[static_cast<size_t>(X.source)].waveform, X.begin, X.end);
      out.push_back(std::move(t));
    } else {
      const auto& ax_all = by_tri.at(cand.key);
      uint64_t ia = rng.next_below(ax_all.size());
      const auto& A = ax_all[ia];
      // X: same trigram, different speaker
      std::vector<const TrigramInstance*> xs;
      for (const auto& inst : ax_all) {
        if (inst.speaker != A.speaker) xs.push_back(&inst);
      }
      if (xs.empty()) continue;
      // B: same speaker as A
      auto b_it = by_tri_spk.find({b_key, A.speaker});
      if (b_it == by_tri_spk.end()) continue;
      const auto& B = b_it->second[rng.next_below(b_it->second.size())];
      const auto& X = *xs[rng.next_below(xs.size())];
      AbxTriple t;
      t.a = slice(*sources[static_cast<size_t>(A.source)].waveform, A.begin, A.end);
      t.b = slice(*sources[static_cast<size_t>(B.source)].waveform, B.begin, B.end);
      t.x = slice(*sources[static_cast<size_t>(X.source)].waveform, X.begin, X.end);
      out.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace hieraudio::corpus
