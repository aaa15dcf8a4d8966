#include "hieraudio/stages.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"
#include "hieraudio/sampling.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::stages {

nn::LmSequence build_stage1(const sem::SemanticTokens& z, const VocabMap& vm) {
  sem::SemanticTokens d = sem::dedup(z);
  nn::LmSequence seq;
  seq.tokens.reserve(d.tokens.size() + 2);
  seq.tokens.push_back(vm.s1_bos());
  for (int t : d.tokens) {
    require(t >= 0 && t < vm.k, "semantic token out of range");
    seq.tokens.push_back(t);
  }
  seq.tokens.push_back(vm.s1_eos());
  seq.mask.assign(seq.tokens.size() - 1, 1);
  return seq;
}

nn::LmSequence build_stage2(const sem::SemanticTokens& z, const rvq::AcousticTokens& y,
                            const VocabMap& vm) {
  require(y.q >= vm.q_prime, "acoustic tokens carry fewer layers than Q'");
  sem::SemanticTokens d = sem::dedup(z);
  nn::LmSequence seq;
  const int64_t n_acoustic = y.t_a * vm.q_prime;
  seq.tokens.reserve(d.tokens.size() + 2 + static_cast<size_t>(n_acoustic));
  seq.tokens.push_back(vm.s2_bos());
  for (int t : d.tokens) {
    require(t >= 0 && t < vm.k, "semantic token out of range");
    seq.tokens.push_back(t);
  }
  seq.tokens.push_back(vm.s2_sep());
  const size_t sep_index = seq.tokens.size() - 1;
  for (int64_t t = 0; t < y.t_a; ++t) {
    for (int layer = 1; layer <= vm.q_prime; ++layer) {
      int tok = y.at(t, layer - 1);
      require(tok >= 0 && tok < vm.n, "acoustic token out of range");
      seq.tokens.push_back(vm.k + (layer - 1) * vm.n + tok);
    }
  }
  // loss only on the acoustic part: targets at indices > sep_index
  seq.mask.assign(seq.tokens.size() - 1, 0);
  for (size_t i = sep_index; i + 1 < seq.tokens.size(); ++i) seq.mask[i] = 1;
  return seq;
}

std::vector<nn::LmSequence> build_stage3(const rvq::AcousticTokens& y, const VocabMap& vm,
                                         int chunk_frames) {
  if (vm.q_prime >= vm.q) {
    fail_input("stage 3 is disabled when Q' == Q");
  }
  require(chunk_frames >= 1, "chunk_frames must be positive");
  require(y.q == vm.q, "stage 3 requires all Q layers");
  std::vector<nn::LmSequence> out;
  for (int64_t start = 0; start < y.t_a; start += chunk_frames) {
    int64_t end = std::min<int64_t>(y.t_a, start + chunk_frames);
    nn::LmSequence seq;
    const int64_t t_c = end - start;
    seq.tokens.reserve(static_cast<size_t>(t_c) * vm.q + 2);
    seq.tokens.push_back(vm.s3_bos());
    for (int64_t t = start; t < end; ++t) {
      for (int layer = 1; layer <= vm.q_prime; ++layer) {
        seq.tokens.push_back((layer - 1) * vm.n + y.at(t, layer - 1));
      }
    }
    seq.tokens.push_back(vm.s3_sep());
    const size_t sep_index = seq.tokens.size() - 1;
    for (int64_t t = start; t < end; ++t) {
      for (int layer = vm.q_prime + 1; layer <= vm.q; ++layer) {
        seq.tokens.push_back((layer - 1) * vm.n + y.at(t, layer - 1));
      }
    }
    seq.mask.assign(seq.tokens.size() - 1, 0);
    for (size_t i = sep_index; i + 1 < seq.tokens.size(); ++i) seq.mask[i] = 1;
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<int> generate_semantic(const StageBundle& bundle, const std::vector<int>& prompt,
                                   int max_new, uint64_t seed) {
  const VocabMap& vm = bundle.vocab;
  for (size_t i = 0; i + 1 < prompt.size(); ++i) {
    require(prompt[i] != prompt[i + 1], "semantic prompt must be deduped");
  }
  const int ctx = bundle.lm1.config().context_len;
  require(static_cast<int>(prompt.size()) + 1 <= ctx,
          "semantic prompt of " + std::to_string(prompt.size()) +
              " tokens exceeds stage-1 context " + std::to_string(ctx));

  Rng rng(derive_seed(seed, "semantic_gen"));
  nn::KvState st = bundle.lm1.make_kv_state();
  std::vector<double> logits = bundle.lm1.step(vm.s1_bos(), st);
  for (int t : prompt) logits = bundle.lm1.step(t, st);

  std::vector<int> out = prompt;
  int prev = out.empty() ? -1 : out.back();
  for (int produced = 0; produced < max_new && st.len < ctx; ++produced) {
    std::vector<double> masked = logits;
    masked[static_cast<size_t>(vm.s1_bos())] = -1e30;  // BOS is never emitted
    int tok = nn::sample_next(masked, bundle.temp1, rng);
    if (tok == prev) {
      tok = nn::sample_next(masked, bundle.temp1, rng);  // resample a repeat once
    }
    if (tok == vm.s1_eos()) break;
    out.push_back(tok);
    prev = tok;
    if (st.len >= ctx) break;
    logits = bundle.lm1.step(tok, st);
  }
  return out;
}

rvq::AcousticTokens generate_coarse(const StageBundle& bundle, const std::vector<int>& z_full,
                                    const rvq::AcousticTokens* prompt_coarse,
                                    int64_t target_frames, uint64_t seed) {
  const VocabMap& vm = bundle.vocab;
  const int qp = vm.q_prime;
  const int64_t prompt_frames = prompt_coarse != nullptr ? prompt_coarse->t_a : 0;
  require(target_frames >= prompt_frames, "target_frames smaller than the coarse prompt");

  // deduped semantic conditioning
  sem::SemanticTokens zz;
  zz.tokens = z_full;
  sem::SemanticTokens zd = sem::dedup(zz);

  const int ctx = bundle.lm2.config().context_len;
  const int64_t cond_len = 2 + static_cast<int64_t>(zd.tokens.size()) + prompt_frames * qp;
  const int64_t total_len = cond_len + (target_frames - prompt_frames) * qp;
  if (total_len > ctx) {
    fail_input("stage-2 sequence of " + std::to_string(total_len) +
               " tokens exceeds context " + std::to_string(ctx) +
               "; shorten the utterance or raise lm.stage2.context");
  }

  Rng rng(derive_seed(seed, "coarse_gen"));
  nn::KvState st = bundle.lm2.make_kv_state();
  std::vector<double> logits = bundle.lm2.step(vm.s2_bos(), st);
  for (int t : zd.tokens) logits = bundle.lm2.step(t, st);
  logits = bundle.lm2.step(vm.s2_sep(), st);
  if (prompt_coarse != nullptr) {
    require(prompt_coarse->q == qp, "coarse prompt must carry exactly Q' layers");
    for (int64_t t = 0; t < prompt_coarse->t_a; ++t) {
      for (int layer = 1; layer <= qp; ++layer) {
        logits = bundle.lm2.step(vm.k + (layer - 1) * vm.n + prompt_coarse->at(t, layer - 1), st);
      }
    }
  }

  rvq::AcousticTokens y;
  y.t_a = target_frames;
  y.q = qp;
  y.tokens.assign(static_cast<size_t>(target_frames) * qp, 0);
  for (int64_t t = 0; t < prompt_frames; ++t) {
    for (int layer = 0; layer < qp; ++layer) y.at(t, layer) = prompt_coarse->at(t, layer);
  }

  const int64_t new_tokens = (target_frames - prompt_frames) * qp;
  for (int64_t i = 0; i < new_tokens; ++i) {
    int64_t flat_pos = prompt_frames * qp + i;
    int layer = static_cast<int>(flat_pos % qp) + 1;  // within-frame position
    int lo = vm.k + (layer - 1) * vm.n;
    int hi = lo + vm.n;
    int tok = -1;
    for (int attempt = 0; attempt < 16; ++attempt) {
      int cand = nn::sample_next(logits, bundle.temp2, rng);
      if (cand >= lo && cand < hi) {
        tok = cand;
        break;
      }
    }
    if (tok < 0) tok = nn::argmax_in_range(logits, lo, hi);
    int64_t frame = flat_pos / qp;
    y.at(frame, layer - 1) = tok - lo;
    if (i + 1 < new_tokens) logits = bundle.lm2.step(tok, st);
  }
  return y;
}

rvq::AcousticTokens generate_fine(const StageBundle& bundle, const rvq::AcousticTokens& coarse,
                                  uint64_t seed) {
  const VocabMap& vm = bundle.vocab;
  if (!bundle.has_stage3()) {
    require(coarse.q == vm.q, "Q' == Q requires full-depth tokens");
    return coarse;  // identity pass-through
  }
  require(coarse.q == vm.q_prime, "generate_fine expects exactly Q' coarse layers");
  const int qp = vm.q_prime, q = vm.q;
  const int fine_layers = q - qp;
  const int chunk = bundle.chunk_frames();

  rvq::AcousticTokens full;
  full.t_a = coarse.t_a;
  full.q = q;
  full.tokens.assign(static_cast<size_t>(coarse.t_a) * q, 0);
  for (int64_t t = 0; t < coarse.t_a; ++t) {
    for (int layer = 0; layer < qp; ++layer) full.at(t, layer) = coarse.at(t, layer);
  }

  const int64_t n_chunks = (coarse.t_a + chunk - 1) / chunk;
  // chunks are independent by construction (per-chunk derived seeds)
  parallel_for(n_chunks, [&](int64_t ci) {
    int64_t start = ci * chunk;
    int64_t end = std::min<int64_t>(coarse.t_a, start + chunk);
    int64_t t_c = end - start;
    Rng rng(derive_seed(seed, "fine_chunk", static_cast<uint64_t>(ci)));

    nn::KvState st = bundle.lm3.make_kv_state();
    std::vector<double> logits = bundle.lm3.step(vm.s3_bos(), st);
    for (int64_t t = start; t < end; ++t) {
      for (int layer = 1; layer <= qp; ++layer) {
        logits = bundle.lm3.step((layer - 1) * vm.n + coarse.at(t, layer - 1), st);
      }
    }
    logits = bundle.lm3.step(vm.s3_sep(), st);

    const int64_t n_fine = t_c * fine_layers;
    for (int64_t i = 0; i < n_fine; ++i) {
      int layer = qp + 1 + static_cast<int>(i % fine_layers);
      int lo = (layer - 1) * vm.n;
      int hi = lo + vm.n;
      int tok = -1;
      for (int attempt = 0; attempt < 16; ++attempt) {
        int cand = nn::sample_next(logits, bundle.temp3, rng);
        if (cand >= lo && cand < hi) {
          tok = cand;
          break;
        }
      }
      if (tok < 0) tok = nn::argmax_in_range(logits, lo, hi);
      int64_t frame = start + i / fine_layers;
      full.at(frame, layer - 1) = tok - lo;
      if (i + 1 < n_fine) logits = bundle.lm3.step(tok, st);
    }
  });
  return full;
}

namespace {

// Longest semantic continuation that still fits the stage-2 context for
// target_frames of coarse tokens.
int semantic_budget(const StageBundle& bundle, int64_t target_frames, int64_t prompt_len) {
  int64_t budget = bundle.lm2.config().context_len - 2 -
                   target_frames * bundle.vocab.q_prime - prompt_len;
  int64_t s1_budget = bundle.lm1.config().context_len - 2 - prompt_len;
  int64_t b = std::min(budget, s1_budget);
  if (b < 0) {
    fail_input("prompt and target length exceed the stage contexts");
  }
  return static_cast<int>(b);
}

}  // namespace

Waveform continue_audio(const StageBundle& bundle, const Waveform& prompt,
                        double total_seconds, uint64_t seed) {
  require(prompt.size() >= kSampleRate, "continuation prompt must be at least 1 s");
  Waveform p = prompt;
  pad_to_multiple(p, kSemanticHop);
  const int64_t prompt_frames = p.size() / kAcousticHop;
  const int64_t total_frames = std::llround(total_seconds * 50.0);
  require(total_frames > prompt_frames,
          "total_seconds must exceed the prompt length (" +
              std::to_string(prompt_frames / 50.0) + " s)");

  std::vector<int> z_prompt = sem::dedup(sem::tokenize_semantic(bundle.tokenizer, p)).tokens;
  int max_new = semantic_budget(bundle, total_frames, static_cast<int64_t>(z_prompt.size()));
  std::vector<int> z_full =
      generate_semantic(bundle, z_prompt, max_new, derive_seed(seed, "stage1"));

  rvq::AcousticTokens y_prompt = encode_acoustic(bundle.codec, p);
  rvq::AcousticTokens prompt_coarse;
  prompt_coarse.t_a = y_prompt.t_a;
  prompt_coarse.q = bundle.vocab.q_prime;
  prompt_coarse.tokens.resize(static_cast<size_t>(y_prompt.t_a) * bundle.vocab.q_prime);
  for (int64_t t = 0; t < y_prompt.t_a; ++t) {
    for (int l = 0; l < bundle.vocab.q_prime; ++l) prompt_coarse.at(t, l) = y_prompt.at(t, l);
  }

  rvq::AcousticTokens y_coarse = generate_coarse(bundle, z_full, &prompt_coarse, total_frames,
                                                 derive_seed(seed, "stage2"));
  rvq::AcousticTokens y_full = bundle.has_stage3()
                                   ? generate_fine(bundle, y_coarse, derive_seed(seed, "stage3"))
                                   : y_coarse;
  // the prompt region reproduces the RVQ roundtrip bitwise
  for (int64_t t = 0; t < y_prompt.t_a; ++t) {
    for (int l = 0; l < bundle.vocab.q; ++l) y_full.at(t, l) = y_prompt.at(t, l);
  }
  return decode_acoustic(bundle.codec, y_full, bundle.vocab.q);
}

Waveform unconditional_generate(const StageBundle& bundle, double seconds, uint64_t seed) {
  require(seconds > 0.0, "seconds must be positive");
  const int64_t total_frames = std::llround(seconds * 50.0);
  int max_new = semantic_budget(bundle, total_frames, 0);
  std::vector<int> z =
      generate_semantic(bundle, {}, max_new, derive_seed(seed, "stage1"));
  rvq::AcousticTokens y_coarse =
      generate_coarse(bundle, z, nullptr, total_frames, derive_seed(seed, "stage2"));
  rvq::AcousticTokens y_full = bundle.has_stage3()
                                   ? generate_fine(bundle, y_coarse, derive_seed(seed, "stage3"))
                                   : y_coarse;
  return decode_acoustic(bundle.codec, y_full, bundle.vocab.q);
}

Waveform acoustic_generation(const StageBundle& bundle, const Waveform& w, uint64_t seed) {
  Waveform p = w;
  pad_to_multiple(p, kSemanticHop);
  const int64_t target_frames = p.size() / kAcousticHop;
  std::vector<int> z = sem::tokenize_semantic(bundle.tokenizer, p).tokens;
  // context guard: dedup happens inside generate_coarse
  rvq::AcousticTokens y_coarse =
      generate_coarse(bundle, z, nullptr, target_frames, derive_seed(seed, "stage2"));
  rvq::AcousticTokens y_full = bundle.has_stage3()
                                   ? generate_fine(bundle, y_coarse, derive_seed(seed, "stage3"))
                                   : y_coarse;
  return decode_acoustic(bundle.codec, y_full, bundle.vocab.q);
}

}  // namespace hieraudio::stages
