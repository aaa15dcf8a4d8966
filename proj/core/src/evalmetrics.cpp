#include "hieraudio/evalmetrics.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"
#include "hieraudio/kmeans.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::eval {

dsp::FrameMatrix representation(ReprKind kind, const sem::SemanticTokenizer& tok,
                                const rvq::RvqCodec& codec, const Waveform& w) {
  Waveform p = w;
  if (kind == ReprKind::semantic) {
    require(tok.k >= 2 && !tok.codebook.empty(), "semantic tokenizer is untrained");
    pad_to_multiple(p, kSemanticHop);
    dsp::FrameMatrix feats = dsp::semantic_features(p);
    standardize(tok, feats);
    dsp::FrameMatrix out;
    out.rows = feats.rows;
    out.cols = feats.cols;
    out.frame_rate_hz = 25.0;
    out.values.resize(feats.values.size());
    for (int64_t r = 0; r < feats.rows; ++r) {
      int c = nearest_centroid(feats.row(r), tok.codebook, tok.k, feats.cols);
      std::copy_n(tok.codebook.data() + static_cast<size_t>(c) * feats.cols, feats.cols,
                  out.row(r));
    }
    return out;
  }
  require(!codec.codebooks.empty(), "acoustic codec is untrained");
  pad_to_multiple(p, kAcousticHop);
  rvq::AcousticTokens y = encode_acoustic(codec, p);
  dsp::FrameMatrix out;
  out.rows = y.t_a;
  out.cols = dsp::kFrameLen;
  out.frame_rate_hz = 50.0;
  out.values.assign(static_cast<size_t>(y.t_a) * dsp::kFrameLen, 0.0);
  for (int64_t t = 0; t < y.t_a; ++t) {
    double* dst = out.row(t);
    for (int layer = 0; layer < codec.q; ++layer) {
      const double* c = codec.centroid(layer, y.at(t, layer));
      for (int i = 0; i < dsp::kFrameLen; ++i) dst[i] += c[i];
    }
  }
  return out;
}

namespace {

double cosine_distance(const double* a, const double* b, int dim) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < dim; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 && nb < 1e-24) return 0.0;
  if (na < 1e-24 || nb < 1e-24) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

double dtw_distance(const dsp::FrameMatrix& a, const dsp::FrameMatrix& b) {
  require(a.rows > 0 && b.rows > 0, "dtw_distance: empty representation");
  require(a.cols == b.cols, "dtw_distance: dimension mismatch");
  const int64_t n = a.rows, m = b.rows;
  std::vector<double> cost(static_cast<size_t>(n) * m);
  std::vector<int32_t> steps(static_cast<size_t>(n) * m);
  auto idx = [m](int64_t i, int64_t j) { return static_cast<size_t>(i * m + j); };
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      double d = cosine_distance(a.row(i), b.row(j), a.cols);
      if (i == 0 && j == 0) {
        cost[idx(i, j)] = d;
        steps[idx(i, j)] = 1;
      } else {
        double best = 1e300;
        int32_t best_steps = 0;
        // diagonal preferred on ties, then up, then left
        if (i > 0 && j > 0 && cost[idx(i - 1, j - 1)] < best) {
          best = cost[idx(i - 1, j - 1)];
          best_steps = steps[idx(i - 1, j - 1)];
        }
        if (i > 0 && cost[idx(i - 1, j)] < best) {
          best = cost[idx(i - 1, j)];
          best_steps = steps[idx(i - 1, j)];
        }
        if (j > 0 && cost[idx(i, j - 1)] < best) {
          best = cost[idx(i, j - 1)];
          best_steps = steps[idx(i, j - 1)];
        }
        cost[idx(i, j)] = best + d;
        steps[idx(i, j)] = best_steps + 1;
      }
    }
  }
  return cost[idx(n - 1, m - 1)] / static_cast<double>(steps[idx(n - 1, m - 1)]);
}

AbxResult abx_error_rate(const std::vector<corpus::AbxTriple>& triples, ReprKind kind,
                         const sem::SemanticTokenizer& tok, const rvq::RvqCodec& codec) {
  require(!triples.empty(), "abx_error_rate requires at least one triple");
  std::vector<double> err(triples.size(), 0.0);
  parallel_for(static_cast<int64_t>(triples.size()), [&](int64_t i) {
    const auto& t = triples[static_cast<size_t>(i)];
    dsp::FrameMatrix ra = representation(kind, tok, codec, t.a);
    dsp::FrameMatrix rb = representation(kind, tok, codec, t.b);
    dsp::FrameMatrix rx = representation(kind, tok, codec, t.x);
    double dxa = dtw_distance(rx, ra);
    double dxb = dtw_distance(rx, rb);
    err[static_cast<size_t>(i)] = dxb < dxa ? 1.0 : (dxb == dxa ? 0.5 : 0.0);
  });
  double total = 0.0;
  for (double e : err) total += e;
  AbxResult res;
  res.n_triples = static_cast<int>(triples.size());
  res.error_percent = 100.0 * total / static_cast<double>(triples.size());
  return res;
}

double normalized_loglik(const nn::TransformerLM& lm, const std::vector<int>& tokens,
                         const std::vector<uint8_t>& mask) {
  require(tokens.size() >= 2, "normalized_loglik: empty sequence");
  int64_t count = 0;
  double ce = lm.loss_sum(tokens, mask, &count);
  return -ce / static_cast<double>(count);
}

ProbeResult probe_accuracy(const nn::TransformerLM& lm1, const stages::VocabMap& vm,
                           const sem::SemanticTokenizer& tok,
                           const std::vector<corpus::ProbePair>& pairs) {
  ProbeResult res;
  res.n_pairs = static_cast<int>(pairs.size());
  if (pairs.empty()) return res;
  std::vector<double> score(pairs.size(), 0.0);
  parallel_for(static_cast<int64_t>(pairs.size()), [&](int64_t i) {
    const auto& pr = pairs[static_cast<size_t>(i)];
    nn::LmSequence pos =
        stages::build_stage1(sem::tokenize_semantic(tok, pr.positive.waveform), vm);
    nn::LmSequence neg =
        stages::build_stage1(sem::tokenize_semantic(tok, pr.negative.waveform), vm);
    double lp = normalized_loglik(lm1, pos.tokens, pos.mask);
    double ln = normalized_loglik(lm1, neg.tokens, neg.mask);
    score[static_cast<size_t>(i)] = lp > ln ? 1.0 : (lp == ln ? 0.5 : 0.0);
  });
  double total = 0.0;
  for (double s : score) total += s;
  res.accuracy_percent = 100.0 * total / static_cast<double>(pairs.size());
  return res;
}

TokenSymbolMap learn_token_symbol_map(const sem::SemanticTokenizer& tok,
                                      const std::vector<AlignedUtterance>& train) {
  require(!train.empty(), "learn_token_symbol_map: empty training set");
  const int n_symbols = [&] {
    int s = 0;
    for (const auto& u : train) {
      for (int sym : *u.transcript) s = std::max(s, sym + 1);
    }
    return s;
  }();
  // votes[token][symbol]; the extra slot counts silence votes
  std::vector<int64_t> votes(static_cast<size_t>(tok.k) * (n_symbols + 1), 0);
  std::vector<std::vector<int>> token_lines(train.size());
  parallel_for(static_cast<int64_t>(train.size()), [&](int64_t i) {
    token_lines[static_cast<size_t>(i)] =
        sem::tokenize_semantic(tok, *train[static_cast<size_t>(i)].waveform).tokens;
  });
  for (size_t u = 0; u < train.size(); ++u) {
    const auto& bd = *train[u].boundaries;
    const auto& tr = *train[u].transcript;
    const auto& z = token_lines[u];
    size_t seg = 0;
    for (size_t t = 0; t < z.size(); ++t) {
      int64_t center = static_cast<int64_t>(t) * kSemanticHop + kSemanticHop / 2;
      int symbol = kSilenceSymbol;
      if (center < bd.back()) {
        while (seg + 1 < bd.size() && bd[seg + 1] <= center) ++seg;
        if (seg < tr.size()) symbol = tr[seg];
      }
      int slot = symbol == kSilenceSymbol ? n_symbols : symbol;
      votes[static_cast<size_t>(z[t]) * (n_symbols + 1) + static_cast<size_t>(slot)]++;
    }
  }
  TokenSymbolMap map;
  map.token_to_symbol.assign(static_cast<size_t>(tok.k), kSilenceSymbol);
  for (int t = 0; t < tok.k; ++t) {
    const int64_t* row = votes.data() + static_cast<size_t>(t) * (n_symbols + 1);
    int64_t best = 0;
    int best_sym = kSilenceSymbol;
    for (int s = 0; s <= n_symbols; ++s) {
      if (row[s] > best) {
        best = row[s];
        best_sym = s == n_symbols ? kSilenceSymbol : s;
      }
    }
    if (best == 0) {
      ++map.unseen_tokens;
      best_sym = kSilenceSymbol;
    }
    map.token_to_symbol[static_cast<size_t>(t)] = best_sym;
  }
  return map;
}

std::vector<int> decode_symbols(const TokenSymbolMap& map, const sem::SemanticTokenizer& tok,
                                const Waveform& w) {
  Waveform p = w;
  pad_to_multiple(p, kSemanticHop);
  sem::SemanticTokens z = sem::tokenize_semantic(tok, p);
  std::vector<int> out;
  int prev = -2;
  for (int t : z.tokens) {
    int sym = map.token_to_symbol[static_cast<size_t>(t)];
    if (sym != prev) {
      if (sym != kSilenceSymbol) out.push_back(sym);
      prev = sym;
    }
  }
  return out;
}

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double transcript_ser(const TokenSymbolMap& map, const sem::SemanticTokenizer& tok,
                      const Waveform& w, const std::vector<int>& reference) {
  require(!reference.empty(), "transcript_ser: empty reference");
  std::vector<int> hyp = decode_symbols(map, tok, w);
  return 100.0 * edit_distance(hyp, reference) / static_cast<double>(reference.size());
}

namespace {

std::vector<int64_t> window_starts(int64_t mel_rows, int crop_h) {
  std::vector<int64_t> starts;
  for (int64_t s = 0; s + crop_h <= mel_rows; s += 25) starts.push_back(s);  // 250 ms hop
  return starts;
}

}  // namespace

int windowed_predict(const nn::ConvClassifier& cls, const Waveform& w) {
  require(w.size() >= kSampleRate, "classifier input must be at least 1 s");
  dsp::FrameMatrix mel = dsp::logmel(w);
  const int crop_h = cls.config().in_h;
  std::vector<int64_t> starts = window_starts(mel.rows, crop_h);
  require(!starts.empty(), "no full 1 s window in input");
  std::vector<double> mean_logits(static_cast<size_t>(cls.config().n_classes), 0.0);
  for (int64_t s : starts) {
    std::vector<double> crop = nn::logmel_crop(mel, s, crop_h);
    std::vector<double> logits = cls.forward(crop);
    for (size_t j = 0; j < logits.size(); ++j) mean_logits[j] += logits[j];
  }
  int best = 0;
  for (size_t j = 1; j < mean_logits.size(); ++j) {
    if (mean_logits[j] > mean_logits[static_cast<size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

double windowed_accuracy(const nn::ConvClassifier& cls, const std::vector<Waveform>& utts,
                         const std::vector<int>& labels) {
  require(utts.size() == labels.size() && !utts.empty(), "windowed_accuracy: bad input");
  std::vector<uint8_t> correct(utts.size(), 0);
  parallel_for(static_cast<int64_t>(utts.size()), [&](int64_t i) {
    correct[static_cast<size_t>(i)] =
        windowed_predict(cls, utts[static_cast<size_t>(i)]) == labels[static_cast<size_t>(i)]
            ? 1
            : 0;
  });
  int64_t total = 0;
  for (uint8_t c : correct) total += c;
  return 100.0 * static_cast<double>(total) / static_cast<double>(utts.size());
}

std::vector<nn::ConvExample> make_crops(const std::vector<Waveform>& utts,
                                        const std::vector<int>& labels, int per_utt,
                                        uint64_t seed) {
  require(utts.size() == labels.size(), "make_crops: size mismatch");
  std::vector<std::vector<nn::ConvExample>> per(utts.size());
  parallel_for(static_cast<int64_t>(utts.size()), [&](int64_t i) {
    const Waveform& w = utts[static_cast<size_t>(i)];
    if (w.size() < kSampleRate) return;  // skip sub-1 s
    dsp::FrameMatrix mel = dsp::logmel(w);
    Rng rng(derive_seed(seed, "crop", static_cast<uint64_t>(i)));
    const int crop_h = 98;
    for (int c = 0; c < per_utt; ++c) {
      int64_t max_start = mel.rows - crop_h;
      int64_t start = max_start > 0 ? static_cast<int64_t>(rng.next_below(
                                          static_cast<uint64_t>(max_start + 1)))
                                    : 0;
      nn::ConvExample ex;
      ex.crop = nn::logmel_crop(mel, start, crop_h);
      ex.label = labels[static_cast<size_t>(i)];
      per[static_cast<size_t>(i)].push_back(std::move(ex));
    }
  });
  std::vector<nn::ConvExample> out;
  for (auto& v : per) {
    for (auto& ex : v) out.push_back(std::move(ex));
  }
  return out;
}

void fit_input_norm(nn::ConvClassifier& cls, const std::vector<nn::ConvExample>& crops) {
  require(!crops.empty(), "fit_input_norm: no crops");
  double mean = 0.0;
  int64_t n = 0;
  for (const auto& ex : crops) {
    for (double v : ex.crop) {
      mean += v;
      ++n;
    }
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& ex : crops) {
    for (double v : ex.crop) {
      double d = v - mean;
      var += d * d;
    }
  }
  var /= static_cast<double>(n);
  cls.input_mean = mean;
  cls.input_std = std::sqrt(var) > 1e-8 ? std::sqrt(var) : 1.0;
}

nn::ConvClassifier train_detector(const std::vector<Waveform>& originals,
                                  const std::vector<Waveform>& continuations,
                                  const nn::TrainConfig& cfg, const nn::ConvConfig& arch) {
  const double a = static_cast<double>(originals.size());
  const double b = static_cast<double>(continuations.size());
  require(a > 0 && b > 0, "train_detector: both classes must be non-empty");
  double frac = a / (a + b);
  if (frac > 0.6 || frac < 0.4) {
    fail_input("train_detector: class imbalance " + std::to_string(originals.size()) + "/" +
               std::to_string(continuations.size()) + " exceeds 60/40");
  }
  std::vector<Waveform> utts;
  std::vector<int> labels;
  for (const auto& w : originals) {
    utts.push_back(w);
    labels.push_back(0);
  }
  for (const auto& w : continuations) {
    utts.push_back(w);
    labels.push_back(1);
  }
  nn::ConvConfig c = arch;
  c.n_classes = 2;
  nn::ConvClassifier cls(c, cfg.seed);
  std::vector<nn::ConvExample> crops = make_crops(utts, labels, 4, derive_seed(cfg.seed, "det"));
  fit_input_norm(cls, crops);
  nn::train_conv(cls, crops, cfg);
  return cls;
}

}  // namespace hieraudio::eval
