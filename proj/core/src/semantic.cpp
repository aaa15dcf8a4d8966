#include "hieraudio/semantic.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "hieraudio/common.hpp"
#include "hieraudio/kmeans.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::sem {

void fit_normalizer(const dsp::FrameMatrix& features, std::vector<double>& mean,
                    std::vector<double>& std, std::vector<int>& degenerate) {
  require(features.rows >= 2, "fit_normalizer requires at least 2 rows");
  const int dim = features.cols;
  mean.assign(static_cast<size_t>(dim), 0.0);
  std.assign(static_cast<size_t>(dim), 0.0);
  degenerate.clear();
  const double inv_n = 1.0 / static_cast<double>(features.rows);
  for (int64_t r = 0; r < features.rows; ++r) {
    const double* row = features.row(r);
    for (int c = 0; c < dim; ++c) mean[static_cast<size_t>(c)] += row[c];
  }
  for (int c = 0; c < dim; ++c) mean[static_cast<size_t>(c)] *= inv_n;
  for (int64_t r = 0; r < features.rows; ++r) {
    const double* row = features.row(r);
    for (int c = 0; c < dim; ++c) {
      double d = row[c] - mean[static_cast<size_t>(c)];
      std[static_cast<size_t>(c)] += d * d;
    }
  }
  for (int c = 0; c < dim; ++c) {
    double s = std::sqrt(std[static_cast<size_t>(c)] * inv_n);  // population std
    if (s < 1e-8) {
      degenerate.push_back(c);
      s = 1.0;
    }
    std[static_cast<size_t>(c)] = s;
  }
}

void standardize(const SemanticTokenizer& tok, dsp::FrameMatrix& features) {
  require(features.cols == static_cast<int>(tok.mean.size()), "standardize: dim mismatch");
  for (int64_t r = 0; r < features.rows; ++r) {
    double* row = features.row(r);
    for (int c = 0; c < features.cols; ++c) {
      row[c] = (row[c] - tok.mean[static_cast<size_t>(c)]) / tok.std[static_cast<size_t>(c)];
    }
  }
}

SemanticTokenizer fit_semantic_tokenizer(const dsp::FrameMatrix& features, int k, int iters,
                                         uint64_t seed) {
  require(k >= 2, "semantic tokenizer requires K >= 2");
  SemanticTokenizer tok;
  tok.k = k;
  fit_normalizer(features, tok.mean, tok.std, tok.degenerate);
  dsp::FrameMatrix standardized = features;
  standardize(tok, standardized);
  KmeansResult km = fit_kmeans(standardized, k, iters, seed);
  tok.codebook = std::move(km.codebook);
  return tok;
}

SemanticTokens tokenize_semantic(const SemanticTokenizer& tok, const Waveform& w) {
  dsp::FrameMatrix feats = dsp::semantic_features(w);
  standardize(tok, feats);
  SemanticTokens z;
  z.tokens.resize(static_cast<size_t>(feats.rows));
  parallel_for(feats.rows, [&](int64_t r) {
    z.tokens[static_cast<size_t>(r)] =
        nearest_centroid(feats.row(r), tok.codebook, tok.k, feats.cols);
  });
  return z;
}

SemanticTokens dedup(const SemanticTokens& z) {
  SemanticTokens out;
  out.tokens.reserve(z.tokens.size());
  for (int t : z.tokens) {
    if (out.tokens.empty() || out.tokens.back() != t) out.tokens.push_back(t);
  }
  return out;
}

void fit_reconstruction_table(SemanticTokenizer& tok, const std::vector<const Waveform*>& train) {
  tok.recon_table.assign(static_cast<size_t>(tok.k) * kSemanticHop, 0.0);
  tok.recon_seen.assign(static_cast<size_t>(tok.k), 0);
  std::vector<int64_t> counts(static_cast<size_t>(tok.k), 0);
  for (const Waveform* w : train) {
    SemanticTokens z = tokenize_semantic(tok, *w);
    for (size_t t = 0; t < z.tokens.size(); ++t) {
      int token = z.tokens[t];
      const double* src = w->samples.data() + static_cast<int64_t>(t) * kSemanticHop;
      double* dst = tok.recon_table.data() + static_cast<size_t>(token) * kSemanticHop;
      for (int i = 0; i < kSemanticHop; ++i) dst[i] += src[i];
      counts[static_cast<size_t>(token)]++;
    }
  }
  for (int t = 0; t < tok.k; ++t) {
    if (counts[static_cast<size_t>(t)] == 0) continue;
    tok.recon_seen[static_cast<size_t>(t)] = 1;
    double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(t)]);
    double* dst = tok.recon_table.data() + static_cast<size_t>(t) * kSemanticHop;
    for (int i = 0; i < kSemanticHop; ++i) dst[i] *= inv;
  }
}

Waveform semantic_reconstruct(const SemanticTokenizer& tok, const SemanticTokens& z,
                              int64_t* unseen_flagged) {
  require(!tok.recon_table.empty(),
          "semantic tokenizer has no reconstruction table (refit with training audio)");
  Waveform out;
  out.samples.assign(z.tokens.size() * static_cast<size_t>(kSemanticHop), 0.0);
  int64_t unseen = 0;
  for (size_t t = 0; t < z.tokens.size(); ++t) {
    int token = z.tokens[t];
    require(token >= 0 && token < tok.k, "semantic token out of range");
    if (!tok.recon_seen[static_cast<size_t>(token)]) {
      ++unseen;  // leave the silence frame
      continue;
    }
    const double* src = tok.recon_table.data() + static_cast<size_t>(token) * kSemanticHop;
    double* dst = out.samples.data() + static_cast<int64_t>(t) * kSemanticHop;
    for (int i = 0; i < kSemanticHop; ++i) dst[i] = src[i];
  }
  if (unseen_flagged != nullptr) *unseen_flagged = unseen;
  return out;
}

void write_semantic_tokens(const std::string& path, int k,
                           const std::vector<SemanticTokens>& lines,
                           const std::string& config_hash) {
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), "cannot write token file: " + path);
  f << "#semantic K=" << k << " rate=25\n";
  if (!config_hash.empty()) f << "#cfg " << config_hash << "\n";
  for (const auto& z : lines) {
    for (size_t i = 0; i < z.tokens.size(); ++i) {
      if (i) f << ' ';
      f << z.tokens[i];
    }
    f << '\n';
  }
}

std::vector<SemanticTokens> read_semantic_tokens(const std::string& path, int* k_out) {
  std::ifstream f(path);
  if (!f) fail_missing("semantic token file not found: " + path + " (run `train semantic` first)");
  std::string line;
  require(static_cast<bool>(std::getline(f, line)), "empty token file: " + path);
  int k = 0;
  if (std::sscanf(line.c_str(), "#semantic K=%d rate=25", &k) != 1) {
    fail_input("bad semantic token header: " + line);
  }
  if (k_out != nullptr) *k_out = k;
  std::vector<SemanticTokens> out;
  while (std::getline(f, line)) {
    if (!line.empty() && line[0] == '#') continue;
    SemanticTokens z;
    std::istringstream ss(line);
    int v;
    while (ss >> v) {
      require(v >= 0 && v < k, "semantic token out of range in " + path);
      z.tokens.push_back(v);
    }
    out.push_back(std::move(z));
  }
  return out;
}

}  // namespace hieraudio::sem
