#include "hieraudio/rvq.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "hieraudio/common.hpp"
#include "hieraudio/kmeans.hpp"
#include "hieraudio/rng.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::rvq {

RvqCodec fit_rvq(const dsp::FrameMatrix& dct_frames, int q, int n, int q_prime, int iters,
                 uint64_t seed) {
  require(q >= 1 && n >= 1, "fit_rvq requires Q >= 1 and N >= 1");
  require(q_prime >= 1 && q_prime <= q, "fit_rvq requires 1 <= Q' <= Q");
  require(dct_frames.rows >= n, "fit_rvq: fewer frames (" + std::to_string(dct_frames.rows) +
                                    ") than codebook size (" + std::to_string(n) + ")");
  require(dct_frames.cols == dsp::kFrameLen, "fit_rvq expects 320-dim DCT frames");

  RvqCodec codec;
  codec.q = q;
  codec.n = n;
  codec.q_prime = q_prime;
  codec.codebooks.assign(static_cast<size_t>(q) * n * dsp::kFrameLen, 0.0);

  dsp::FrameMatrix residual = dct_frames;
  for (int layer = 0; layer < q; ++layer) {
    KmeansResult km = fit_kmeans(residual, n, iters, derive_seed(seed, "rvq_layer",
                                                                 static_cast<uint64_t>(layer)));
    std::copy(km.codebook.begin(), km.codebook.end(),
              codec.codebooks.begin() + static_cast<size_t>(layer) * n * dsp::kFrameLen);
    // subtract assigned centroids to form the next layer's residuals
    parallel_for(residual.rows, [&](int64_t r) {
      double* row = residual.row(r);
      int code = nearest_centroid(row, km.codebook, n, dsp::kFrameLen);
      const double* c = km.codebook.data() + static_cast<size_t>(code) * dsp::kFrameLen;
      for (int i = 0; i < dsp::kFrameLen; ++i) row[i] -= c[i];
    });
  }
  return codec;
}

AcousticTokens encode_acoustic(const RvqCodec& codec, const Waveform& w) {
  dsp::FrameMatrix frames = dsp::dct_rows(dsp::frame(w));
  AcousticTokens y;
  y.t_a = frames.rows;
  y.q = codec.q;
  y.tokens.resize(static_cast<size_t>(frames.rows) * codec.q);
  parallel_for(frames.rows, [&](int64_t t) {
    std::vector<double> res(frames.row(t), frames.row(t) + dsp::kFrameLen);
    for (int layer = 0; layer < codec.q; ++layer) {
      const double* book = codec.codebooks.data() +
                           static_cast<size_t>(layer) * codec.n * dsp::kFrameLen;
      int best = 0;
      double best_d = 1e300;
      for (int c = 0; c < codec.n; ++c) {
        double d = sqdist(res.data(), book + static_cast<size_t>(c) * dsp::kFrameLen,
                          dsp::kFrameLen);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      y.at(t, layer) = best;
      const double* c = book + static_cast<size_t>(best) * dsp::kFrameLen;
      for (int i = 0; i < dsp::kFrameLen; ++i) res[static_cast<size_t>(i)] -= c[i];
    }
  });
  return y;
}

Waveform decode_acoustic(const RvqCodec& codec, const AcousticTokens& y, int layers_used) {
  require(layers_used >= 1 && layers_used <= codec.q,
          "decode_acoustic: layers_used " + std::to_string(layers_used) + " exceeds Q " +
              std::to_string(codec.q));
  require(y.q == codec.q, "token matrix layer count does not match codec");
  dsp::FrameMatrix coeffs;
  coeffs.rows = y.t_a;
  coeffs.cols = dsp::kFrameLen;
  coeffs.frame_rate_hz = 50.0;
  coeffs.values.assign(static_cast<size_t>(y.t_a) * dsp::kFrameLen, 0.0);
  parallel_for(y.t_a, [&](int64_t t) {
    double* dst = coeffs.row(t);
    for (int layer = 0; layer < layers_used; ++layer) {
      int code = y.at(t, layer);
      const double* c = codec.centroid(layer, code);
      for (int i = 0; i < dsp::kFrameLen; ++i) dst[i] += c[i];
    }
  });
  return unframe(dsp::idct_rows(coeffs));
}

FlatTokens flatten(const AcousticTokens& y, int n, int layer_lo, int layer_hi) {
  require(layer_lo >= 1 && layer_lo <= layer_hi && layer_hi <= y.q,
          "flatten: invalid layer range");
  FlatTokens flat;
  flat.layer_lo = layer_lo;
  flat.layer_hi = layer_hi;
  flat.n = n;
  flat.tokens.reserve(static_cast<size_t>(y.t_a) * (layer_hi - layer_lo + 1));
  for (int64_t t = 0; t < y.t_a; ++t) {
    for (int layer = layer_lo; layer <= layer_hi; ++layer) {
      int tok = y.at(t, layer - 1);
      require(tok >= 0 && tok < n, "flatten: token out of range");
      flat.tokens.push_back((layer - 1) * n + tok);
    }
  }
  return flat;
}

AcousticTokens unflatten(const FlatTokens& flat, int64_t t_a) {
  const int layers = flat.layers_used();
  require(layers >= 1, "unflatten: empty layer range");
  require(static_cast<int64_t>(flat.tokens.size()) == t_a * layers,
          "unflatten: flat length " + std::to_string(flat.tokens.size()) +
              " is not T_A * layers = " + std::to_string(t_a * layers));
  AcousticTokens y;
  y.t_a = t_a;
  y.q = layers;
  y.tokens.resize(flat.tokens.size());
  for (int64_t i = 0; i < static_cast<int64_t>(flat.tokens.size()); ++i) {
    int layer = flat.layer_lo + static_cast<int>(i % layers);  // 1-based
    int offset = (layer - 1) * flat.n;
    int tok = flat.tokens[static_cast<size_t>(i)] - offset;
    if (tok < 0 || tok >= flat.n) {
      fail_input("unflatten: token " + std::to_string(flat.tokens[static_cast<size_t>(i)]) +
                 " at flat position " + std::to_string(i) + " is outside [" +
                 std::to_string(offset) + ", " + std::to_string(offset + flat.n) + ")");
    }
    y.tokens[static_cast<size_t>(i)] = tok;
  }
  return y;
}

double segmental_snr(const Waveform& ref, const Waveform& est) {
  require(ref.size() == est.size(), "segmental_snr: length mismatch (" +
                                        std::to_string(ref.size()) + " vs " +
                                        std::to_string(est.size()) + ")");
  const int seg = dsp::kFrameLen;  // 20 ms
  int64_t n_segs = ref.size() / seg;
  double total = 0.0;
  int64_t used = 0;
  for (int64_t s = 0; s < n_segs; ++s) {
    double e_ref = 0.0, e_err = 0.0;
    const double* r = ref.samples.data() + s * seg;
    const double* e = est.samples.data() + s * seg;
    for (int i = 0; i < seg; ++i) {
      e_ref += r[i] * r[i];
      double d = r[i] - e[i];
      e_err += d * d;
    }
    if (e_ref <= 1e-10) continue;  // silent reference segment
    double snr;
    if (e_err <= 0.0) {
      snr = 35.0;
    } else {
      snr = 10.0 * std::log10(e_ref / e_err);
      snr = std::clamp(snr, -10.0, 35.0);
    }
    total += snr;
    ++used;
  }
  if (used == 0) return 0.0;
  return total / static_cast<double>(used);
}

void write_acoustic_tokens(const std::string& path, const RvqCodec& codec,
                           const std::vector<AcousticTokens>& lines,
                           const std::string& config_hash) {
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), "cannot write token file: " + path);
  f << "#acoustic N=" << codec.n << " Q=" << codec.q << " Qp=" << codec.q_prime << " rate=50\n";
  if (!config_hash.empty()) f << "#cfg " << config_hash << "\n";
  for (const auto& y : lines) {
    FlatTokens flat = flatten(y, codec.n, 1, codec.q);
    for (size_t i = 0; i < flat.tokens.size(); ++i) {
      if (i) f << ' ';
      f << flat.tokens[i];
    }
    f << '\n';
  }
}

std::vector<AcousticTokens> read_acoustic_tokens(const std::string& path, int* n_out, int* q_out,
                                                 int* qp_out) {
  std::ifstream f(path);
  if (!f) fail_missing("acoustic token file not found: " + path + " (run `train codec` first)");
  std::string line;
  require(static_cast<bool>(std::getline(f, line)), "empty token file: " + path);
  int n = 0, q = 0, qp = 0;
  if (std::sscanf(line.c_str(), "#acoustic N=%d Q=%d Qp=%d rate=50", &n, &q, &qp) != 3) {
    fail_input("bad acoustic token header: " + line);
  }
  if (n_out != nullptr) *n_out = n;
  if (q_out != nullptr) *q_out = q;
  if (qp_out != nullptr) *qp_out = qp;
  std::vector<AcousticTokens> out;
  while (std::getline(f, line)) {
    if (!line.empty() && line[0] == '#') continue;
    FlatTokens flat;
    flat.layer_lo = 1;
    flat.layer_hi = q;
    flat.n = n;
    std::istringstream ss(line);
    int v;
    while (ss >> v) flat.tokens.push_back(v);
    require(flat.tokens.size() % static_cast<size_t>(q) == 0,
            "acoustic token line length not divisible by Q in " + path);
    out.push_back(unflatten(flat, static_cast<int64_t>(flat.tokens.size()) / q));
  }
  return out;
}

}  // namespace hieraudio::rvq
