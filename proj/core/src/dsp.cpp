#include "hieraudio/dsp.hpp"

#include <cmath>
#include <cstring>

#include "hieraudio/common.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::dsp {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Cached orthonormal DCT-II basis, kFrameLen x kFrameLen.
// basis[k][n] = s_k * cos(pi*(2n+1)*k / (2N)), s_0 = sqrt(1/N), s_k = sqrt(2/N).
const std::vector<double>& dct_basis() {
  static const std::vector<double> basis = [] {
    const int n = kFrameLen;
    std::vector<double> b(static_cast<size_t>(n) * n);
    for (int k = 0; k < n; ++k) {
      double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
      for (int i = 0; i < n; ++i) {
        b[static_cast<size_t>(k) * n + i] =
            scale * std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
      }
    }
    return b;
  }();
  return basis;
}

struct MelBank {
  // filters[m] = list of (bin, weight)
  std::vector<std::vector<std::pair<int, double>>> filters;
  std::vector<double> centers_hz;
};

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

const MelBank& mel_bank() {
  static const MelBank bank = [] {
    MelBank b;
    const int nbins = kLogmelFft / 2 + 1;
    const double f_lo = 0.0, f_hi = kSampleRate / 2.0;
    std::vector<double> edges(kLogmelBins + 2);
    double m_lo = hz_to_mel(f_lo), m_hi = hz_to_mel(f_hi);
    for (int i = 0; i < kLogmelBins + 2; ++i) {
      edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (kLogmelBins + 1));
    }
    b.filters.resize(kLogmelBins);
    b.centers_hz.resize(kLogmelBins);
    for (int m = 0; m < kLogmelBins; ++m) {
      double left = edges[m], center = edges[m + 1], right = edges[m + 2];
      b.centers_hz[m] = center;
      for (int k = 0; k < nbins; ++k) {
        double f = static_cast<double>(k) * kSampleRate / kLogmelFft;
        double w = 0.0;
        if (f > left && f < center) {
          w = (f - left) / (center - left);
        } else if (f >= center && f < right) {
          w = (right - f) / (right - center);
        }
        if (w > 0.0) b.filters[m].emplace_back(k, w);
      }
    }
    return b;
  }();
  return bank;
}

const std::vector<double>& hann_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(kLogmelWin);
    for (int i = 0; i < kLogmelWin; ++i) {
      w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / (kLogmelWin - 1)));
    }
    return w;
  }();
  return win;
}

}  // namespace

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const size_t n = re.size();
  require(n == im.size() && n > 0 && (n & (n - 1)) == 0, "fft size must be a power of two");
  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * kPi / static_cast<double>(len);
    double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        size_t a = i + k, b = i + k + len / 2;
        double tr = re[b] * cr - im[b] * ci;
        double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

FrameMatrix frame(const Waveform& w) {
  require(w.size() % kFrameLen == 0,
          "frame: length " + std::to_string(w.size()) + " is not a multiple of 320");
  FrameMatrix m;
  m.rows = w.size() / kFrameLen;
  m.cols = kFrameLen;
  m.frame_rate_hz = 50.0;
  m.values = w.samples;
  return m;
}

Waveform unframe(const FrameMatrix& frames) {
  require(frames.cols == kFrameLen, "unframe expects 320-sample frames");
  Waveform w;
  w.samples = frames.values;
  return w;
}

std::vector<double> dct_forward(const std::vector<double>& fr) {
  require(static_cast<int>(fr.size()) == kFrameLen, "dct_forward expects length 320");
  const auto& basis = dct_basis();
  std::vector<double> out(kFrameLen, 0.0);
  for (int k = 0; k < kFrameLen; ++k) {
    const double* row = basis.data() + static_cast<size_t>(k) * kFrameLen;
    double acc = 0.0;
    for (int i = 0; i < kFrameLen; ++i) acc += row[i] * fr[i];
    out[k] = acc;
  }
  return out;
}

std::vector<double> dct_inverse(const std::vector<double>& coeffs) {
  require(static_cast<int>(coeffs.size()) == kFrameLen, "dct_inverse expects length 320");
  const auto& basis = dct_basis();
  std::vector<double> out(kFrameLen, 0.0);
  // transpose apply
  for (int k = 0; k < kFrameLen; ++k) {
    const double c = coeffs[k];
    if (c == 0.0) continue;
    const double* row = basis.data() + static_cast<size_t>(k) * kFrameLen;
    for (int i = 0; i < kFrameLen; ++i) out[i] += row[i] * c;
  }
  return out;
}

FrameMatrix dct_rows(const FrameMatrix& frames) {
  require(frames.cols == kFrameLen, "dct_rows expects 320 columns");
  FrameMatrix out = frames;
  const auto& basis = dct_basis();
  parallel_for(frames.rows, [&](int64_t r) {
    const double* src = frames.row(r);
    double* dst = out.row(r);
    for (int k = 0; k < kFrameLen; ++k) {
      const double* row = basis.data() + static_cast<size_t>(k) * kFrameLen;
      double acc = 0.0;
      for (int i = 0; i < kFrameLen; ++i) acc += row[i] * src[i];
      dst[k] = acc;
    }
  });
  return out;
}

FrameMatrix idct_rows(const FrameMatrix& coeffs) {
  require(coeffs.cols == kFrameLen, "idct_rows expects 320 columns");
  FrameMatrix out = coeffs;
  const auto& basis = dct_basis();
  parallel_for(coeffs.rows, [&](int64_t r) {
    const double* src = coeffs.row(r);
    double* dst = out.row(r);
    for (int i = 0; i < kFrameLen; ++i) dst[i] = 0.0;
    for (int k = 0; k < kFrameLen; ++k) {
      const double c = src[k];
      const double* row = basis.data() + static_cast<size_t>(k) * kFrameLen;
      for (int i = 0; i < kFrameLen; ++i) dst[i] += row[i] * c;
    }
  });
  return out;
}

std::vector<double> mel_filter_centers_hz() { return mel_bank().centers_hz; }

FrameMatrix logmel(const Waveform& w) {
  require(w.size() >= kLogmelWin,
          "logmel: input shorter than one 25 ms window (" + std::to_string(w.size()) + " samples)");
  const int64_t n_frames = (w.size() - kLogmelWin) / kLogmelHop + 1;
  FrameMatrix out;
  out.rows = n_frames;
  out.cols = kLogmelBins;
  out.frame_rate_hz = 100.0;
  out.values.assign(static_cast<size_t>(n_frames) * kLogmelBins, 0.0);
  const auto& win = hann_window();
  const auto& bank = mel_bank();
  const int nbins = kLogmelFft / 2 + 1;

  parallel_for(n_frames, [&](int64_t f) {
    std::vector<double> re(kLogmelFft, 0.0), im(kLogmelFft, 0.0);
    const double* src = w.samples.data() + f * kLogmelHop;
    for (int i = 0; i < kLogmelWin; ++i) re[i] = src[i] * win[i];
    fft_radix2(re, im);
    std::vector<double> mag(nbins);
    for (int k = 0; k < nbins; ++k) mag[k] = std::sqrt(re[k] * re[k] + im[k] * im[k]);
    double* dst = out.row(f);
    for (int m = 0; m < kLogmelBins; ++m) {
      double acc = 0.0;
      for (const auto& [bin, wt] : bank.filters[m]) acc += wt * mag[bin];
      dst[m] = std::log(acc > kLogFloor ? acc : kLogFloor);
    }
  });
  return out;
}

FrameMatrix semantic_features(const Waveform& w) {
  require(w.size() % kSemanticHop == 0,
          "semantic_features: length " + std::to_string(w.size()) + " is not a multiple of 640");
  FrameMatrix mel = logmel(w);
  const int64_t t_s = w.size() / kSemanticHop;
  // mean-pool groups of 4 log-mel frames; the last group may be shorter
  FrameMatrix pooled;
  pooled.rows = t_s;
  pooled.cols = kLogmelBins;
  pooled.frame_rate_hz = 25.0;
  pooled.values.assign(static_cast<size_t>(t_s) * kLogmelBins, 0.0);
  for (int64_t g = 0; g < t_s; ++g) {
    int64_t lo = g * 4;
    int64_t hi = std::min<int64_t>(mel.rows, lo + 4);
    double inv = 1.0 / static_cast<double>(hi - lo);
    double* dst = pooled.row(g);
    for (int64_t r = lo; r < hi; ++r) {
      const double* src = mel.row(r);
      for (int c = 0; c < kLogmelBins; ++c) dst[c] += src[c];
    }
    for (int c = 0; c < kLogmelBins; ++c) dst[c] *= inv;
  }
  // concat central-difference deltas, edge-replicated
  FrameMatrix out;
  out.rows = t_s;
  out.cols = kSemanticDim;
  out.frame_rate_hz = 25.0;
  out.values.assign(static_cast<size_t>(t_s) * kSemanticDim, 0.0);
  for (int64_t t = 0; t < t_s; ++t) {
    const double* cur = pooled.row(t);
    const double* prev = pooled.row(t > 0 ? t - 1 : 0);
    const double* next = pooled.row(t + 1 < t_s ? t + 1 : t_s - 1);
    double* dst = out.row(t);
    for (int c = 0; c < kLogmelBins; ++c) {
      dst[c] = cur[c];
      dst[kLogmelBins + c] = 0.5 * (next[c] - prev[c]);
    }
  }
  return out;
}

}  // namespace hieraudio::dsp
