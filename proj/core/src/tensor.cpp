#include "hieraudio/tensor.hpp"

namespace hieraudio::nn {

GradBuffer make_grad_buffer(const std::vector<NamedParam>& params) {
  GradBuffer g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.t.shape);
  return g;
}

void accumulate(GradBuffer& dst, const GradBuffer& src) {
  for (size_t i = 0; i < dst.size(); ++i) {
    double* d = dst[i].data.data();
    const double* s = src[i].data.data();
    int64_t n = dst[i].size();
    for (int64_t j = 0; j < n; ++j) d[j] += s[j];
  }
}

void scale(GradBuffer& g, double s) {
  for (auto& t : g) {
    for (double& v : t.data) v *= s;
  }
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<int64_t>(i) * k;
    double* ci = c + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = ai[kk];
      if (av == 0.0) continue;
      const double* bk = b + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

void matmul_grad_a(const double* dc, const double* b, double* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* dci = dc + static_cast<int64_t>(i) * n;
    double* dai = da + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double* bk = b + static_cast<int64_t>(kk) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += dci[j] * bk[j];
      dai[kk] += acc;
    }
  }
}

void matmul_grad_b(const double* a, const double* dc, double* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<int64_t>(i) * k;
    const double* dci = dc + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = ai[kk];
      if (av == 0.0) continue;
      double* dbk = db + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) dbk[j] += av * dci[j];
    }
  }
}

}  // namespace hieraudio::nn
