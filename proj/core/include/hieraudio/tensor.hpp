#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hieraudio::nn {

// Dense row-major tensor of doubles. Training runs in double precision so
// gradient checks against central differences are meaningful.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel(shape)), 0.0);
  }

  static int64_t numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double* row(int64_t r) { return data.data() + r * shape.back(); }
  const double* row(int64_t r) const { return data.data() + r * shape.back(); }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

struct NamedParam {
  std::string name;
  Tensor t;
  bool decay = true;  // weight decay applies (off for biases, norms, relpos)
};

// Gradient buffer parallel to a parameter list.
using GradBuffer = std::vector<Tensor>;

GradBuffer make_grad_buffer(const std::vector<NamedParam>& params);
void accumulate(GradBuffer& dst, const GradBuffer& src);
void scale(GradBuffer& g, double s);

// C[m,n] += A[m,k] * B[k,n]
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
// dA[m,k] += dC[m,n] * B^T  (B is [k,n])
void matmul_grad_a(const double* dc, const double* b, double* da, int m, int k, int n);
// dB[k,n] += A^T * dC  (A is [m,k])
void matmul_grad_b(const double* a, const double* dc, double* db, int m, int k, int n);

}  // namespace hieraudio::nn
