#include "hieraudio/kmeans.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"
#include "hieraudio/rng.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio {

double sqdist(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

int nearest_centroid(const double* point, const std::vector<double>& codebook, int k, int dim) {
  int best = 0;
  double best_d = sqdist(point, codebook.data(), dim);
  for (int c = 1; c < k; ++c) {
    double d = sqdist(point, codebook.data() + static_cast<size_t>(c) * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

KmeansResult fit_kmeans(const dsp::FrameMatrix& data, int k, int iters, uint64_t seed) {
  const int64_t n = data.rows;
  const int dim = data.cols;
  require(k >= 1, "fit_kmeans requires k >= 1");
  require(n >= k, "fit_kmeans: fewer points (" + std::to_string(n) + ") than clusters (" +
                      std::to_string(k) + ")");

  Rng rng(derive_seed(seed, "kmeans"));
  KmeansResult res;
  res.codebook.assign(static_cast<size_t>(k) * dim, 0.0);

  // k-means++ seeding
  std::vector<double> min_d(static_cast<size_t>(n), 0.0);
  {
    int64_t first = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
    std::copy_n(data.row(first), dim, res.codebook.begin());
    for (int64_t i = 0; i < n; ++i) min_d[static_cast<size_t>(i)] = sqdist(data.row(i), res.codebook.data(), dim);
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (int64_t i = 0; i < n; ++i) total += min_d[static_cast<size_t>(i)];
      int64_t pick = 0;
      if (total > 0.0) {
        double u = rng.next_double() * total;
        double acc = 0.0;
        pick = n - 1;
        for (int64_t i = 0; i < n; ++i) {
          acc += min_d[static_cast<size_t>(i)];
          if (u < acc) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
      }
      double* dst = res.codebook.data() + static_cast<size_t>(c) * dim;
      std::copy_n(data.row(pick), dim, dst);
      for (int64_t i = 0; i < n; ++i) {
        double d = sqdist(data.row(i), dst, dim);
        if (d < min_d[static_cast<size_t>(i)]) min_d[static_cast<size_t>(i)] = d;
      }
    }
  }

  std::vector<int> assign(static_cast<size_t>(n), -1);
  std::vector<int64_t> counts(static_cast<size_t>(k), 0);
  std::vector<double> sums(static_cast<size_t>(k) * dim, 0.0);

  for (int it = 0; it < iters; ++it) {
    // assignment step (parallel over rows; each row independent)
    std::vector<int> new_assign(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
      new_assign[static_cast<size_t>(i)] = nearest_centroid(data.row(i), res.codebook, k, dim);
    });
    bool changed = new_assign != assign;
    assign = std::move(new_assign);
    res.iterations_run = it + 1;

    // update step: serial accumulation in fixed row order
    std::fill(counts.begin(), counts.end(), 0);
    std::fill(sums.begin(), sums.end(), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      int c = assign[static_cast<size_t>(i)];
      counts[static_cast<size_t>(c)]++;
      const double* src = data.row(i);
      double* dst = sums.data() + static_cast<size_t>(c) * dim;
      for (int d = 0; d < dim; ++d) dst[d] += src[d];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;
      double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(c)]);
      double* dst = res.codebook.data() + static_cast<size_t>(c) * dim;
      const double* src = sums.data() + static_cast<size_t>(c) * dim;
      for (int d = 0; d < dim; ++d) dst[d] = src[d] * inv;
    }

    // reseed empty clusters to the point farthest from its own centroid
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] != 0) continue;
      int64_t far_i = 0;
      double far_d = -1.0;
      for (int64_t i = 0; i < n; ++i) {
        int a = assign[static_cast<size_t>(i)];
        double d = sqdist(data.row(i),
                          res.codebook.data() + static_cast<size_t>(a) * dim, dim);
        if (d > far_d) {
          far_d = d;
          far_i = i;
        }
      }
      std::copy_n(data.row(far_i), dim, res.codebook.begin() + static_cast<size_t>(c) * dim);
      assign[static_cast<size_t>(far_i)] = c;
      changed = true;
    }

    if (!changed && it > 0) break;
  }

  // final inertia under the final assignment
  res.inertia = 0.0;
  parallel_for(n, [&](int64_t i) {
    assign[static_cast<size_t>(i)] = nearest_centroid(data.row(i), res.codebook, k, dim);
  });
  for (int64_t i = 0; i < n; ++i) {
    res.inertia += sqdist(data.row(i),
                          res.codebook.data() + static_cast<size_t>(assign[static_cast<size_t>(i)]) * dim, dim);
  }
  return res;
}

}  // namespace hieraudio
