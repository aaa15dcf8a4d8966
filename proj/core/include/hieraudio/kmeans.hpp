#pragma once

#include <cstdint>
#include <vector>

#include "hieraudio/dsp.hpp"

namespace hieraudio {

// Nearest row of `codebook` (k x dim) to `point` by squared Euclidean
// distance; ties broken toward the lowest index.
int nearest_centroid(const double* point, const std::vector<double>& codebook, int k, int dim);

// Squared Euclidean distance.
double sqdist(const double* a, const double* b, int dim);

struct KmeansResult {
  std::vector<double> codebook;  // k x dim row-major
  double inertia = 0.0;
  int iterations_run = 0;
};

// Lloyd's algorithm with k-means++ initialization. Runs until the
// assignment reaches a fixpoint or `iters` iterations. Empty clusters are
// reseeded to the point farthest from its current centroid. Inertia is
// non-increasing across iterations.
KmeansResult fit_kmeans(const dsp::FrameMatrix& data, int k, int iters, uint64_t seed);

}  // namespace hieraudio
