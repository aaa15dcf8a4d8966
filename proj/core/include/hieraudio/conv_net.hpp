#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hieraudio/dsp.hpp"
#include "hieraudio/rng.hpp"
#include "hieraudio/tensor.hpp"

namespace hieraudio::nn {

// Classifier over 1-second log-mel crops (98 x 64). Six blocks of
// (3x1 then 1x3) convolutions over (time x frequency) with ReLU, channel
// layer normalization and max pooling (stride 2, both axes) whenever the
// channel count increases. Global average pool feeds a linear head.
struct ConvConfig {
  std::vector<int> channels = {16, 32, 32, 64, 64, 64};
  int n_classes = 2;
  int in_h = 98;  // time frames
  int in_w = 64;  // mel bins
};

class ConvClassifier {
 public:
  ConvClassifier() = default;
  ConvClassifier(const ConvConfig& cfg, uint64_t init_seed);

  const ConvConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  // scalar input standardization, fit on training crops
  double input_mean = 0.0;
  double input_std = 1.0;

  // crop: in_h * in_w values (row-major time x freq). Returns class logits.
  std::vector<double> forward(std::span<const double> crop) const;

  // Cross-entropy of one (crop, label); accumulates parameter gradients.
  double loss_and_grad(std::span<const double> crop, int label, GradBuffer& grads) const;
  double loss_only(std::span<const double> crop, int label) const;

  int idx_block(int b, int slot) const { return b * 6 + slot; }
  int idx_head_w() const { return static_cast<int>(cfg_.channels.size()) * 6; }
  int idx_head_b() const { return idx_head_w() + 1; }

  bool pools_at(int block) const {
    int c_in = block == 0 ? 1 : cfg_.channels[static_cast<size_t>(block - 1)];
    return cfg_.channels[static_cast<size_t>(block)] > c_in;
  }

 private:
  ConvConfig cfg_;
  std::vector<NamedParam> params_;
};

// Max relative gradient error vs central differences over up to max_checks
// randomly chosen parameters.
double conv_grad_check(const ConvClassifier& model, std::span<const double> crop, int label,
                       int max_checks, double eps, uint64_t seed);

// Extracts the 1 s crop starting at frame `start` from a log-mel matrix.
std::vector<double> logmel_crop(const dsp::FrameMatrix& mel, int64_t start, int crop_h);

}  // namespace hieraudio::nn
