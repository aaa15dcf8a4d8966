#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "hieraudio/conv_net.hpp"
#include "hieraudio/tensor.hpp"
#include "hieraudio/transformer.hpp"

namespace hieraudio::nn {

struct TrainConfig {
  double lr = 1e-3;
  int steps = 1000;
  int batch = 8;
  int warmup = 100;
  double clip = 1.0;
  uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int log_every = 50;
};

struct TrainResult {
  std::vector<std::pair<int, double>> loss_curve;  // (step, loss)
  double final_loss = 0.0;
};

// AdamW with linear warmup then inverse-sqrt decay and global-norm clipping.
// Weight decay applies only to params with decay == true.
class AdamW {
 public:
  AdamW(const std::vector<NamedParam>& params, const TrainConfig& cfg);
  // applies one update; step_idx is 1-based. Throws on non-finite params.
  void step(std::vector<NamedParam>& params, GradBuffer& grads, int step_idx);
  double last_lr() const { return last_lr_; }

 private:
  TrainConfig cfg_;
  GradBuffer m_, v_;
  double last_lr_ = 0.0;
};

struct LmSequence {
  std::vector<int> tokens;
  std::vector<uint8_t> mask;  // length tokens.size()-1
};

// Language-model training: batches sampled uniformly with the config seed,
// per-item gradients accumulated in fixed batch order (bit-stable for any
// thread count). Aborts when the loss exceeds twice the initial value for
// 500 consecutive steps.
TrainResult train_lm(TransformerLM& model, const std::vector<LmSequence>& data,
                     const TrainConfig& cfg);

struct ConvExample {
  std::vector<double> crop;
  int label = 0;
};

TrainResult train_conv(ConvClassifier& model, const std::vector<ConvExample>& data,
                       const TrainConfig& cfg);

}  // namespace hieraudio::nn
