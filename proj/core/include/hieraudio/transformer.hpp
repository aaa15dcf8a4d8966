#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hieraudio/rng.hpp"
#include "hieraudio/tensor.hpp"

namespace hieraudio::nn {

struct LmConfig {
  int vocab_size = 0;
  int context_len = 256;
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 256;
  double dropout = 0.1;
  int relpos_buckets = 32;
  int relpos_max_distance = 128;

  int head_dim() const { return d_model / n_heads; }
};

// Activation record for one forward pass; reused across calls to avoid
// reallocation. Only valid for the sequence it was filled with.
struct LmTrace {
  int t = 0;
  Tensor x0;                      // [T, D] embeddings
  struct Layer {
    Tensor ln1_out, ln2_out;      // [T, D]
    std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;  // [T]
    Tensor qkv;                   // [T, 3D]
    Tensor probs;                 // [H, T, T] post-softmax, pre-dropout
    std::vector<uint8_t> attn_mask;  // dropout keep mask, H*T*T (train only)
    Tensor ctx;                   // [T, D] concatenated head outputs
    Tensor att_proj;              // [T, D] after output projection (pre-dropout)
    std::vector<uint8_t> att_drop_mask;  // [T*D]
    Tensor x_att;                 // [T, D] residual after attention
    Tensor ff_pre;                // [T, F] pre-GELU
    Tensor ff_act;                // [T, F] post-GELU
    Tensor ff_out;                // [T, D] after second projection (pre-dropout)
    std::vector<uint8_t> ff_drop_mask;   // [T*D]
    Tensor x_ff;                  // [T, D] residual after feed-forward
  };
  std::vector<Layer> layers;
  Tensor lnf_out;                 // [T, D]
  std::vector<double> lnf_mean, lnf_rstd;
  Tensor logits;                  // [T, V]
};

// Incremental decoding state: cached per-layer keys/values.
struct KvState {
  int len = 0;
  std::vector<Tensor> k;  // per layer [ctx, D]
  std::vector<Tensor> v;
};

// Decoder-only Transformer: pre-norm residual blocks, GELU feed-forward,
// causal attention with bucketed relative position biases shared across
// layers (learned scalar per head and bucket).
class TransformerLM {
 public:
  TransformerLM() = default;
  TransformerLM(const LmConfig& cfg, uint64_t init_seed);

  const LmConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  int64_t num_parameters() const;

  // Full-sequence forward. trace may be null (eval); dropout_rng may be
  // null (dropout off). Rejects tokens >= vocab_size and T > context_len.
  void forward(std::span<const int> tokens, Tensor& logits, LmTrace* trace,
               Rng* dropout_rng) const;

  // Sum of cross-entropy over positions where mask[t] is true; target for
  // position t is tokens[t+1]; mask has length T-1. Returns the sum and the
  // number of masked positions.
  double loss_sum(std::span<const int> tokens, std::span<const uint8_t> mask,
                  int64_t* masked_count, Rng* dropout_rng = nullptr) const;

  // As loss_sum, also accumulating d(loss_sum)/d(params) into grads.
  double loss_and_grad(std::span<const int> tokens, std::span<const uint8_t> mask,
                       GradBuffer& grads, int64_t* masked_count,
                       Rng* dropout_rng = nullptr) const;

  // Incremental decoding (eval mode). step() appends one token and returns
  // the logits row for the next position.
  KvState make_kv_state() const;
  void prime(std::span<const int> tokens, KvState& st) const;
  std::vector<double> step(int token, KvState& st) const;

  // T5 relative position bucket for key position j relative to query i
  // (j <= i in causal decoding).
  int relpos_bucket(int query_pos, int key_pos) const;

  // parameter indices, fixed layout
  int idx_tok_emb() const { return 0; }
  int idx_relpos() const { return 1; }
  int idx_layer(int layer, int slot) const { return 2 + layer * 12 + slot; }
  int idx_lnf_g() const { return 2 + cfg_.n_layers * 12; }
  int idx_lnf_b() const { return idx_lnf_g() + 1; }
  int idx_head_w() const { return idx_lnf_g() + 2; }
  int idx_head_b() const { return idx_lnf_g() + 3; }

 private:
  LmConfig cfg_;
  std::vector<NamedParam> params_;

  void block_forward_cached(int layer, const double* x_in, double* x_out, KvState& st,
                            int pos) const;
};

// Max relative error between analytic gradients and central finite
// differences over up to `max_checks` randomly chosen parameters.
double grad_check(const TransformerLM& model, std::span<const int> tokens,
                  std::span<const uint8_t> mask, int max_checks, double eps, uint64_t seed);

}  // namespace hieraudio::nn
