#include "hieraudio/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"

namespace hieraudio::nn {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kSqrt1_2)); }
double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * kSqrt1_2));
  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

void layernorm_forward(const double* x, const double* g, const double* b, double* y,
                       double* means, double* rstds, int t, int d) {
  for (int i = 0; i < t; ++i) {
    const double* xi = x + static_cast<int64_t>(i) * d;
    double* yi = y + static_cast<int64_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double dx = xi[j] - mean;
      var += dx * dx;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    means[i] = mean;
    rstds[i] = rstd;
    for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mean) * rstd * g[j] + b[j];
  }
}

void layernorm_backward(const double* x, const double* g, const double* dy,
                        const double* means, const double* rstds, double* dx, double* dg,
                        double* db, int t, int d) {
  for (int i = 0; i < t; ++i) {
    const double* xi = x + static_cast<int64_t>(i) * d;
    const double* dyi = dy + static_cast<int64_t>(i) * d;
    double* dxi = dx + static_cast<int64_t>(i) * d;
    double mean = means[i], rstd = rstds[i];
    double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      double xhat = (xi[j] - mean) * rstd;
      double gdy = g[j] * dyi[j];
      sum_gdy += gdy;
      sum_gdy_xhat += gdy * xhat;
      dg[j] += dyi[j] * xhat;
      db[j] += dyi[j];
    }
    double inv_d = 1.0 / d;
    for (int j = 0; j < d; ++j) {
      double xhat = (xi[j] - mean) * rstd;
      double gdy = g[j] * dyi[j];
      dxi[j] += rstd * (gdy - inv_d * (sum_gdy + xhat * sum_gdy_xhat));
    }
  }
}

// inverted dropout in place; mask records kept slots (empty mask = off)
void apply_dropout(double* x, std::vector<uint8_t>& mask, int64_t n, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) {
    mask.clear();
    return;
  }
  mask.assign(static_cast<size_t>(n), 1);
  double inv_keep = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < n; ++i) {
    if (rng->next_double() < rate) {
      mask[static_cast<size_t>(i)] = 0;
      x[i] = 0.0;
    } else {
      x[i] *= inv_keep;
    }
  }
}

}  // namespace

TransformerLM::TransformerLM(const LmConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  require(cfg.vocab_size >= 2, "vocab_size must be >= 2");
  require(cfg.d_model % cfg.n_heads == 0, "d_model must be divisible by n_heads");
  Rng rng(derive_seed(init_seed, "lm_init"));
  const int v = cfg.vocab_size, d = cfg.d_model, f = cfg.d_ff, h = cfg.n_heads;
  auto add = [&](const std::string& name, std::vector<int> shape, bool decay, bool random) {
    NamedParam p;
    p.name = name;
    p.t = Tensor(std::move(shape));
    p.decay = decay;
    if (random) {
      for (double& x : p.t.data) x = 0.02 * rng.next_normal();
    }
    params_.push_back(std::move(p));
  };
  add("tok_emb", {v, d}, true, true);
  add("relpos_bias", {h, cfg.relpos_buckets}, false, false);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    add(pre + "ln1_g", {d}, false, false);
    add(pre + "ln1_b", {d}, false, false);
    add(pre + "w_qkv", {d, 3 * d}, true, true);
    add(pre + "b_qkv", {3 * d}, false, false);
    add(pre + "w_attn_out", {d, d}, true, true);
    add(pre + "b_attn_out", {d}, false, false);
    add(pre + "ln2_g", {d}, false, false);
    add(pre + "ln2_b", {d}, false, false);
    add(pre + "w_ff1", {d, f}, true, true);
    add(pre + "b_ff1", {f}, false, false);
    add(pre + "w_ff2", {f, d}, true, true);
    add(pre + "b_ff2", {d}, false, false);
    for (double& x : params_[static_cast<size_t>(idx_layer(l, 0))].t.data) x = 1.0;
    for (double& x : params_[static_cast<size_t>(idx_layer(l, 6))].t.data) x = 1.0;
  }
  add("lnf_g", {d}, false, false);
  add("lnf_b", {d}, false, false);
  add("head_w", {d, v}, true, true);
  add("head_b", {v}, false, false);
  for (double& x : params_[static_cast<size_t>(idx_lnf_g())].t.data) x = 1.0;
}

int64_t TransformerLM::num_parameters() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.t.size();
  return n;
}

int TransformerLM::relpos_bucket(int query_pos, int key_pos) const {
  int n = query_pos - key_pos;  // causal: keys precede the query
  if (n < 0) n = 0;
  const int num_buckets = cfg_.relpos_buckets;
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return n;
  double log_ratio = std::log(static_cast<double>(n) / max_exact) /
                     std::log(static_cast<double>(cfg_.relpos_max_distance) / max_exact);
  int bucket = max_exact + static_cast<int>(log_ratio * (num_buckets - max_exact));
  return std::min(bucket, num_buckets - 1);
}

void TransformerLM::forward(std::span<const int> tokens, Tensor& logits, LmTrace* trace,
                            Rng* dropout_rng) const {
  const int t = static_cast<int>(tokens.size());
  const int d = cfg_.d_model, h = cfg_.n_heads, hd = cfg_.head_dim(), f = cfg_.d_ff;
  require(t >= 1, "empty token sequence");
  require(t <= cfg_.context_len, "sequence length " + std::to_string(t) +
                                     " exceeds context " + std::to_string(cfg_.context_len));
  for (int tok : tokens) {
    require(tok >= 0 && tok < cfg_.vocab_size,
            "token " + std::to_string(tok) + " out of vocabulary (" +
                std::to_string(cfg_.vocab_size) + ")");
  }

  LmTrace local;
  LmTrace& tr = trace != nullptr ? *trace : local;
  tr.t = t;
  tr.x0 = Tensor({t, d});
  tr.layers.assign(static_cast<size_t>(cfg_.n_layers), {});

  const Tensor& emb = params_[static_cast<size_t>(idx_tok_emb())].t;
  for (int i = 0; i < t; ++i) {
    std::copy_n(emb.row(tokens[static_cast<size_t>(i)]), d, tr.x0.row(i));
  }
  const Tensor& relpos = params_[static_cast<size_t>(idx_relpos())].t;

  const Tensor* x = &tr.x0;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool train = dropout_rng != nullptr && cfg_.dropout > 0.0;
  const double keep = 1.0 - cfg_.dropout;

  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& L = tr.layers[static_cast<size_t>(l)];
    const double* ln1_g = params_[static_cast<size_t>(idx_layer(l, 0))].t.data.data();
    const double* ln1_b = params_[static_cast<size_t>(idx_layer(l, 1))].t.data.data();
    const Tensor& w_qkv = params_[static_cast<size_t>(idx_layer(l, 2))].t;
    const Tensor& b_qkv = params_[static_cast<size_t>(idx_layer(l, 3))].t;
    const Tensor& w_ao = params_[static_cast<size_t>(idx_layer(l, 4))].t;
    const Tensor& b_ao = params_[static_cast<size_t>(idx_layer(l, 5))].t;
    const double* ln2_g = params_[static_cast<size_t>(idx_layer(l, 6))].t.data.data();
    const double* ln2_b = params_[static_cast<size_t>(idx_layer(l, 7))].t.data.data();
    const Tensor& w_ff1 = params_[static_cast<size_t>(idx_layer(l, 8))].t;
    const Tensor& b_ff1 = params_[static_cast<size_t>(idx_layer(l, 9))].t;
    const Tensor& w_ff2 = params_[static_cast<size_t>(idx_layer(l, 10))].t;
    const Tensor& b_ff2 = params_[static_cast<size_t>(idx_layer(l, 11))].t;

    // attention sublayer
    L.ln1_out = Tensor({t, d});
    L.ln1_mean.resize(static_cast<size_t>(t));
    L.ln1_rstd.resize(static_cast<size_t>(t));
    layernorm_forward(x->data.data(), ln1_g, ln1_b, L.ln1_out.data.data(), L.ln1_mean.data(),
                      L.ln1_rstd.data(), t, d);

    L.qkv = Tensor({t, 3 * d});
    for (int i = 0; i < t; ++i) std::copy_n(b_qkv.data.data(), 3 * d, L.qkv.row(i));
    matmul_acc(L.ln1_out.data.data(), w_qkv.data.data(), L.qkv.data.data(), t, d, 3 * d);

    // raw softmax probabilities; dropout applied on the fly via attn_mask
    L.probs = Tensor({h, t, t});
    for (int head = 0; head < h; ++head) {
      const double* bias_row = relpos.row(head);
      double* probs = L.probs.data.data() + static_cast<int64_t>(head) * t * t;
      for (int i = 0; i < t; ++i) {
        const double* qi = L.qkv.row(i) + head * hd;
        double* pi = probs + static_cast<int64_t>(i) * t;
        double max_s = -1e300;
        for (int j = 0; j <= i; ++j) {
          const double* kj = L.qkv.row(j) + d + head * hd;
          double s = 0.0;
          for (int e = 0; e < hd; ++e) s += qi[e] * kj[e];
          s = s * inv_sqrt_hd + bias_row[relpos_bucket(i, j)];
          pi[j] = s;
          if (s > max_s) max_s = s;
        }
        double total = 0.0;
        for (int j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - max_s);
          total += pi[j];
        }
        double inv_total = 1.0 / total;
        for (int j = 0; j <= i; ++j) pi[j] *= inv_total;
        for (int j = i + 1; j < t; ++j) pi[j] = 0.0;
      }
    }
    if (train) {
      L.attn_mask.assign(static_cast<size_t>(h) * t * t, 1);
      for (auto& m : L.attn_mask) {
        if (dropout_rng->next_double() < cfg_.dropout) m = 0;
      }
    } else {
      L.attn_mask.clear();
    }

    L.ctx = Tensor({t, d});
    for (int head = 0; head < h; ++head) {
      const double* probs = L.probs.data.data() + static_cast<int64_t>(head) * t * t;
      const uint8_t* amask =
          train ? L.attn_mask.data() + static_cast<int64_t>(head) * t * t : nullptr;
      for (int i = 0; i < t; ++i) {
        const double* pi = probs + static_cast<int64_t>(i) * t;
        double* ci = L.ctx.row(i) + head * hd;
        for (int j = 0; j <= i; ++j) {
          double p = pi[j];
          if (train) p = amask[static_cast<int64_t>(i) * t + j] ? p / keep : 0.0;
          if (p == 0.0) continue;
          const double* vj = L.qkv.row(j) + 2 * d + head * hd;
          for (int e = 0; e < hd; ++e) ci[e] += p * vj[e];
        }
      }
    }

    L.att_proj = Tensor({t, d});
    for (int i = 0; i < t; ++i) std::copy_n(b_ao.data.data(), d, L.att_proj.row(i));
    matmul_acc(L.ctx.data.data(), w_ao.data.data(), L.att_proj.data.data(), t, d, d);
    apply_dropout(L.att_proj.data.data(), L.att_drop_mask, static_cast<int64_t>(t) * d,
                  cfg_.dropout, dropout_rng);

    L.x_att = Tensor({t, d});
    for (int64_t i = 0; i < static_cast<int64_t>(t) * d; ++i) {
      L.x_att.data[static_cast<size_t>(i)] =
          x->data[static_cast<size_t>(i)] + L.att_proj.data[static_cast<size_t>(i)];
    }

    // feed-forward sublayer
    L.ln2_out = Tensor({t, d});
    L.ln2_mean.resize(static_cast<size_t>(t));
    L.ln2_rstd.resize(static_cast<size_t>(t));
    layernorm_forward(L.x_att.data.data(), ln2_g, ln2_b, L.ln2_out.data.data(),
                      L.ln2_mean.data(), L.ln2_rstd.data(), t, d);

    L.ff_pre = Tensor({t, f});
    for (int i = 0; i < t; ++i) std::copy_n(b_ff1.data.data(), f, L.ff_pre.row(i));
    matmul_acc(L.ln2_out.data.data(), w_ff1.data.data(), L.ff_pre.data.data(), t, d, f);
    L.ff_act = Tensor({t, f});
    for (int64_t i = 0; i < static_cast<int64_t>(t) * f; ++i) {
      L.ff_act.data[static_cast<size_t>(i)] = gelu(L.ff_pre.data[static_cast<size_t>(i)]);
    }
    L.ff_out = Tensor({t, d});
    for (int i = 0; i < t; ++i) std::copy_n(b_ff2.data.data(), d, L.ff_out.row(i));
    matmul_acc(L.ff_act.data.data(), w_ff2.data.data(), L.ff_out.data.data(), t, f, d);
    apply_dropout(L.ff_out.data.data(), L.ff_drop_mask, static_cast<int64_t>(t) * d,
                  cfg_.dropout, dropout_rng);

    L.x_ff = Tensor({t, d});
    for (int64_t i = 0; i < static_cast<int64_t>(t) * d; ++i) {
      L.x_ff.data[static_cast<size_t>(i)] =
          L.x_att.data[static_cast<size_t>(i)] + L.ff_out.data[static_cast<size_t>(i)];
    }
    x = &L.x_ff;
  }

  tr.lnf_out = Tensor({t, d});
  tr.lnf_mean.resize(static_cast<size_t>(t));
  tr.lnf_rstd.resize(static_cast<size_t>(t));
  layernorm_forward(x->data.data(), params_[static_cast<size_t>(idx_lnf_g())].t.data.data(),
                    params_[static_cast<size_t>(idx_lnf_b())].t.data.data(),
                    tr.lnf_out.data.data(), tr.lnf_mean.data(), tr.lnf_rstd.data(), t, d);

  const Tensor& head_w = params_[static_cast<size_t>(idx_head_w())].t;
  const Tensor& head_b = params_[static_cast<size_t>(idx_head_b())].t;
  logits = Tensor({t, cfg_.vocab_size});
  for (int i = 0; i < t; ++i) std::copy_n(head_b.data.data(), cfg_.vocab_size, logits.row(i));
  matmul_acc(tr.lnf_out.data.data(), head_w.data.data(), logits.data.data(), t, d,
             cfg_.vocab_size);
}

double TransformerLM::loss_sum(std::span<const int> tokens, std::span<const uint8_t> mask,
                               int64_t* masked_count, Rng* dropout_rng) const {
  const int t = static_cast<int>(tokens.size());
  require(t >= 2, "loss needs at least 2 tokens");
  require(static_cast<int>(mask.size()) == t - 1, "mask length must be len-1");
  Tensor logits;
  forward(tokens, logits, nullptr, dropout_rng);
  const int v = cfg_.vocab_size;
  double total = 0.0;
  int64_t count = 0;
  for (int i = 0; i + 1 < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = logits.row(i);
    double max_l = row[0];
    for (int j = 1; j < v; ++j) max_l = std::max(max_l, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - max_l);
    total += std::log(sum) + max_l - row[tokens[static_cast<size_t>(i + 1)]];
    ++count;
  }
  require(count > 0, "loss mask selects no positions");
  if (masked_count != nullptr) *masked_count = count;
  return total;
}

double TransformerLM::loss_and_grad(std::span<const int> tokens, std::span<const uint8_t> mask,
                                    GradBuffer& grads, int64_t* masked_count,
                                    Rng* dropout_rng) const {
  const int t = static_cast<int>(tokens.size());
  const int d = cfg_.d_model, h = cfg_.n_heads, hd = cfg_.head_dim(), f = cfg_.d_ff;
  const int v = cfg_.vocab_size;
  require(t >= 2, "loss needs at least 2 tokens");
  require(static_cast<int>(mask.size()) == t - 1, "mask length must be len-1");

  LmTrace tr;
  Tensor logits;
  forward(tokens, logits, &tr, dropout_rng);
  const bool train = dropout_rng != nullptr && cfg_.dropout > 0.0;
  const double keep = 1.0 - cfg_.dropout;

  Tensor dlogits({t, v});
  double total = 0.0;
  int64_t count = 0;
  for (int i = 0; i + 1 < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = logits.row(i);
    double* drow = dlogits.row(i);
    double max_l = row[0];
    for (int j = 1; j < v; ++j) max_l = std::max(max_l, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - max_l);
    double inv_sum = 1.0 / sum;
    int target = tokens[static_cast<size_t>(i + 1)];
    total += std::log(sum) + max_l - row[target];
    for (int j = 0; j < v; ++j) drow[j] = std::exp(row[j] - max_l) * inv_sum;
    drow[target] -= 1.0;
    ++count;
  }
  require(count > 0, "loss mask selects no positions");
  if (masked_count != nullptr) *masked_count = count;
  if (!std::isfinite(total)) fail_numerical("non-finite loss");

  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor& head_w = params_[static_cast<size_t>(idx_head_w())].t;

  Tensor dx({t, d});
  {
    Tensor& d_head_w = grads[static_cast<size_t>(idx_head_w())];
    Tensor& d_head_b = grads[static_cast<size_t>(idx_head_b())];
    for (int i = 0; i < t; ++i) {
      const double* drow = dlogits.row(i);
      for (int j = 0; j < v; ++j) d_head_b.data[static_cast<size_t>(j)] += drow[j];
    }
    matmul_grad_b(tr.lnf_out.data.data(), dlogits.data.data(), d_head_w.data.data(), t, d, v);
    matmul_grad_a(dlogits.data.data(), head_w.data.data(), dx.data.data(), t, d, v);
  }

  Tensor dx_pre_lnf({t, d});
  {
    const Tensor& x_in =
        cfg_.n_layers > 0 ? tr.layers[static_cast<size_t>(cfg_.n_layers - 1)].x_ff : tr.x0;
    layernorm_backward(x_in.data.data(),
                       params_[static_cast<size_t>(idx_lnf_g())].t.data.data(), dx.data.data(),
                       tr.lnf_mean.data(), tr.lnf_rstd.data(), dx_pre_lnf.data.data(),
                       grads[static_cast<size_t>(idx_lnf_g())].data.data(),
                       grads[static_cast<size_t>(idx_lnf_b())].data.data(), t, d);
  }
  dx = std::move(dx_pre_lnf);

  Tensor& d_relpos = grads[static_cast<size_t>(idx_relpos())];

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& L = tr.layers[static_cast<size_t>(l)];
    const Tensor& x_in = l > 0 ? tr.layers[static_cast<size_t>(l - 1)].x_ff : tr.x0;
    const Tensor& w_qkv = params_[static_cast<size_t>(idx_layer(l, 2))].t;
    const Tensor& w_ao = params_[static_cast<size_t>(idx_layer(l, 4))].t;
    const Tensor& w_ff1 = params_[static_cast<size_t>(idx_layer(l, 8))].t;
    const Tensor& w_ff2 = params_[static_cast<size_t>(idx_layer(l, 10))].t;

    // feed-forward sublayer backward
    Tensor dff_out = dx;
    if (!L.ff_drop_mask.empty()) {
      double inv_keep = 1.0 / keep;
      for (int64_t i = 0; i < static_cast<int64_t>(t) * d; ++i) {
        dff_out.data[static_cast<size_t>(i)] =
            L.ff_drop_mask[static_cast<size_t>(i)]
                ? dff_out.data[static_cast<size_t>(i)] * inv_keep
                : 0.0;
      }
    }
    Tensor dff_act({t, f});
    {
      Tensor& d_w_ff2 = grads[static_cast<size_t>(idx_layer(l, 10))];
      Tensor& d_b_ff2 = grads[static_cast<size_t>(idx_layer(l, 11))];
      for (int i = 0; i < t; ++i) {
        const double* drow = dff_out.row(i);
        for (int j = 0; j < d; ++j) d_b_ff2.data[static_cast<size_t>(j)] += drow[j];
      }
      matmul_grad_b(L.ff_act.data.data(), dff_out.data.data(), d_w_ff2.data.data(), t, f, d);
      matmul_grad_a(dff_out.data.data(), w_ff2.data.data(), dff_act.data.data(), t, f, d);
    }
    for (int64_t i = 0; i < static_cast<int64_t>(t) * f; ++i) {
      dff_act.data[static_cast<size_t>(i)] *= gelu_grad(L.ff_pre.data[static_cast<size_t>(i)]);
    }
    Tensor dln2({t, d});
    {
      Tensor& d_w_ff1 = grads[static_cast<size_t>(idx_layer(l, 8))];
      Tensor& d_b_ff1 = grads[static_cast<size_t>(idx_layer(l, 9))];
      for (int i = 0; i < t; ++i) {
        const double* drow = dff_act.row(i);
        for (int j = 0; j < f; ++j) d_b_ff1.data[static_cast<size_t>(j)] += drow[j];
      }
      matmul_grad_b(L.ln2_out.data.data(), dff_act.data.data(), d_w_ff1.data.data(), t, d, f);
      matmul_grad_a(dff_act.data.data(), w_ff1.data.data(), dln2.data.data(), t, d, f);
    }
    Tensor dx_att = dx;  // residual branch
    layernorm_backward(L.x_att.data.data(),
                       params_[static_cast<size_t>(idx_layer(l, 6))].t.data.data(),
                       dln2.data.data(), L.ln2_mean.data(), L.ln2_rstd.data(),
                       dx_att.data.data(),
                       grads[static_cast<size_t>(idx_layer(l, 6))].data.data(),
                       grads[static_cast<size_t>(idx_layer(l, 7))].data.data(), t, d);

    // attention sublayer backward
    Tensor datt_proj = dx_att;
    if (!L.att_drop_mask.empty()) {
      double inv_keep = 1.0 / keep;
      for (int64_t i = 0; i < static_cast<int64_t>(t) * d; ++i) {
        datt_proj.data[static_cast<size_t>(i)] =
            L.att_drop_mask[static_cast<size_t>(i)]
                ? datt_proj.data[static_cast<size_t>(i)] * inv_keep
                : 0.0;
      }
    }
    Tensor dctx({t, d});
    {
      Tensor& d_w_ao = grads[static_cast<size_t>(idx_layer(l, 4))];
      Tensor& d_b_ao = grads[static_cast<size_t>(idx_layer(l, 5))];
      for (int i = 0; i < t; ++i) {
        const double* drow = datt_proj.row(i);
        for (int j = 0; j < d; ++j) d_b_ao.data[static_cast<size_t>(j)] += drow[j];
      }
      matmul_grad_b(L.ctx.data.data(), datt_proj.data.data(), d_w_ao.data.data(), t, d, d);
      matmul_grad_a(datt_proj.data.data(), w_ao.data.data(), dctx.data.data(), t, d, d);
    }

    Tensor dqkv({t, 3 * d});
    for (int head = 0; head < h; ++head) {
      const double* probs = L.probs.data.data() + static_cast<int64_t>(head) * t * t;
      const uint8_t* amask =
          train ? L.attn_mask.data() + static_cast<int64_t>(head) * t * t : nullptr;
      double* drelpos_row = d_relpos.row(head);
      for (int i = 0; i < t; ++i) {
        const double* pi = probs + static_cast<int64_t>(i) * t;
        const double* dctx_i = dctx.row(i) + head * hd;
        std::vector<double> dp(static_cast<size_t>(i) + 1, 0.0);
        for (int j = 0; j <= i; ++j) {
          double peff = pi[j];
          if (train) peff = amask[static_cast<int64_t>(i) * t + j] ? peff / keep : 0.0;
          const double* vj = L.qkv.row(j) + 2 * d + head * hd;
          double* dvj = dqkv.row(j) + 2 * d + head * hd;
          double acc = 0.0;
          for (int e = 0; e < hd; ++e) {
            acc += dctx_i[e] * vj[e];
            if (peff != 0.0) dvj[e] += peff * dctx_i[e];
          }
          if (train) {
            dp[static_cast<size_t>(j)] =
                amask[static_cast<int64_t>(i) * t + j] ? acc / keep : 0.0;
          } else {
            dp[static_cast<size_t>(j)] = acc;
          }
        }
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) {
          dot += pi[j] * dp[static_cast<size_t>(j)];
        }
        const double* qi = L.qkv.row(i) + head * hd;
        double* dqi = dqkv.row(i) + head * hd;
        for (int j = 0; j <= i; ++j) {
          double ds = pi[j] * (dp[static_cast<size_t>(j)] - dot);
          if (ds == 0.0) continue;
          const double* kj = L.qkv.row(j) + d + head * hd;
          double* dkj = dqkv.row(j) + d + head * hd;
          for (int e = 0; e < hd; ++e) {
            dqi[e] += ds * inv_sqrt_hd * kj[e];
            dkj[e] += ds * inv_sqrt_hd * qi[e];
          }
          drelpos_row[relpos_bucket(i, j)] += ds;
        }
      }
    }

    Tensor dln1({t, d});
    {
      Tensor& d_w_qkv = grads[static_cast<size_t>(idx_layer(l, 2))];
      Tensor& d_b_qkv = grads[static_cast<size_t>(idx_layer(l, 3))];
      for (int i = 0; i < t; ++i) {
        const double* drow = dqkv.row(i);
        for (int j = 0; j < 3 * d; ++j) d_b_qkv.data[static_cast<size_t>(j)] += drow[j];
      }
      matmul_grad_b(L.ln1_out.data.data(), dqkv.data.data(), d_w_qkv.data.data(), t, d, 3 * d);
      matmul_grad_a(dqkv.data.data(), w_qkv.data.data(), dln1.data.data(), t, d, 3 * d);
    }
    Tensor dx_in = dx_att;  // residual branch
    layernorm_backward(x_in.data.data(),
                       params_[static_cast<size_t>(idx_layer(l, 0))].t.data.data(),
                       dln1.data.data(), L.ln1_mean.data(), L.ln1_rstd.data(),
                       dx_in.data.data(),
                       grads[static_cast<size_t>(idx_layer(l, 0))].data.data(),
                       grads[static_cast<size_t>(idx_layer(l, 1))].data.data(), t, d);
    dx = std::move(dx_in);
  }

  Tensor& d_emb = grads[static_cast<size_t>(idx_tok_emb())];
  for (int i = 0; i < t; ++i) {
    double* dst = d_emb.row(tokens[static_cast<size_t>(i)]);
    const double* src = dx.row(i);
    for (int j = 0; j < d; ++j) dst[j] += src[j];
  }
  return total;
}

KvState TransformerLM::make_kv_state() const {
  KvState st;
  st.len = 0;
  st.k.assign(static_cast<size_t>(cfg_.n_layers), Tensor({cfg_.context_len, cfg_.d_model}));
  st.v.assign(static_cast<size_t>(cfg_.n_layers), Tensor({cfg_.context_len, cfg_.d_model}));
  return st;
}

void TransformerLM::prime(std::span<const int> tokens, KvState& st) const {
  for (int tok : tokens) step(tok, st);
}

std::vector<double> TransformerLM::step(int token, KvState& st) const {
  const int d = cfg_.d_model, h = cfg_.n_heads, hd = cfg_.head_dim(), f = cfg_.d_ff;
  require(token >= 0 && token < cfg_.vocab_size,
          "token " + std::to_string(token) + " out of vocabulary");
  require(st.len < cfg_.context_len,
          "KV cache full: context " + std::to_string(cfg_.context_len) + " exceeded");
  const int pos = st.len;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor& relpos = params_[static_cast<size_t>(idx_relpos())].t;

  std::vector<double> x(static_cast<size_t>(d));
  std::copy_n(params_[static_cast<size_t>(idx_tok_emb())].t.row(token), d, x.begin());

  std::vector<double> norm(static_cast<size_t>(d)), qkv(static_cast<size_t>(3) * d),
      ctx(static_cast<size_t>(d)), tmp(static_cast<size_t>(std::max(d, f)));
  std::vector<double> ff(static_cast<size_t>(f));

  auto layernorm_vec = [d](const double* in, const double* g, const double* b, double* out) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += in[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double dx = in[j] - mean;
      var += dx * dx;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int j = 0; j < d; ++j) out[j] = (in[j] - mean) * rstd * g[j] + b[j];
  };

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const double* ln1_g = params_[static_cast<size_t>(idx_layer(l, 0))].t.data.data();
    const double* ln1_b = params_[static_cast<size_t>(idx_layer(l, 1))].t.data.data();
    const Tensor& w_qkv = params_[static_cast<size_t>(idx_layer(l, 2))].t;
    const Tensor& b_qkv = params_[static_cast<size_t>(idx_layer(l, 3))].t;
    const Tensor& w_ao = params_[static_cast<size_t>(idx_layer(l, 4))].t;
    const Tensor& b_ao = params_[static_cast<size_t>(idx_layer(l, 5))].t;
    const double* ln2_g = params_[static_cast<size_t>(idx_layer(l, 6))].t.data.data();
    const double* ln2_b = params_[static_cast<size_t>(idx_layer(l, 7))].t.data.data();
    const Tensor& w_ff1 = params_[static_cast<size_t>(idx_layer(l, 8))].t;
    const Tensor& b_ff1 = params_[static_cast<size_t>(idx_layer(l, 9))].t;
    const Tensor& w_ff2 = params_[static_cast<size_t>(idx_layer(l, 10))].t;
    const Tensor& b_ff2 = params_[static_cast<size_t>(idx_layer(l, 11))].t;

    layernorm_vec(x.data(), ln1_g, ln1_b, norm.data());
    std::copy_n(b_qkv.data.data(), 3 * d, qkv.begin());
    for (int kk = 0; kk < d; ++kk) {
      double nv = norm[static_cast<size_t>(kk)];
      if (nv == 0.0) continue;
      const double* wrow = w_qkv.row(kk);
      for (int j = 0; j < 3 * d; ++j) qkv[static_cast<size_t>(j)] += nv * wrow[j];
    }
    std::copy_n(qkv.begin() + d, d, st.k[static_cast<size_t>(l)].row(pos));
    std::copy_n(qkv.begin() + 2 * d, d, st.v[static_cast<size_t>(l)].row(pos));

    std::fill(ctx.begin(), ctx.end(), 0.0);
    std::vector<double> scores(static_cast<size_t>(pos) + 1);
    for (int head = 0; head < h; ++head) {
      const double* q = qkv.data() + head * hd;
      const double* bias_row = relpos.row(head);
      double max_s = -1e300;
      for (int j = 0; j <= pos; ++j) {
        const double* kj = st.k[static_cast<size_t>(l)].row(j) + head * hd;
        double s = 0.0;
        for (int e = 0; e < hd; ++e) s += q[e] * kj[e];
        s = s * inv_sqrt_hd + bias_row[relpos_bucket(pos, j)];
        scores[static_cast<size_t>(j)] = s;
        if (s > max_s) max_s = s;
      }
      double total = 0.0;
      for (int j = 0; j <= pos; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - max_s);
        total += scores[static_cast<size_t>(j)];
      }
      double inv_total = 1.0 / total;
      double* c = ctx.data() + head * hd;
      for (int j = 0; j <= pos; ++j) {
        double p = scores[static_cast<size_t>(j)] * inv_total;
        const double* vj = st.v[static_cast<size_t>(l)].row(j) + head * hd;
        for (int e = 0; e < hd; ++e) c[e] += p * vj[e];
      }
    }
    std::copy_n(b_ao.data.data(), d, tmp.begin());
    for (int kk = 0; kk < d; ++kk) {
      double cv = ctx[static_cast<size_t>(kk)];
      if (cv == 0.0) continue;
      const double* wrow = w_ao.row(kk);
      for (int j = 0; j < d; ++j) tmp[static_cast<size_t>(j)] += cv * wrow[j];
    }
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];

    layernorm_vec(x.data(), ln2_g, ln2_b, norm.data());
    std::copy_n(b_ff1.data.data(), f, ff.begin());
    for (int kk = 0; kk < d; ++kk) {
      double nv = norm[static_cast<size_t>(kk)];
      if (nv == 0.0) continue;
      const double* wrow = w_ff1.row(kk);
      for (int j = 0; j < f; ++j) ff[static_cast<size_t>(j)] += nv * wrow[j];
    }
    for (int j = 0; j < f; ++j) ff[static_cast<size_t>(j)] = gelu(ff[static_cast<size_t>(j)]);
    std::copy_n(b_ff2.data.data(), d, tmp.begin());
    for (int kk = 0; kk < f; ++kk) {
      double fv = ff[static_cast<size_t>(kk)];
      if (fv == 0.0) continue;
      const double* wrow = w_ff2.row(kk);
      for (int j = 0; j < d; ++j) tmp[static_cast<size_t>(j)] += fv * wrow[j];
    }
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
  }

  layernorm_vec(x.data(), params_[static_cast<size_t>(idx_lnf_g())].t.data.data(),
                params_[static_cast<size_t>(idx_lnf_b())].t.data.data(), norm.data());
  const Tensor& head_w = params_[static_cast<size_t>(idx_head_w())].t;
  std::vector<double> logits(params_[static_cast<size_t>(idx_head_b())].t.data.begin(),
                             params_[static_cast<size_t>(idx_head_b())].t.data.end());
  for (int kk = 0; kk < d; ++kk) {
    double nv = norm[static_cast<size_t>(kk)];
    if (nv == 0.0) continue;
    const double* wrow = head_w.row(kk);
    for (int j = 0; j < cfg_.vocab_size; ++j) logits[static_cast<size_t>(j)] += nv * wrow[j];
  }
  st.len = pos + 1;
  return logits;
}

double grad_check(const TransformerLM& model, std::span<const int> tokens,
                  std::span<const uint8_t> mask, int max_checks, double eps, uint64_t seed) {
  GradBuffer grads = make_grad_buffer(model.params());
  int64_t count = 0;
  model.loss_and_grad(tokens, mask, grads, &count);
  const double inv_count = 1.0 / static_cast<double>(count);

  std::vector<std::pair<int, int64_t>> slots;
  for (int p = 0; p < static_cast<int>(model.params().size()); ++p) {
    int64_t n = model.params()[static_cast<size_t>(p)].t.size();
    for (int64_t o = 0; o < n; ++o) slots.emplace_back(p, o);
  }
  Rng rng(derive_seed(seed, "gradcheck"));
  int checks = std::min<int>(max_checks, static_cast<int>(slots.size()));
  for (int i = 0; i < checks; ++i) {
    int64_t j = static_cast<int64_t>(i) +
                static_cast<int64_t>(rng.next_below(slots.size() - static_cast<size_t>(i)));
    std::swap(slots[static_cast<size_t>(i)], slots[static_cast<size_t>(j)]);
  }

  auto& params = const_cast<TransformerLM&>(model).params();
  double max_rel = 0.0;
  for (int i = 0; i < checks; ++i) {
    auto [p, o] = slots[static_cast<size_t>(i)];
    double& w = params[static_cast<size_t>(p)].t.data[static_cast<size_t>(o)];
    const double orig = w;
    w = orig + eps;
    double lp = model.loss_sum(tokens, mask, nullptr) * inv_count;
    w = orig - eps;
    double lm = model.loss_sum(tokens, mask, nullptr) * inv_count;
    w = orig;
    double numeric = (lp - lm) / (2.0 * eps);
    double analytic = grads[static_cast<size_t>(p)].data[static_cast<size_t>(o)] * inv_count;
    double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
  }
  return max_rel;
}

}  // namespace hieraudio::nn
