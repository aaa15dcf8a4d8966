#include "hieraudio/conv_net.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"

namespace hieraudio::nn {

namespace {

constexpr double kLnEps = 1e-5;

struct Plane {
  int c = 0, h = 0, w = 0;
  std::vector<double> data;  // c * h * w
  Plane() = default;
  Plane(int c_, int h_, int w_) : c(c_), h(h_), w(w_) {
    data.assign(static_cast<size_t>(c) * h * w, 0.0);
  }
  double* at(int ci) { return data.data() + static_cast<int64_t>(ci) * h * w; }
  const double* at(int ci) const { return data.data() + static_cast<int64_t>(ci) * h * w; }
};

// 3x1 kernel over the time axis, zero padding 1.
void conv_time(const Plane& in, const Tensor& w, const Tensor& b, Plane& out) {
  const int co = out.c, ci = in.c, h = in.h, width = in.w;
  for (int o = 0; o < co; ++o) {
    double* dst = out.at(o);
    double bias = b.data[static_cast<size_t>(o)];
    for (int64_t i = 0; i < static_cast<int64_t>(h) * width; ++i) dst[i] = bias;
    for (int c = 0; c < ci; ++c) {
      const double* src = in.at(c);
      const double* kw = w.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      for (int y = 0; y < h; ++y) {
        double* drow = dst + static_cast<int64_t>(y) * width;
        for (int k = 0; k < 3; ++k) {
          int sy = y + k - 1;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<int64_t>(sy) * width;
          double kv = kw[k];
          for (int x = 0; x < width; ++x) drow[x] += kv * srow[x];
        }
      }
    }
  }
}

void conv_time_backward(const Plane& in, const Tensor& w, const Plane& dout, Plane& din,
                        Tensor& dw, Tensor& db) {
  const int co = dout.c, ci = in.c, h = in.h, width = in.w;
  for (int o = 0; o < co; ++o) {
    const double* dsrc = dout.at(o);
    double acc_b = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(h) * width; ++i) acc_b += dsrc[i];
    db.data[static_cast<size_t>(o)] += acc_b;
    for (int c = 0; c < ci; ++c) {
      const double* src = in.at(c);
      double* dsrc_in = din.at(c);
      const double* kw = w.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      double* dkw = dw.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      for (int y = 0; y < h; ++y) {
        const double* drow = dsrc + static_cast<int64_t>(y) * width;
        for (int k = 0; k < 3; ++k) {
          int sy = y + k - 1;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<int64_t>(sy) * width;
          double* dinrow = dsrc_in + static_cast<int64_t>(sy) * width;
          double kv = kw[k];
          double acc_w = 0.0;
          for (int x = 0; x < width; ++x) {
            acc_w += drow[x] * srow[x];
            dinrow[x] += kv * drow[x];
          }
          dkw[k] += acc_w;
        }
      }
    }
  }
}

// 1x3 kernel over the frequency axis, zero padding 1.
void conv_freq(const Plane& in, const Tensor& w, const Tensor& b, Plane& out) {
  const int co = out.c, ci = in.c, h = in.h, width = in.w;
  for (int o = 0; o < co; ++o) {
    double* dst = out.at(o);
    double bias = b.data[static_cast<size_t>(o)];
    for (int64_t i = 0; i < static_cast<int64_t>(h) * width; ++i) dst[i] = bias;
    for (int c = 0; c < ci; ++c) {
      const double* src = in.at(c);
      const double* kw = w.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      for (int y = 0; y < h; ++y) {
        double* drow = dst + static_cast<int64_t>(y) * width;
        const double* srow = src + static_cast<int64_t>(y) * width;
        for (int x = 0; x < width; ++x) {
          double acc = 0.0;
          if (x > 0) acc += kw[0] * srow[x - 1];
          acc += kw[1] * srow[x];
          if (x + 1 < width) acc += kw[2] * srow[x + 1];
          drow[x] += acc;
        }
      }
    }
  }
}

void conv_freq_backward(const Plane& in, const Tensor& w, const Plane& dout, Plane& din,
                        Tensor& dw, Tensor& db) {
  const int co = dout.c, ci = in.c, h = in.h, width = in.w;
  for (int o = 0; o < co; ++o) {
    const double* dsrc = dout.at(o);
    double acc_b = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(h) * width; ++i) acc_b += dsrc[i];
    db.data[static_cast<size_t>(o)] += acc_b;
    for (int c = 0; c < ci; ++c) {
      const double* src = in.at(c);
      double* din_c = din.at(c);
      const double* kw = w.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      double* dkw = dw.data.data() + (static_cast<int64_t>(o) * ci + c) * 3;
      for (int y = 0; y < h; ++y) {
        const double* drow = dsrc + static_cast<int64_t>(y) * width;
        const double* srow = src + static_cast<int64_t>(y) * width;
        double* dinrow = din_c + static_cast<int64_t>(y) * width;
        for (int x = 0; x < width; ++x) {
          double g = drow[x];
          if (g == 0.0) continue;
          if (x > 0) {
            dkw[0] += g * srow[x - 1];
            dinrow[x - 1] += kw[0] * g;
          }
          dkw[1] += g * srow[x];
          dinrow[x] += kw[1] * g;
          if (x + 1 < width) {
            dkw[2] += g * srow[x + 1];
            dinrow[x + 1] += kw[2] * g;
          }
        }
      }
    }
  }
}

// channel layernorm at each spatial position
void ln_channels_forward(const Plane& in, const Tensor& g, const Tensor& b, Plane& out,
                         std::vector<double>& means, std::vector<double>& rstds) {
  const int c = in.c, hw = in.h * in.w;
  means.assign(static_cast<size_t>(hw), 0.0);
  rstds.assign(static_cast<size_t>(hw), 0.0);
  for (int p = 0; p < hw; ++p) {
    double mean = 0.0;
    for (int ci = 0; ci < c; ++ci) mean += in.data[static_cast<size_t>(ci) * hw + p];
    mean /= c;
    double var = 0.0;
    for (int ci = 0; ci < c; ++ci) {
      double d = in.data[static_cast<size_t>(ci) * hw + p] - mean;
      var += d * d;
    }
    var /= c;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    means[static_cast<size_t>(p)] = mean;
    rstds[static_cast<size_t>(p)] = rstd;
    for (int ci = 0; ci < c; ++ci) {
      out.data[static_cast<size_t>(ci) * hw + p] =
          (in.data[static_cast<size_t>(ci) * hw + p] - mean) * rstd *
              g.data[static_cast<size_t>(ci)] +
          b.data[static_cast<size_t>(ci)];
    }
  }
}

void ln_channels_backward(const Plane& in, const Tensor& g, const Plane& dout,
                          const std::vector<double>& means, const std::vector<double>& rstds,
                          Plane& din, Tensor& dg, Tensor& db) {
  const int c = in.c, hw = in.h * in.w;
  for (int p = 0; p < hw; ++p) {
    double mean = means[static_cast<size_t>(p)], rstd = rstds[static_cast<size_t>(p)];
    double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
    for (int ci = 0; ci < c; ++ci) {
      double xhat = (in.data[static_cast<size_t>(ci) * hw + p] - mean) * rstd;
      double dy = dout.data[static_cast<size_t>(ci) * hw + p];
      double gdy = g.data[static_cast<size_t>(ci)] * dy;
      sum_gdy += gdy;
      sum_gdy_xhat += gdy * xhat;
      dg.data[static_cast<size_t>(ci)] += dy * xhat;
      db.data[static_cast<size_t>(ci)] += dy;
    }
    double inv_c = 1.0 / c;
    for (int ci = 0; ci < c; ++ci) {
      double xhat = (in.data[static_cast<size_t>(ci) * hw + p] - mean) * rstd;
      double gdy = g.data[static_cast<size_t>(ci)] * dout.data[static_cast<size_t>(ci) * hw + p];
      din.data[static_cast<size_t>(ci) * hw + p] +=
          rstd * (gdy - inv_c * (sum_gdy + xhat * sum_gdy_xhat));
    }
  }
}

struct BlockTrace {
  Plane in;            // block input
  Plane conv1_pre;     // pre-ReLU
  Plane conv1_act;     // post-ReLU
  Plane conv2_pre;
  Plane conv2_act;     // LN input
  Plane ln_out;
  std::vector<double> ln_mean, ln_rstd;
  Plane pooled;        // block output (== ln_out if no pool)
  std::vector<int> pool_idx;  // argmax flat index into ln_out per pooled slot
  bool pooled_here = false;
};

struct ConvTrace {
  std::vector<BlockTrace> blocks;
  std::vector<double> gap;     // [C_last]
  std::vector<double> logits;  // [n_classes]
};

}  // namespace

ConvClassifier::ConvClassifier(const ConvConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  require(!cfg.channels.empty(), "conv classifier needs at least one block");
  require(cfg.n_classes >= 2, "conv classifier needs >= 2 classes");
  Rng rng(derive_seed(init_seed, "conv_init"));
  auto add = [&](const std::string& name, std::vector<int> shape, bool decay, double std) {
    NamedParam p;
    p.name = name;
    p.t = Tensor(std::move(shape));
    p.decay = decay;
    if (std > 0.0) {
      for (double& x : p.t.data) x = std * rng.next_normal();
    }
    params_.push_back(std::move(p));
  };
  int c_in = 1;
  for (size_t b = 0; b < cfg.channels.size(); ++b) {
    int c_out = cfg.channels[b];
    std::string pre = "block" + std::to_string(b) + ".";
    add(pre + "w1", {c_out, c_in, 3}, true, std::sqrt(2.0 / (3.0 * c_in)));
    add(pre + "b1", {c_out}, false, 0.0);
    add(pre + "w2", {c_out, c_out, 3}, true, std::sqrt(2.0 / (3.0 * c_out)));
    add(pre + "b2", {c_out}, false, 0.0);
    add(pre + "ln_g", {c_out}, false, 0.0);
    add(pre + "ln_b", {c_out}, false, 0.0);
    for (double& x : params_[params_.size() - 2].t.data) x = 1.0;
    c_in = c_out;
  }
  add("head_w", {c_in, cfg.n_classes}, true, std::sqrt(1.0 / c_in));
  add("head_b", {cfg.n_classes}, false, 0.0);
}

namespace {

void run_forward(const ConvClassifier& model, std::span<const double> crop, ConvTrace& tr) {
  const ConvConfig& cfg = model.config();
  require(static_cast<int>(crop.size()) == cfg.in_h * cfg.in_w,
          "crop must be " + std::to_string(cfg.in_h) + "x" + std::to_string(cfg.in_w));
  const auto& params = model.params();

  Plane x(1, cfg.in_h, cfg.in_w);
  const double inv_std = 1.0 / model.input_std;
  for (int64_t i = 0; i < static_cast<int64_t>(crop.size()); ++i) {
    x.data[static_cast<size_t>(i)] = (crop[static_cast<size_t>(i)] - model.input_mean) * inv_std;
  }

  tr.blocks.assign(cfg.channels.size(), {});
  for (size_t b = 0; b < cfg.channels.size(); ++b) {
    BlockTrace& bt = tr.blocks[b];
    bt.in = std::move(x);
    int c_out = cfg.channels[b];
    const Tensor& w1 = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 0))].t;
    const Tensor& b1 = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 1))].t;
    const Tensor& w2 = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 2))].t;
    const Tensor& b2 = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 3))].t;
    const Tensor& ln_g = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 4))].t;
    const Tensor& ln_b = params[static_cast<size_t>(model.idx_block(static_cast<int>(b), 5))].t;

    bt.conv1_pre = Plane(c_out, bt.in.h, bt.in.w);
    conv_time(bt.in, w1, b1, bt.conv1_pre);
    bt.conv1_act = bt.conv1_pre;
    for (double& v : bt.conv1_act.data) v = v > 0.0 ? v : 0.0;

    bt.conv2_pre = Plane(c_out, bt.in.h, bt.in.w);
    conv_freq(bt.conv1_act, w2, b2, bt.conv2_pre);
    bt.conv2_act = bt.conv2_pre;
    for (double& v : bt.conv2_act.data) v = v > 0.0 ? v : 0.0;

    bt.ln_out = Plane(c_out, bt.in.h, bt.in.w);
    ln_channels_forward(bt.conv2_act, ln_g, ln_b, bt.ln_out, bt.ln_mean, bt.ln_rstd);

    bt.pooled_here = model.pools_at(static_cast<int>(b));
    if (bt.pooled_here) {
      int ph = bt.ln_out.h / 2, pw = bt.ln_out.w / 2;
      bt.pooled = Plane(c_out, ph, pw);
      bt.pool_idx.assign(static_cast<size_t>(c_out) * ph * pw, 0);
      for (int c = 0; c < c_out; ++c) {
        const double* src = bt.ln_out.at(c);
        double* dst = bt.pooled.at(c);
        int* idx = bt.pool_idx.data() + static_cast<int64_t>(c) * ph * pw;
        for (int y = 0; y < ph; ++y) {
          for (int xx = 0; xx < pw; ++xx) {
            int best_flat = (2 * y) * bt.ln_out.w + 2 * xx;
            double best = src[best_flat];
            for (int dy = 0; dy < 2; ++dy) {
              for (int dxx = 0; dxx < 2; ++dxx) {
                int flat = (2 * y + dy) * bt.ln_out.w + (2 * xx + dxx);
                if (src[flat] > best) {
                  best = src[flat];
                  best_flat = flat;
                }
              }
            }
            dst[static_cast<int64_t>(y) * pw + xx] = best;
            idx[static_cast<int64_t>(y) * pw + xx] = best_flat;
          }
        }
      }
      x = bt.pooled;
    } else {
      bt.pooled = bt.ln_out;
      x = bt.pooled;
    }
  }

  // global average pool + head
  const int c_last = cfg.channels.back();
  tr.gap.assign(static_cast<size_t>(c_last), 0.0);
  const double inv_hw = 1.0 / static_cast<double>(x.h * x.w);
  for (int c = 0; c < c_last; ++c) {
    const double* src = x.at(c);
    double acc = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(x.h) * x.w; ++i) acc += src[i];
    tr.gap[static_cast<size_t>(c)] = acc * inv_hw;
  }
  const Tensor& head_w = params[static_cast<size_t>(model.idx_head_w())].t;
  const Tensor& head_b = params[static_cast<size_t>(model.idx_head_b())].t;
  tr.logits.assign(head_b.data.begin(), head_b.data.end());
  for (int c = 0; c < c_last; ++c) {
    double gv = tr.gap[static_cast<size_t>(c)];
    const double* wrow = head_w.row(c);
    for (int j = 0; j < cfg.n_classes; ++j) tr.logits[static_cast<size_t>(j)] += gv * wrow[j];
  }
}

}  // namespace

std::vector<double> ConvClassifier::forward(std::span<const double> crop) const {
  ConvTrace tr;
  run_forward(*this, crop, tr);
  return tr.logits;
}

double ConvClassifier::loss_only(std::span<const double> crop, int label) const {
  std::vector<double> logits = forward(crop);
  double max_l = logits[0];
  for (double v : logits) max_l = std::max(max_l, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - max_l);
  return std::log(sum) + max_l - logits[static_cast<size_t>(label)];
}

double ConvClassifier::loss_and_grad(std::span<const double> crop, int label,
                                     GradBuffer& grads) const {
  require(label >= 0 && label < cfg_.n_classes, "label out of range");
  ConvTrace tr;
  run_forward(*this, crop, tr);

  double max_l = tr.logits[0];
  for (double v : tr.logits) max_l = std::max(max_l, v);
  double sum = 0.0;
  for (double v : tr.logits) sum += std::exp(v - max_l);
  double loss = std::log(sum) + max_l - tr.logits[static_cast<size_t>(label)];

  std::vector<double> dlogits(tr.logits.size());
  for (size_t j = 0; j < tr.logits.size(); ++j) {
    dlogits[j] = std::exp(tr.logits[j] - max_l) / sum;
  }
  dlogits[static_cast<size_t>(label)] -= 1.0;

  const int c_last = cfg_.channels.back();
  const Tensor& head_w = params_[static_cast<size_t>(idx_head_w())].t;
  Tensor& d_head_w = grads[static_cast<size_t>(idx_head_w())];
  Tensor& d_head_b = grads[static_cast<size_t>(idx_head_b())];
  std::vector<double> dgap(static_cast<size_t>(c_last), 0.0);
  for (int j = 0; j < cfg_.n_classes; ++j) d_head_b.data[static_cast<size_t>(j)] += dlogits[static_cast<size_t>(j)];
  for (int c = 0; c < c_last; ++c) {
    const double* wrow = head_w.row(c);
    double acc = 0.0;
    for (int j = 0; j < cfg_.n_classes; ++j) {
      acc += wrow[j] * dlogits[static_cast<size_t>(j)];
      d_head_w.data[static_cast<size_t>(c) * cfg_.n_classes + static_cast<size_t>(j)] +=
          tr.gap[static_cast<size_t>(c)] * dlogits[static_cast<size_t>(j)];
    }
    dgap[static_cast<size_t>(c)] = acc;
  }

  // distribute GAP gradient over the last block's output
  const BlockTrace& last = tr.blocks.back();
  Plane dout(last.pooled.c, last.pooled.h, last.pooled.w);
  const double inv_hw = 1.0 / static_cast<double>(last.pooled.h * last.pooled.w);
  for (int c = 0; c < c_last; ++c) {
    double g = dgap[static_cast<size_t>(c)] * inv_hw;
    double* dst = dout.at(c);
    for (int64_t i = 0; i < static_cast<int64_t>(last.pooled.h) * last.pooled.w; ++i) dst[i] = g;
  }

  for (int b = static_cast<int>(cfg_.channels.size()) - 1; b >= 0; --b) {
    const BlockTrace& bt = tr.blocks[static_cast<size_t>(b)];
    const Tensor& w1 = params_[static_cast<size_t>(idx_block(b, 0))].t;
    const Tensor& w2 = params_[static_cast<size_t>(idx_block(b, 2))].t;
    const Tensor& ln_g = params_[static_cast<size_t>(idx_block(b, 4))].t;
    Tensor& d_w1 = grads[static_cast<size_t>(idx_block(b, 0))];
    Tensor& d_b1 = grads[static_cast<size_t>(idx_block(b, 1))];
    Tensor& d_w2 = grads[static_cast<size_t>(idx_block(b, 2))];
    Tensor& d_b2 = grads[static_cast<size_t>(idx_block(b, 3))];
    Tensor& d_ln_g = grads[static_cast<size_t>(idx_block(b, 4))];
    Tensor& d_ln_b = grads[static_cast<size_t>(idx_block(b, 5))];

    // un-pool
    Plane dln(bt.ln_out.c, bt.ln_out.h, bt.ln_out.w);
    if (bt.pooled_here) {
      int ph = bt.pooled.h, pw = bt.pooled.w;
      for (int c = 0; c < bt.pooled.c; ++c) {
        const double* dsrc = dout.at(c);
        double* dst = dln.at(c);
        const int* idx = bt.pool_idx.data() + static_cast<int64_t>(c) * ph * pw;
        for (int64_t i = 0; i < static_cast<int64_t>(ph) * pw; ++i) {
          dst[idx[i]] += dsrc[i];
        }
      }
    } else {
      dln = dout;
    }

    Plane dconv2_act(bt.conv2_act.c, bt.conv2_act.h, bt.conv2_act.w);
    ln_channels_backward(bt.conv2_act, ln_g, dln, bt.ln_mean, bt.ln_rstd, dconv2_act, d_ln_g,
                         d_ln_b);
    // ReLU
    for (size_t i = 0; i < dconv2_act.data.size(); ++i) {
      if (bt.conv2_pre.data[i] <= 0.0) dconv2_act.data[i] = 0.0;
    }
    Plane dconv1_act(bt.conv1_act.c, bt.conv1_act.h, bt.conv1_act.w);
    conv_freq_backward(bt.conv1_act, w2, dconv2_act, dconv1_act, d_w2, d_b2);
    for (size_t i = 0; i < dconv1_act.data.size(); ++i) {
      if (bt.conv1_pre.data[i] <= 0.0) dconv1_act.data[i] = 0.0;
    }
    Plane din(bt.in.c, bt.in.h, bt.in.w);
    conv_time_backward(bt.in, w1, dconv1_act, din, d_w1, d_b1);
    dout = std::move(din);
  }
  return loss;
}

double conv_grad_check(const ConvClassifier& model, std::span<const double> crop, int label,
                       int max_checks, double eps, uint64_t seed) {
  GradBuffer grads = make_grad_buffer(model.params());
  model.loss_and_grad(crop, label, grads);

  std::vector<std::pair<int, int64_t>> slots;
  for (int p = 0; p < static_cast<int>(model.params().size()); ++p) {
    int64_t n = model.params()[static_cast<size_t>(p)].t.size();
    for (int64_t o = 0; o < n; ++o) slots.emplace_back(p, o);
  }
  Rng rng(derive_seed(seed, "conv_gradcheck"));
  int checks = std::min<int>(max_checks, static_cast<int>(slots.size()));
  for (int i = 0; i < checks; ++i) {
    int64_t j = static_cast<int64_t>(i) +
                static_cast<int64_t>(rng.next_below(slots.size() - static_cast<size_t>(i)));
    std::swap(slots[static_cast<size_t>(i)], slots[static_cast<size_t>(j)]);
  }
  auto& params = const_cast<ConvClassifier&>(model).params();
  double max_rel = 0.0;
  for (int i = 0; i < checks; ++i) {
    auto [p, o] = slots[static_cast<size_t>(i)];
    double& w = params[static_cast<size_t>(p)].t.data[static_cast<size_t>(o)];
    const double orig = w;
    w = orig + eps;
    double lp = model.loss_only(crop, label);
    w = orig - eps;
    double lm = model.loss_only(crop, label);
    w = orig;
    double numeric = (lp - lm) / (2.0 * eps);
    double analytic = grads[static_cast<size_t>(p)].data[static_cast<size_t>(o)];
    double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
  }
  return max_rel;
}

std::vector<double> logmel_crop(const dsp::FrameMatrix& mel, int64_t start, int crop_h) {
  std::vector<double> crop(static_cast<size_t>(crop_h) * mel.cols);
  for (int y = 0; y < crop_h; ++y) {
    const double* src = mel.row(start + y);
    std::copy_n(src, mel.cols, crop.data() + static_cast<int64_t>(y) * mel.cols);
  }
  return crop;
}

}  // namespace hieraudio::nn
