#include "hieraudio/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "hieraudio/common.hpp"
#include "hieraudio/threads.hpp"

namespace hieraudio::nn {

namespace {

double clip_global_norm(GradBuffer& grads, double clip) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.data) sq += v * v;
  }
  double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    double s = clip / norm;
    for (auto& g : grads) {
      for (double& v : g.data) v *= s;
    }
  }
  return norm;
}

void check_params_finite(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    for (double v : p.t.data) {
      if (!std::isfinite(v)) {
        fail_numerical("non-finite parameter after optimizer step: " + p.name);
      }
    }
  }
}

}  // namespace

AdamW::AdamW(const std::vector<NamedParam>& params, const TrainConfig& cfg) : cfg_(cfg) {
  m_ = make_grad_buffer(params);
  v_ = make_grad_buffer(params);
}

void AdamW::step(std::vector<NamedParam>& params, GradBuffer& grads, int step_idx) {
  clip_global_norm(grads, cfg_.clip);
  const int warmup = std::max(1, cfg_.warmup);
  double sched = std::min(static_cast<double>(step_idx) / warmup,
                          std::sqrt(static_cast<double>(warmup) / step_idx));
  double lr = cfg_.lr * sched;
  last_lr_ = lr;
  double bc1 = 1.0 - std::pow(cfg_.beta1, step_idx);
  double bc2 = 1.0 - std::pow(cfg_.beta2, step_idx);
  for (size_t p = 0; p < params.size(); ++p) {
    double* w = params[p].t.data.data();
    double* g = grads[p].data.data();
    double* m = m_[p].data.data();
    double* v = v_[p].data.data();
    const bool decay = params[p].decay;
    const int64_t n = params[p].t.size();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      if (decay) upd += cfg_.weight_decay * w[i];
      w[i] -= lr * upd;
    }
  }
  check_params_finite(params);
}

TrainResult train_lm(TransformerLM& model, const std::vector<LmSequence>& data,
                     const TrainConfig& cfg) {
  require(!data.empty(), "train_lm: empty training data");
  for (const auto& s : data) {
    require(s.tokens.size() >= 2, "train_lm: sequence shorter than 2 tokens");
    require(s.mask.size() == s.tokens.size() - 1, "train_lm: mask length mismatch");
  }
  AdamW opt(model.params(), cfg);
  Rng batch_rng(derive_seed(cfg.seed, "batches"));
  TrainResult res;

  const int batch = std::max(1, cfg.batch);
  std::vector<GradBuffer> item_grads(static_cast<size_t>(batch));
  for (auto& g : item_grads) g = make_grad_buffer(model.params());
  GradBuffer total = make_grad_buffer(model.params());

  double initial_loss = -1.0;
  int diverged_streak = 0;

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<int64_t> idx(static_cast<size_t>(batch));
    for (auto& i : idx) i = static_cast<int64_t>(batch_rng.next_below(data.size()));

    std::vector<double> ce(static_cast<size_t>(batch), 0.0);
    std::vector<int64_t> cnt(static_cast<size_t>(batch), 0);
    parallel_for(batch, [&](int64_t b) {
      for (auto& t : item_grads[static_cast<size_t>(b)]) t.zero();
      const LmSequence& s = data[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      Rng drop(derive_seed(cfg.seed, "dropout",
                           static_cast<uint64_t>(step) * 1000003ULL + static_cast<uint64_t>(b)));
      ce[static_cast<size_t>(b)] = model.loss_and_grad(
          s.tokens, s.mask, item_grads[static_cast<size_t>(b)], &cnt[static_cast<size_t>(b)],
          &drop);
    });

    for (auto& t : total) t.zero();
    double ce_sum = 0.0;
    int64_t count = 0;
    for (int b = 0; b < batch; ++b) {  // fixed order accumulation
      accumulate(total, item_grads[static_cast<size_t>(b)]);
      ce_sum += ce[static_cast<size_t>(b)];
      count += cnt[static_cast<size_t>(b)];
    }
    scale(total, 1.0 / static_cast<double>(count));
    double loss = ce_sum / static_cast<double>(count);

    opt.step(model.params(), total, step);

    if (initial_loss < 0.0) initial_loss = loss;
    if (loss > 2.0 * initial_loss) {
      if (++diverged_streak >= 500) {
        fail_numerical("training diverged: loss " + std::to_string(loss) + " > 2x initial " +
                       std::to_string(initial_loss) + " for 500 consecutive steps");
      }
    } else {
      diverged_streak = 0;
    }

    if (step == 1 || step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0)) {
      res.loss_curve.emplace_back(step, loss);
    }
    res.final_loss = loss;
  }
  return res;
}

TrainResult train_conv(ConvClassifier& model, const std::vector<ConvExample>& data,
                       const TrainConfig& cfg) {
  require(!data.empty(), "train_conv: empty training data");
  AdamW opt(model.params(), cfg);
  Rng batch_rng(derive_seed(cfg.seed, "batches"));
  TrainResult res;

  const int batch = std::max(1, cfg.batch);
  std::vector<GradBuffer> item_grads(static_cast<size_t>(batch));
  for (auto& g : item_grads) g = make_grad_buffer(model.params());
  GradBuffer total = make_grad_buffer(model.params());

  double initial_loss = -1.0;
  int diverged_streak = 0;

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<int64_t> idx(static_cast<size_t>(batch));
    for (auto& i : idx) i = static_cast<int64_t>(batch_rng.next_below(data.size()));

    std::vector<double> ce(static_cast<size_t>(batch), 0.0);
    parallel_for(batch, [&](int64_t b) {
      for (auto& t : item_grads[static_cast<size_t>(b)]) t.zero();
      const ConvExample& ex = data[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      ce[static_cast<size_t>(b)] =
          model.loss_and_grad(ex.crop, ex.label, item_grads[static_cast<size_t>(b)]);
    });

    for (auto& t : total) t.zero();
    double ce_sum = 0.0;
    for (int b = 0; b < batch; ++b) {
      accumulate(total, item_grads[static_cast<size_t>(b)]);
      ce_sum += ce[static_cast<size_t>(b)];
    }
    scale(total, 1.0 / batch);
    double loss = ce_sum / batch;

    opt.step(model.params(), total, step);

    if (initial_loss < 0.0) initial_loss = loss;
    if (loss > 2.0 * initial_loss) {
      if (++diverged_streak >= 500) {
        fail_numerical("training diverged: loss " + std::to_string(loss) + " > 2x initial " +
                       std::to_string(initial_loss) + " for 500 consecutive steps");
      }
    } else {
      diverged_streak = 0;
    }
    if (step == 1 || step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0)) {
      res.loss_curve.emplace_back(step, loss);
    }
    res.final_loss = loss;
  }
  return res;
}

}  // namespace hieraudio::nn
