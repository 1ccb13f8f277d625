#pragma once

// Training: denoising pretraining (noised history -> next pred_len frames,
// MSE) and compensation fine-tuning (reconstruct a contiguous interior gap),
// both under Adam with the constant-then-linear-decay learning rate.

#include <atomic>
#include <cstdint>
#include <future>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "vgt/checkpoint.hpp"
#include "vgt/net.hpp"
#include "vgt/noise.hpp"
#include "vgt/rng.hpp"

namespace vgt {

struct TrainConfig {
  double base_lr = 1e-4;
  std::int64_t warmup_steps = 4000;
  std::int64_t total_steps = 0;  // 0: derived from epochs and corpus size
  int batch_size = 64;
  int epochs = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 1.0;  // <= 0 disables clipping
  bool aux_denoise_loss = false;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate(std::int64_t resolved_total) const {
    if (base_lr <= 0) throw std::invalid_argument("TrainConfig: base_lr must be positive");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (warmup_steps >= resolved_total)
      throw std::invalid_argument("TrainConfig: warmup_steps must be < total_steps");
  }
};

// Constant base_lr through the warmup boundary, then linear decay to zero
// at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  const std::int64_t total = cfg.total_steps;
  if (step < 0 || step > total) throw std::out_of_range("lr_at: step outside [0, total_steps]");
  if (step <= cfg.warmup_steps) return cfg.base_lr;
  return cfg.base_lr * static_cast<double>(total - step) / static_cast<double>(total - cfg.warmup_steps);
}

// Mean over all entries of the squared difference.
template <typename T>
T mse_loss(const Mat<T>& pred, const Mat<T>& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
  T sum = 0;
  for (std::size_t i = 0; i < pred.a.size(); ++i) {
    const T d = pred.a[i] - target.a[i];
    sum += d * d;
  }
  return sum / static_cast<T>(pred.a.size());
}

template <typename T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  std::int64_t t = 0;

  explicit AdamState(const ModelConfig& cfg) : m(Parameters<T>::zeros(cfg)), v(Parameters<T>::zeros(cfg)) {}
};

template <typename T>
double grad_global_norm(const Parameters<T>& g) {
  double sq = 0;
  g.for_each([&](const Mat<T>& m) {
    for (T v : m.a) sq += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(sq);
}

template <typename T>
void clip_grads(Parameters<T>& g, double clip_norm) {
  if (clip_norm <= 0) return;
  const double norm = grad_global_norm(g);
  if (norm <= clip_norm) return;
  const T scale = static_cast<T>(clip_norm / norm);
  g.for_each([&](Mat<T>& m) {
    for (auto& v : m.a) v *= scale;
  });
}

template <typename T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads, AdamState<T>& st,
               const TrainConfig& cfg, double lr) {
  ++st.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  // Flat walk over the three aligned inventories.
  std::vector<Mat<T>*> pm, gm, mm, vm;
  params.for_each([&](Mat<T>& x) { pm.push_back(&x); });
  const_cast<Parameters<T>&>(grads).for_each([&](Mat<T>& x) { gm.push_back(&x); });
  st.m.for_each([&](Mat<T>& x) { mm.push_back(&x); });
  st.v.for_each([&](Mat<T>& x) { vm.push_back(&x); });
  for (std::size_t k = 0; k < pm.size(); ++k) {
    Mat<T>& p = *pm[k];
    const Mat<T>& g = *gm[k];
    Mat<T>& m = *mm[k];
    Mat<T>& v = *vm[k];
    for (std::size_t i = 0; i < p.a.size(); ++i) {
      const double gi = static_cast<double>(g.a[i]);
      const double mi = b1 * static_cast<double>(m.a[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v.a[i]) + (1.0 - b2) * gi * gi;
      m.a[i] = static_cast<T>(mi);
      v.a[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.a[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

struct StepRecord {
  std::int64_t step;
  double lr;
  double loss;
};

struct TrainStatus {
  bool aborted = false;
  std::string message;
};

template <typename T>
struct TrainResult {
  Parameters<T> params;
  std::vector<StepRecord> trace;
  TrainStatus status;
};

inline std::string trace_to_csv(const std::vector<StepRecord>& trace) {
  std::string out = "step,lr,loss\n";
  for (const auto& r : trace)
    out += std::to_string(r.step) + "," + fmt_double(r.lr) + "," + fmt_double(r.loss) + "\n";
  return out;
}

namespace detail {

// Per-sample loss builder: returns the loss node for one example, or -1 to
// skip it. Must be safe to call concurrently on distinct graphs.
template <typename T>
using SampleLossFn =
    std::function<int(Graph<T>&, const ParamNodeIds&, const Sample&, std::int64_t step, int slot)>;

template <typename T>
struct BatchOutcome {
  Parameters<T> grads;
  double loss_sum = 0;
  int examples = 0;
};

// Builds, runs and backpropagates the examples in [begin, end).
template <typename T>
BatchOutcome<T> run_chunk(const Parameters<T>& params, const ModelConfig& mcfg,
                          const std::vector<const Sample*>& batch, std::size_t begin, std::size_t end,
                          std::int64_t step, const SampleLossFn<T>& fn) {
  BatchOutcome<T> out{Parameters<T>::zeros(mcfg), 0.0, 0};
  for (std::size_t i = begin; i < end; ++i) {
    Graph<T> g;
    ParamNodeIds pn = load_params(g, params);
    const int loss = fn(g, pn, *batch[i], step, static_cast<int>(i));
    if (loss < 0) continue;
    g.backward(loss);
    extract_grads(g, pn, out.grads);
    out.loss_sum += static_cast<double>(g.val(loss)(0, 0));
    ++out.examples;
  }
  return out;
}

// One optimizer step over a batch. Gradients are reduced in fixed chunk
// order, so a given thread count always produces the same floats; one
// thread reduces strictly in sample order.
template <typename T>
double train_step(Parameters<T>& params, AdamState<T>& adam, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, const std::vector<const Sample*>& batch, std::int64_t step,
                  const SampleLossFn<T>& fn, Parameters<T>& grad_buf) {
  const int threads = std::max(1, tcfg.threads);
  std::vector<BatchOutcome<T>> parts;
  if (threads == 1 || batch.size() < 2) {
    parts.push_back(run_chunk(params, mcfg, batch, 0, batch.size(), step, fn));
  } else {
    const std::size_t n = batch.size();
    const std::size_t per = (n + threads - 1) / threads;
    std::vector<std::future<BatchOutcome<T>>> futs;
    for (std::size_t begin = 0; begin < n; begin += per) {
      const std::size_t end = std::min(n, begin + per);
      futs.push_back(std::async(std::launch::async, [&, begin, end] {
        return run_chunk(params, mcfg, batch, begin, end, step, fn);
      }));
    }
    for (auto& f : futs) parts.push_back(f.get());
  }

  grad_buf = Parameters<T>::zeros(mcfg);
  double loss_sum = 0;
  int examples = 0;
  std::vector<Mat<T>*> dst;
  grad_buf.for_each([&](Mat<T>& m) { dst.push_back(&m); });
  for (auto& part : parts) {
    std::size_t k = 0;
    part.grads.for_each([&](Mat<T>& m) { add_inplace(*dst[k++], m); });
    loss_sum += part.loss_sum;
    examples += part.examples;
  }
  if (examples == 0) return std::numeric_limits<double>::quiet_NaN();

  // Mean gradient over the batch.
  const T inv = T(1) / static_cast<T>(examples);
  grad_buf.for_each([&](Mat<T>& m) {
    for (auto& v : m.a) v *= inv;
  });
  clip_grads(grad_buf, tcfg.clip_norm);
  adam_step(params, grad_buf, adam, tcfg, lr_at(step, tcfg));
  return loss_sum / examples;
}

template <typename T>
TrainResult<T> train_loop(const std::vector<Sample>& corpus, const ModelConfig& mcfg, TrainConfig tcfg,
                          Parameters<T> params, const SampleLossFn<T>& fn, std::string_view order_stream) {
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  mcfg.validate();
  if (tcfg.total_steps == 0) {
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(corpus.size()) + tcfg.batch_size - 1) / tcfg.batch_size;
    tcfg.total_steps = steps_per_epoch * tcfg.epochs;
  }
  tcfg.validate(tcfg.total_steps);

  TrainResult<T> result{std::move(params), {}, {}};
  AdamState<T> adam(mcfg);
  Parameters<T> grad_buf = Parameters<T>::zeros(mcfg);
  Parameters<T> last_good = result.params;

  std::mt19937_64 order_rng = named_stream(tcfg.seed, order_stream);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // forces an initial shuffle

  for (std::int64_t step = 1; step <= tcfg.total_steps; ++step) {
    std::vector<const Sample*> batch;
    batch.reserve(tcfg.batch_size);
    for (int b = 0; b < tcfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[bounded(order_rng, i)]);
        cursor = 0;
      }
      batch.push_back(&corpus[order[cursor++]]);
    }

    last_good = result.params;
    const double loss = train_step(result.params, adam, mcfg, tcfg, batch, step, fn, grad_buf);
    if (!std::isfinite(loss)) {
      result.params = last_good;
      result.status.aborted = true;
      result.status.message = "non-finite loss at step " + std::to_string(step) +
                              "; restored last good parameters";
      break;
    }
    result.trace.push_back({step, lr_at(step, tcfg), loss});
  }
  return result;
}

}  // namespace detail

// Denoising pretraining. Histories are corrupted per sample with
// per-(step, slot) noise streams; targets stay clean (checked every
// example).
template <typename T = float>
TrainResult<T> pretrain(const std::vector<Sample>& corpus, const ModelConfig& mcfg,
                        const NoiseConfig& ncfg, const TrainConfig& tcfg) {
  ncfg.validate();
  for (const auto& s : corpus)
    if (static_cast<int>(s.frames.size()) != mcfg.hist_len + mcfg.pred_len ||
        s.meta.cfg.maxS != mcfg.maxS)
      throw std::invalid_argument("pretrain: corpus sample shape does not match model config");

  std::mt19937_64 init_rng = named_stream(tcfg.seed, "init");
  Parameters<T> params = Parameters<T>::init(mcfg, init_rng);

  auto causal = std::make_shared<BoolMask>(BoolMask::causal(mcfg.pred_len));
  detail::SampleLossFn<T> fn = [&ncfg, &mcfg, &tcfg, causal](Graph<T>& g, const ParamNodeIds& pn,
                                                             const Sample& clean, std::int64_t step,
                                                             int slot) {
    std::mt19937_64 rng = named_stream(ncfg.seed, "noise", static_cast<std::uint64_t>(step),
                                       static_cast<std::uint64_t>(slot));
    auto [noised, plan] = corrupt(clean, ncfg, rng);
    // Noise must never leak into the targets.
    for (int k = mcfg.hist_len; k < mcfg.hist_len + mcfg.pred_len; ++k)
      if (!(noised.frames[k] == clean.frames[k]))
        throw std::logic_error("pretrain: target frame was corrupted");
    return tape_teacher_loss(g, pn, noised, clean, mcfg, causal.get(), tcfg.aux_denoise_loss).loss;
  };
  return detail::train_loop(corpus, mcfg, tcfg, std::move(params), fn, "batch-pretrain");
}

// Compensation fine-tuning starting from pretrained parameters. Each
// example masks one contiguous interior gap; the loss covers only the gap
// reconstructions.
template <typename T = float>
TrainResult<T> finetune_compensation(Parameters<T> pretrained, const std::vector<Sample>& corpus,
                                     const ModelConfig& mcfg, const NoiseConfig& ncfg,
                                     const TrainConfig& tcfg) {
  ncfg.validate();
  const int seq_len = mcfg.hist_len + mcfg.pred_len;
  const int gap_len = compensation_gap_len(seq_len, ncfg.mask_rate);
  if (gap_len == 0)
    throw std::invalid_argument("finetune_compensation: mask_rate yields an empty gap");
  auto causal = std::make_shared<BoolMask>(BoolMask::causal(gap_len));

  detail::SampleLossFn<T> fn = [&mcfg, &tcfg, gap_len, seq_len, causal](Graph<T>& g, const ParamNodeIds& pn,
                                                                        const Sample& clean,
                                                                        std::int64_t step, int slot) {
    std::mt19937_64 rng = named_stream(tcfg.seed, "ft-gap", static_cast<std::uint64_t>(step),
                                       static_cast<std::uint64_t>(slot));
    const int gap_start = draw_gap_start(seq_len, gap_len, rng);
    return tape_compensation_loss(g, pn, clean, gap_start, gap_len, mcfg, causal.get());
  };
  return detail::train_loop(corpus, mcfg, tcfg, std::move(pretrained), fn, "batch-finetune");
}

}  // namespace vgt
