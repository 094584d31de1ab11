#pragma once

// Bandwidth-constrained training: Lagrangian penalty with the epoch-driven
// multiplier schedule, epsilon-greedy full/partial exchange, and the
// straight-through selection pipeline with hand-written gradients.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/relevance.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/uncertainty.hpp"

namespace coopertrim {

// ---------------------------------------------------------------------------
// Lagrange multiplier

struct LagrangeState {
  double lambda = 0.0;
  std::uint64_t epoch = 1;  // epoch the next update_lambda call closes
  std::uint64_t itc = 5;    // initial tuning epochs with lambda = 0
  double c_target = 0.04;
  double lambda_seed = 0.01;

  friend bool operator==(const LagrangeState&, const LagrangeState&) = default;
};

// Closes epoch `state.epoch` given that epoch's selected percentage in [0, 100].
//   epoch <= itc          : lambda = 0
//   first epoch past itc  : lambda = lambda_seed, then the rules below
//   epoch % 10 == 0       : lambda *= 2^(pct / 100)
//   otherwise             : lambda *= 1 + 0.1 * floor((epoch - itc) / 10)
inline LagrangeState update_lambda(LagrangeState state, double selected_pct) {
  if (!(selected_pct >= 0.0 && selected_pct <= 100.0)) {
    throw ValidationError("update_lambda: percentage must lie in [0, 100]");
  }
  const std::uint64_t e = state.epoch;
  if (e <= state.itc) {
    state.lambda = 0.0;
  } else {
    if (state.lambda == 0.0) state.lambda = state.lambda_seed;
    if (e % 10 == 0) {
      state.lambda *= std::exp2(selected_pct / 100.0);
    } else {
      state.lambda *= 1.0 + 0.1 * static_cast<double>((e - state.itc) / 10);
    }
  }
  state.epoch = e + 1;
  return state;
}

enum class PenaltyForm { kSigned, kHinge };

inline double penalty(double fraction_selected, const LagrangeState& state, PenaltyForm form) {
  const double gap = fraction_selected - state.c_target;
  return state.lambda * (form == PenaltyForm::kSigned ? gap : std::max(0.0, gap));
}

// d penalty / d fraction
inline double penalty_slope(double fraction_selected, const LagrangeState& state, PenaltyForm form) {
  if (form == PenaltyForm::kSigned) return state.lambda;
  return fraction_selected > state.c_target ? state.lambda : 0.0;
}

inline double total_loss(double task_loss, double fraction_selected, const LagrangeState& state,
                         PenaltyForm form = PenaltyForm::kSigned) {
  return task_loss + penalty(fraction_selected, state, form);
}

// ---------------------------------------------------------------------------
// Epsilon-greedy exchange

enum class BatchKind { kFull, kPartial };

inline BatchKind epsilon_greedy_choice(Rng& rng, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("epsilon must lie in [0, 1]");
  return rng.bernoulli(epsilon) ? BatchKind::kFull : BatchKind::kPartial;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central differences per coordinate; error is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss_fn,
                                  std::span<const double> params, std::span<const double> analytic, double step) {
  if (analytic.size() != params.size()) throw DimensionError("grad_check: gradient length mismatch");
  if (!(step > 0.0)) throw ValidationError("grad_check: step must be positive");
  GradCheckResult res;
  std::vector<double> p(params.begin(), params.end());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + step;
    const double up = loss_fn(p);
    p[i] = saved - step;
    const double down = loss_fn(p);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw ValidationError("grad_check: non-finite loss at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (i == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.worst_analytic = analytic[i];
      res.worst_numeric = numeric;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Bias of the epsilon-greedy gradient estimator
//
// Synthetic problem: the full-data gradient g is known exactly; a partial
// draw returns g + b + N(0, noise_sd^2 I). The estimator picks full data with
// probability epsilon. The Monte Carlo mean minus g estimates the bias, whose
// norm should be (1 - epsilon) * |b|. The standard error reported is
// sqrt(trace(Cov) / trials), which bounds the spread of the norm estimate.

struct BiasTrialRow {
  double epsilon = 0.0;
  double measured_bias_norm = 0.0;
  double predicted_bias_norm = 0.0;
  double standard_error = 0.0;
  std::vector<double> mean_gradient;

  bool within(double sigmas) const {
    return std::abs(measured_bias_norm - predicted_bias_norm) <= sigmas * standard_error;
  }
};

inline std::vector<BiasTrialRow> proposition1_test(std::span<const double> full_gradient, std::span<const double> bias,
                                                   std::span<const double> epsilons, std::size_t trials,
                                                   std::uint64_t seed, double noise_sd = 1.0) {
  if (full_gradient.size() != bias.size()) throw DimensionError("proposition1_test: gradient/bias length mismatch");
  if (trials < 2) throw ValidationError("proposition1_test: need at least two trials");
  const std::size_t dim = bias.size();
  double bias_norm = 0.0;
  for (double b : bias) bias_norm += b * b;
  bias_norm = std::sqrt(bias_norm);

  std::vector<BiasTrialRow> rows;
  const Rng root(seed);
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    const double eps = epsilons[e];
    Rng rng = root.substream(e);
    // Welford per coordinate.
    std::vector<double> mean(dim, 0.0), m2(dim, 0.0), sample(dim);
    for (std::size_t t = 0; t < trials; ++t) {
      const bool full = epsilon_greedy_choice(rng, eps) == BatchKind::kFull;
      for (std::size_t i = 0; i < dim; ++i) {
        sample[i] = full ? full_gradient[i] : full_gradient[i] + bias[i] + noise_sd * rng.normal();
      }
      const double n = static_cast<double>(t + 1);
      for (std::size_t i = 0; i < dim; ++i) {
        const double delta = sample[i] - mean[i];
        mean[i] += delta / n;
        m2[i] += delta * (sample[i] - mean[i]);
      }
    }
    BiasTrialRow row;
    row.epsilon = eps;
    row.predicted_bias_norm = (1.0 - eps) * bias_norm;
    double norm2 = 0.0, trace = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = mean[i] - full_gradient[i];
      norm2 += d * d;
      trace += m2[i] / static_cast<double>(trials - 1);
    }
    row.measured_bias_norm = std::sqrt(norm2);
    row.standard_error = std::sqrt(trace / static_cast<double>(trials));
    row.mean_gradient = mean;
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Selection pipeline, forward and backward

// One training example: the ego's current features, the change fusion would
// make to each channel if it were exchanged (fused_full - ego), and per-cell
// labels laid out class-major like ToyTaskHead::logits.
struct TrainingSample {
  FeatureGrid ego;
  FeatureGrid exchange_delta;
  std::vector<std::uint8_t> labels;  // 2 * H * W
};

struct PipelineOptions {
  bool relaxed = false;  // soft gate, interpolated quantile, soft mask in the forward pass
  BatchKind kind = BatchKind::kPartial;
  double mask_temperature = 0.1;
  double gate_temperature = 0.05;
  ChannelReduction reduction = ChannelReduction::kMean;
  LagrangeState lagrange;
  PenaltyForm penalty_form = PenaltyForm::kSigned;
};

struct ForwardPass {
  std::vector<double> scores;
  double level = 0.0;
  double q = 0.0;
  double q_slope = 0.0;
  std::vector<double> gated;
  std::vector<std::size_t> argmax;  // kMax reduction only
  UncertaintyVector uncertainty;
  AttentionCache attention;
  RelevanceScores relevance;
  std::vector<double> soft;       // soft mask
  ChannelMask hard;               // model's own decision
  std::vector<double> mask_used;  // what the exchange actually used
  FeatureGrid fused;
  std::vector<double> logits;
  double task_loss = 0.0;
  double fraction = 0.0;  // hard fraction, or soft fraction when relaxed
  double total = 0.0;
};

namespace detail {

inline double softplus(double x) noexcept { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

inline ForwardPass pipeline_forward(const Model& model, const TrainingSample& sample, const FeatureGrid& reference,
                                    const PipelineOptions& opt) {
  const FeatureGrid& f = sample.ego;
  require_same_shape(f, reference, "pipeline_forward");
  require_same_shape(f, sample.exchange_delta, "pipeline_forward");
  const std::size_t channels = f.channels();
  const std::size_t plane = f.plane_size();
  if (sample.labels.size() != ToyTaskHead::kClasses * plane) {
    throw DimensionError("pipeline_forward: label grid size mismatch");
  }

  ForwardPass fp;
  {
    const NonconformityMap scores = l1_deviation(f, reference);
    fp.scores.assign(scores.values().begin(), scores.values().end());
  }
  fp.level = model.gate.level();
  const QuantilePair qp = quantile_pair(fp.scores, fp.level);
  fp.q = opt.relaxed ? qp.interpolated.value : qp.nearest;
  fp.q_slope = qp.interpolated.slope;

  const double tg = opt.gate_temperature;
  fp.gated.resize(fp.scores.size());
  for (std::size_t i = 0; i < fp.scores.size(); ++i) {
    const double s = fp.scores[i];
    fp.gated[i] = opt.relaxed ? soft_gate(s, fp.q, tg) : (s > fp.q ? s : 0.0);
  }

  fp.uncertainty.values.assign(channels, 0.0);
  if (opt.reduction == ChannelReduction::kMax) fp.argmax.assign(channels, 0);
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t idx = c * plane + i;
      switch (opt.reduction) {
        case ChannelReduction::kMean: acc += fp.gated[idx]; break;
        case ChannelReduction::kMax:
          if (i == 0 || fp.gated[idx] > acc) {
            acc = fp.gated[idx];
            fp.argmax[c] = idx;
          }
          break;
        case ChannelReduction::kFractionAbove:
          acc += opt.relaxed ? logistic((fp.scores[idx] - fp.q) / tg) : (fp.gated[idx] > 0.0 ? 1.0 : 0.0);
          break;
      }
    }
    if (opt.reduction != ChannelReduction::kMax) acc /= static_cast<double>(plane);
    fp.uncertainty.values[c] = acc;
  }

  fp.relevance = cross_attention_relevance(fp.uncertainty, f, model.attention, &fp.attention);
  const double tau = model.threshold.tau();
  fp.soft = soft_mask(fp.relevance, tau, opt.mask_temperature);
  fp.hard = select_channels(fp.relevance, tau);

  fp.mask_used.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (opt.kind == BatchKind::kFull) {
      fp.mask_used[c] = 1.0;
    } else {
      fp.mask_used[c] = opt.relaxed ? fp.soft[c] : (fp.hard[c] ? 1.0 : 0.0);
    }
  }

  std::vector<double> fused(f.values().begin(), f.values().end());
  const auto delta = sample.exchange_delta.values();
  for (std::size_t c = 0; c < channels; ++c) {
    const double m = fp.mask_used[c];
    if (m == 0.0) continue;
    for (std::size_t i = 0; i < plane; ++i) fused[c * plane + i] += m * delta[c * plane + i];
  }
  fp.fused = FeatureGrid(channels, f.height(), f.width(), std::move(fused));

  fp.logits = model.head.logits(fp.fused);
  double loss = 0.0;
  for (std::size_t i = 0; i < fp.logits.size(); ++i) {
    const double z = fp.logits[i];
    loss += detail::softplus(z) - (sample.labels[i] != 0 ? z : 0.0);
  }
  fp.task_loss = loss / static_cast<double>(fp.logits.size());

  if (opt.relaxed) {
    double s = 0.0;
    for (double m : fp.soft) s += m;
    fp.fraction = s / static_cast<double>(channels);
  } else {
    fp.fraction = selected_fraction(fp.hard);
  }
  fp.total = fp.task_loss + penalty(fp.fraction, opt.lagrange, opt.penalty_form);
  return fp;
}

// Accumulates d total / d params into `grad`. With opt.relaxed this is the
// exact gradient of the relaxed forward pass; otherwise it is the
// straight-through estimate (soft derivatives through the hard decisions).
inline void pipeline_backward(const Model& model, const TrainingSample& sample, const ForwardPass& fp,
                              const PipelineOptions& opt, Model& grad) {
  const FeatureGrid& f = sample.ego;
  const std::size_t channels = f.channels();
  const std::size_t plane = f.plane_size();
  const std::size_t n_logits = fp.logits.size();

  // Task head.
  std::vector<double> d_logit(n_logits);
  for (std::size_t i = 0; i < n_logits; ++i) {
    d_logit[i] = (logistic(fp.logits[i]) - (sample.labels[i] != 0 ? 1.0 : 0.0)) / static_cast<double>(n_logits);
  }
  auto gw = grad.head.map.weights_mut();
  auto gb = grad.head.map.bias_mut();
  const auto hw = model.head.map.weights();
  const auto fused = fp.fused.values();
  const auto delta = sample.exchange_delta.values();
  std::vector<double> d_mask(channels, 0.0);
  for (std::size_t k = 0; k < ToyTaskHead::kClasses; ++k) {
    const double* dz = d_logit.data() + k * plane;
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += dz[i];
    gb[k] += sum;
    for (std::size_t c = 0; c < channels; ++c) {
      const double* x = fused.data() + c * plane;
      const double* d = delta.data() + c * plane;
      double acc_w = 0.0, acc_m = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        acc_w += dz[i] * x[i];
        acc_m += dz[i] * d[i];
      }
      gw[k * channels + c] += acc_w;
      if (opt.kind == BatchKind::kPartial) d_mask[c] += hw[k * channels + c] * acc_m;
    }
  }

  // Mask and penalty through the soft-mask derivative.
  const double d_fraction = penalty_slope(fp.fraction, opt.lagrange, opt.penalty_form) / static_cast<double>(channels);
  std::vector<double> d_rel(channels);
  double d_tau = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double m = fp.soft[c];
    const double dm_dr = m * (1.0 - m) / opt.mask_temperature;
    d_rel[c] = (d_mask[c] + d_fraction) * dm_dr;
    d_tau -= d_rel[c];
  }
  grad.threshold.raw_tau += d_tau;

  const std::vector<double> d_u = cross_attention_backward(fp.uncertainty, f, model.attention, fp.attention, d_rel,
                                                           grad.attention);

  // Gate threshold q through the soft-gate derivative.
  const double tg = opt.gate_temperature;
  double d_q = 0.0;
  auto gate_sigmoid = [&](std::size_t idx) { return logistic((fp.scores[idx] - fp.q) / tg); };
  for (std::size_t c = 0; c < channels; ++c) {
    if (d_u[c] == 0.0) continue;
    switch (opt.reduction) {
      case ChannelReduction::kMean: {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t idx = c * plane + i;
          const double sg = gate_sigmoid(idx);
          acc -= fp.scores[idx] * sg * (1.0 - sg) / tg;
        }
        d_q += d_u[c] * acc / static_cast<double>(plane);
        break;
      }
      case ChannelReduction::kMax: {
        const std::size_t idx = fp.argmax[c];
        const double sg = gate_sigmoid(idx);
        d_q -= d_u[c] * fp.scores[idx] * sg * (1.0 - sg) / tg;
        break;
      }
      case ChannelReduction::kFractionAbove: {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double sg = gate_sigmoid(c * plane + i);
          acc -= sg * (1.0 - sg) / tg;
        }
        d_q += d_u[c] * acc / static_cast<double>(plane);
        break;
      }
    }
  }
  grad.gate.raw_level += d_q * fp.q_slope * model.gate.level_slope();
}

// Relaxed objective and its analytic gradient as flat vectors over
// parameter_blocks order; used by the gradient checks.
inline double relaxed_objective(const Model& model, const TrainingSample& sample, const FeatureGrid& reference,
                                PipelineOptions opt) {
  opt.relaxed = true;
  return pipeline_forward(model, sample, reference, opt).total;
}

inline GradCheckResult check_pipeline_gradients(const Model& model, const TrainingSample& sample,
                                                const FeatureGrid& reference, PipelineOptions opt, double step) {
  opt.relaxed = true;
  const ForwardPass fp = pipeline_forward(model, sample, reference, opt);
  Model grad = Model::zeros_like(model);
  pipeline_backward(model, sample, fp, opt, grad);
  const std::vector<double> analytic = flatten_parameters(grad);
  Model probe = model;
  const std::vector<double> params = flatten_parameters(probe);
  auto loss = [&](std::span<const double> p) {
    assign_parameters(probe, p);
    return pipeline_forward(probe, sample, reference, opt).total;
  };
  return grad_check(loss, params, analytic, step);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  double epsilon = 0.2;
  double learning_rate = 0.05;
  std::size_t epochs = 60;
  double temperature_initial = 0.1;
  double temperature_decay = 0.9;
  double temperature_floor = 0.01;
  double gate_temperature = 0.05;
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
  std::size_t frames_per_step = 1;  // gradient averaged over this many frames; 0 = whole episode
  std::uint64_t seed = 7;
  PenaltyForm penalty_form = PenaltyForm::kSigned;
  ChannelReduction reduction = ChannelReduction::kMean;
  std::uint64_t itc = 5;
  double lambda_seed = 0.01;
  double c_target = 0.04;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("TrainConfig: epsilon must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw ValidationError("TrainConfig: learning_rate must be positive");
    if (!(temperature_initial > 0.0 && temperature_floor > 0.0)) {
      throw ValidationError("TrainConfig: temperatures must be positive");
    }
    if (!(gate_temperature > 0.0)) throw ValidationError("TrainConfig: gate_temperature must be positive");
    if (!(c_target >= 0.0 && c_target <= 1.0)) throw ValidationError("TrainConfig: c_target must lie in [0, 1]");
  }

  double temperature(std::size_t epoch) const {
    return std::max(temperature_floor,
                    temperature_initial * std::pow(temperature_decay, static_cast<double>(epoch) - 1.0));
  }

  LagrangeState initial_lagrange() const {
    LagrangeState s;
    s.itc = itc;
    s.lambda_seed = lambda_seed;
    s.c_target = c_target;
    return s;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double task_loss = 0.0;
  double fraction_selected = 0.0;  // mean of the model's hard decisions
  double lambda = 0.0;             // multiplier in effect during the epoch
  std::size_t epsilon_draws_full = 0;
};

// An episode is a time-ordered run of samples. The temporal reference
// restarts from zero at the start of each one and then follows the model's own
// hard decisions, as it would at inference, even on full-exchange batches.
using TrainingEpisode = std::vector<TrainingSample>;

inline void scale_gradient(Model& grad, double factor) {
  for (auto block : parameter_blocks(grad)) {
    for (double& g : block) g *= factor;
  }
}

inline void sgd_step(Model& model, Model& grad, double learning_rate, double clip_norm) {
  auto g_blocks = parameter_blocks(grad);
  double norm2 = 0.0;
  for (auto block : g_blocks) {
    for (double g : block) norm2 += g * g;
  }
  double scale = learning_rate;
  const double norm = std::sqrt(norm2);
  if (clip_norm > 0.0 && norm > clip_norm) scale *= clip_norm / norm;
  auto p_blocks = parameter_blocks(model);
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    for (std::size_t i = 0; i < p_blocks[b].size(); ++i) p_blocks[b][i] -= scale * g_blocks[b][i];
  }
}

// ego + delta on the channels of `mask`: the fused grid inference would store.
inline FeatureGrid hard_mask_fusion(const TrainingSample& sample, const ChannelMask& mask) {
  const FeatureGrid& f = sample.ego;
  const std::size_t plane = f.plane_size();
  std::vector<double> fused(f.values().begin(), f.values().end());
  const auto delta = sample.exchange_delta.values();
  for (std::size_t c = 0; c < f.channels(); ++c) {
    if (!mask[c]) continue;
    for (std::size_t i = 0; i < plane; ++i) fused[c * plane + i] += delta[c * plane + i];
  }
  return FeatureGrid(f.channels(), f.height(), f.width(), std::move(fused));
}

inline EpochMetrics train_epoch(Model& model, std::span<const TrainingEpisode> episodes, const TrainConfig& cfg,
                                const LagrangeState& state, std::size_t epoch) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).substream(0xE9, epoch);
  PipelineOptions opt;
  opt.mask_temperature = cfg.temperature(epoch);
  opt.gate_temperature = cfg.gate_temperature;
  opt.reduction = cfg.reduction;
  opt.lagrange = state;
  opt.penalty_form = cfg.penalty_form;

  EpochMetrics metrics;
  metrics.epoch = epoch;
  metrics.lambda = state.lambda;
  std::size_t batches = 0;
  Model grad = Model::zeros_like(model);
  std::size_t pending = 0;
  for (std::size_t ep = 0; ep < episodes.size(); ++ep) {
    const auto& episode = episodes[ep];
    if (episode.empty()) continue;
    const std::size_t window = cfg.frames_per_step == 0 ? episode.size() : cfg.frames_per_step;
    const auto& first = episode.front().ego;
    FeatureGrid reference = FeatureGrid::zeros(first.channels(), first.height(), first.width());
    for (std::size_t t = 0; t < episode.size(); ++t) {
      opt.kind = epsilon_greedy_choice(rng, cfg.epsilon);
      const ForwardPass fp = pipeline_forward(model, episode[t], reference, opt);
      if (!std::isfinite(fp.total)) {
        throw Error("train_epoch: non-finite loss at epoch " + std::to_string(epoch) + ", episode " +
                    std::to_string(ep) + ", frame " + std::to_string(t) + " (task " + std::to_string(fp.task_loss) +
                    ", fraction " + std::to_string(fp.fraction) + ", lambda " + std::to_string(state.lambda) + ")");
      }
      pipeline_backward(model, episode[t], fp, opt, grad);
      ++pending;
      if (pending == window || t + 1 == episode.size()) {
        scale_gradient(grad, 1.0 / static_cast<double>(pending));
        sgd_step(model, grad, cfg.learning_rate, cfg.clip_norm);
        grad = Model::zeros_like(model);
        pending = 0;
      }

      metrics.task_loss += fp.task_loss;
      metrics.fraction_selected += fp.fraction;
      if (opt.kind == BatchKind::kFull) ++metrics.epsilon_draws_full;
      ++batches;
      reference = opt.kind == BatchKind::kPartial ? fp.fused : hard_mask_fusion(episode[t], fp.hard);
    }
  }
  if (batches > 0) {
    metrics.task_loss /= static_cast<double>(batches);
    metrics.fraction_selected /= static_cast<double>(batches);
  }
  return metrics;
}

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  LagrangeState lagrange;
};

inline TrainResult train(Model& model, std::span<const TrainingEpisode> episodes, const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  TrainResult result;
  result.lagrange = cfg.initial_lagrange();
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    EpochMetrics m = train_epoch(model, episodes, cfg, result.lagrange, e);
    result.lagrange = update_lambda(result.lagrange, 100.0 * m.fraction_selected);
    if (on_epoch) on_epoch(m);
    result.epochs.push_back(m);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics CSV and checkpoints

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_epoch_csv(std::ostream& os, std::span<const EpochMetrics> rows) {
  os << "epoch,task_loss,fraction_selected,lambda,epsilon_draws_full\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << format_double(r.task_loss) << ',' << format_double(r.fraction_selected) << ','
       << format_double(r.lambda) << ',' << r.epsilon_draws_full << '\n';
  }
}

// Checkpoint layout (little-endian):
//   "CTCK" | version u32 = 1
//   5 x LinearMap in order query, key, value, out, head:
//       in_dim u32 | out_dim u32 | weights f64[out*in] | bias f64[out]
//   raw_tau f64 | raw_level f64
//   lambda f64 | epoch u64 | itc u64 | c_target f64 | lambda_seed f64
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  LagrangeState lagrange;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
  wire::Writer w;
  w.magic({'C', 'T', 'C', 'K'});
  w.u32(kCheckpointVersion);
  auto f64 = [&](double v) { w.u64(std::bit_cast<std::uint64_t>(v)); };
  auto map = [&](const LinearMap& m) {
    w.u32(static_cast<std::uint32_t>(m.in_dim()));
    w.u32(static_cast<std::uint32_t>(m.out_dim()));
    for (double v : m.weights()) f64(v);
    for (double v : m.bias()) f64(v);
  };
  const Model& m = ck.model;
  map(m.attention.query_proj);
  map(m.attention.key_proj);
  map(m.attention.value_proj);
  map(m.attention.out_proj);
  map(m.head.map);
  f64(m.threshold.raw_tau);
  f64(m.gate.raw_level);
  f64(ck.lagrange.lambda);
  w.u64(ck.lagrange.epoch);
  w.u64(ck.lagrange.itc);
  f64(ck.lagrange.c_target);
  f64(ck.lagrange.lambda_seed);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic({'C', 'T', 'C', 'K'});
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DecodeError(DecodeFailure::kUnknownVersion, "checkpoint version " + std::to_string(version));
  }
  auto f64 = [&] { return std::bit_cast<double>(r.u64()); };
  auto map = [&] {
    const std::size_t in = r.u32();
    const std::size_t out = r.u32();
    if (in == 0 || out == 0 || in > (1U << 24) || out > (1U << 24)) {
      throw DecodeError(DecodeFailure::kMalformed, "implausible LinearMap dimensions");
    }
    std::vector<double> w(in * out), b(out);
    for (auto& v : w) v = f64();
    for (auto& v : b) v = f64();
    return LinearMap(in, out, std::move(w), std::move(b));
  };
  Checkpoint ck;
  ck.model.attention.query_proj = map();
  ck.model.attention.key_proj = map();
  ck.model.attention.value_proj = map();
  ck.model.attention.out_proj = map();
  ck.model.head.map = map();
  ck.model.attention.validate();
  if (ck.model.head.map.out_dim() != ToyTaskHead::kClasses) {
    throw DecodeError(DecodeFailure::kMalformed, "task head must have two outputs");
  }
  ck.model.threshold.raw_tau = f64();
  ck.model.gate.raw_level = f64();
  ck.lagrange.lambda = f64();
  ck.lagrange.epoch = r.u64();
  ck.lagrange.itc = r.u64();
  ck.lagrange.c_target = f64();
  ck.lagrange.lambda_seed = f64();
  if (r.remaining() != 0) throw DecodeError(DecodeFailure::kMalformed, "trailing bytes after checkpoint");
  return ck;
}

}  // namespace coopertrim
