#pragma once

// Built-in consistency checks behind `coopertrim verify`: pipeline gradients
// against central differences, the epsilon-greedy bias law, wire roundtrips
// and the quantile gate against a sort-based reference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "coopertrim/feature_grid.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/training.hpp"
#include "coopertrim/uncertainty.hpp"

namespace coopertrim {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace self_check {

inline FeatureGrid random_grid(Rng& rng, std::size_t c, std::size_t h, std::size_t w, double sd = 1.0) {
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return FeatureGrid(c, h, w, std::move(v));
}

inline ChannelMask random_mask(Rng& rng, std::size_t channels) {
  ChannelMask m(channels);
  for (std::size_t c = 0; c < channels; ++c) m.set(c, rng.bernoulli(0.5));
  return m;
}

// Small random problem for gradient checks: C channels on an H x W grid.
struct GradProblem {
  Model model;
  TrainingSample sample;
  FeatureGrid reference;
  PipelineOptions options;
};

inline GradProblem grad_problem(std::uint64_t seed, std::size_t channels = 4, std::size_t side = 3) {
  Rng rng = Rng(seed).substream(0x6C4E);
  GradProblem p;
  p.model = Model::initialize(ModelShape{channels, side, side, 4, 4}, seed);
  // Off the kinks of the interpolated quantile, which sit at level = k / n.
  p.model.gate.raw_level = rng.uniform(-0.6, 0.6);
  p.sample.ego = random_grid(rng, channels, side, side);
  p.sample.exchange_delta = random_grid(rng, channels, side, side, 0.5);
  p.sample.labels.resize(2 * side * side);
  for (auto& l : p.sample.labels) l = rng.bernoulli(0.4) ? 1 : 0;
  p.reference = random_grid(rng, channels, side, side);
  p.options.relaxed = true;
  p.options.kind = BatchKind::kPartial;
  p.options.mask_temperature = 0.5;
  p.options.gate_temperature = 0.2;
  p.options.lagrange.lambda = 0.3;
  p.options.penalty_form = PenaltyForm::kSigned;
  return p;
}

}  // namespace self_check

inline CheckOutcome check_gradients(std::size_t seeds = 20, double step = 1e-5, double tolerance = 1e-4) {
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    const auto p = self_check::grad_problem(s);
    worst = std::max(worst, check_pipeline_gradients(p.model, p.sample, p.reference, p.options, step).max_rel_error);
  }
  return {"grad_check", worst < tolerance,
          "max relative error " + format_double(worst) + " over " + std::to_string(seeds) + " seeds"};
}

inline CheckOutcome check_bias_law(std::size_t trials = 20000) {
  const std::vector<double> g{0.5, -1.0, 2.0};
  const std::vector<double> b{1.0, 0.5, -0.75};
  const std::vector<double> eps{0.0, 0.25, 0.5, 0.75, 1.0};
  const auto rows = proposition1_test(g, b, eps, trials, 2024);
  bool ok = true;
  std::string detail;
  for (const auto& r : rows) {
    ok = ok && r.within(3.0);
    detail += "eps " + format_double(r.epsilon) + ": " + format_double(r.measured_bias_norm) + " vs " +
              format_double(r.predicted_bias_norm) + "; ";
  }
  return {"epsilon_greedy_bias", ok, detail};
}

inline CheckOutcome check_wire_roundtrips(std::size_t count = 2000) {
  Rng rng(0xC0DE);
  std::size_t failures = 0;
  const int rates[] = {32, 4, 1};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t channels = 1 + rng.below(40);
    const std::size_t side = 1 + rng.below(5);
    RequestMessage req{static_cast<std::uint32_t>(rng.next_u64()), rng.next_u64(),
                       self_check::random_mask(rng, channels),
                       WirePose::from(Pose::make(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3, 3)))};
    if (!(decode_request(encode_request(req)) == req)) ++failures;

    const FeatureGrid f = self_check::random_grid(rng, channels, side, side);
    const auto cc = CompressionConfig::from_bits(rates[rng.below(3)], rng.bernoulli(0.5));
    const ResponseMessage resp = make_response(req.agent_id, req.frame_id, req.mask, f, Pose{}, cc);
    if (!(decode_response(encode_response(resp)) == resp)) ++failures;
  }
  return {"wire_roundtrip", failures == 0,
          std::to_string(2 * count) + " messages, " + std::to_string(failures) + " mismatches"};
}

inline CheckOutcome check_quantile_gate(std::size_t arrays = 2000) {
  Rng rng(0x9A7E);
  std::size_t failures = 0;
  for (std::size_t i = 0; i < arrays; ++i) {
    const std::size_t n = 1 + rng.below(60);
    const bool ties = rng.bernoulli(0.5);
    std::vector<double> v(n);
    for (auto& x : v) x = ties ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 10.0);
    const double level = rng.uniform(0.01, 1.0);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = static_cast<std::size_t>(std::max(1.0, std::ceil(level * static_cast<double>(n) - 1e-9)));
    const double expected = sorted[std::min(k, n) - 1];
    if (quantile_threshold(v, level) != expected) ++failures;
  }
  return {"quantile_gate", failures == 0, std::to_string(arrays) + " arrays, " + std::to_string(failures) + " mismatches"};
}

inline std::vector<CheckOutcome> run_self_checks() {
  return {check_gradients(), check_bias_law(), check_wire_roundtrips(), check_quantile_gate()};
}

}  // namespace coopertrim
