#pragma once

// Sampling latency versus sequence length for the two sequence-mixer backbones.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "baton/diffusion.hpp"

namespace baton::bench {

struct LatencyPoint {
  int frames = 0;
  double seconds = 0;  // median over reps
  double min_seconds = 0;
  double max_seconds = 0;
  int reps = 0;
  model::Backbone backbone = model::Backbone::BiMamba;
  bool capped = false;  // allocation failed; timing unavailable
};

// Median wall time of full guided DDIM sampling of one sequence, after one
// untimed warm-up run. Music is fixed pseudo-random features.
LatencyPoint measure_latency(const diffusion::Model& m, int frames, int reps,
                             const diffusion::SamplerConfig& sampler);

// Least-squares slope of log(time) against log(frames).
double fit_scaling_exponent(const std::vector<std::pair<double, double>>& points);

struct BenchConfig {
  std::vector<int> grid = {256, 512, 1024, 2048, 4096};
  int reps = 5;
  diffusion::SamplerConfig sampler;
  model::DenoiserConfig base;  // backbone field is overridden per run
  std::uint64_t seed = 42;
};

struct BenchReport {
  std::vector<LatencyPoint> points;
  double exponent_bimamba = 0;
  double exponent_attention = 0;

  const LatencyPoint& at(model::Backbone b, int frames) const;
  std::string to_csv() const;
  std::string to_json() const;
};

// Builds randomly initialized models for both backbones on the toy skeleton
// and measures every grid length.
BenchReport run_bench_suite(const BenchConfig& cfg,
                            const std::function<void(const LatencyPoint&)>& progress = {});

}  // namespace baton::bench
