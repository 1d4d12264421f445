#include "baton/bench.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>
#include <random>
#include <sstream>

namespace baton::bench {

LatencyPoint measure_latency(const diffusion::Model& m, int frames, int reps,
                             const diffusion::SamplerConfig& sampler) {
  if (frames < 1) fail(ErrorKind::ConfigError, "benchmark length must be positive");
  require(reps >= 1, ErrorKind::ConfigError, "benchmark needs at least one repetition");
  LatencyPoint pt;
  pt.frames = frames;
  pt.reps = reps;
  pt.backbone = m.config.backbone;

  std::mt19937_64 rng(sampler.seed);
  std::normal_distribution<double> normal;
  diffusion::MatD music(frames, m.config.music_dim);
  for (Eigen::Index i = 0; i < music.size(); ++i) music.data()[i] = normal(rng);

  try {
    diffusion::ddim_sample(m, {music}, frames, sampler);
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      diffusion::ddim_sample(m, {music}, frames, sampler);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    pt.seconds = n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    pt.min_seconds = times.front();
    pt.max_seconds = times.back();
  } catch (const std::bad_alloc&) {
    pt.capped = true;
    pt.seconds = pt.min_seconds = pt.max_seconds = std::numeric_limits<double>::infinity();
  }
  return pt;
}

double fit_scaling_exponent(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 3) fail(ErrorKind::ConfigError, "scaling fit needs at least 3 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(points.size());
  for (const auto& [t, s] : points) {
    require(t > 0 && s > 0 && std::isfinite(s), ErrorKind::ConfigError, "scaling points must be positive");
    const double x = std::log(t), y = std::log(s);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = n * sxx - sx * sx;
  if (!(std::abs(den) > 1e-12)) fail(ErrorKind::ConfigError, "scaling fit needs distinct lengths");
  return (n * sxy - sx * sy) / den;
}

const LatencyPoint& BenchReport::at(model::Backbone b, int frames) const {
  for (const auto& p : points) {
    if (p.backbone == b && p.frames == frames) return p;
  }
  fail(ErrorKind::ConfigError, "no benchmark point for that backbone and length");
}

std::string BenchReport::to_csv() const {
  std::ostringstream os;
  os << "backbone,frames,median_s,min_s,max_s,reps,capped\n";
  for (const auto& p : points) {
    os << model::to_string(p.backbone) << ',' << p.frames << ',' << p.seconds << ',' << p.min_seconds << ','
       << p.max_seconds << ',' << p.reps << ',' << (p.capped ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string BenchReport::to_json() const {
  nlohmann::json j;
  j["points"] = nlohmann::json::array();
  for (const auto& p : points) {
    j["points"].push_back({{"backbone", model::to_string(p.backbone)},
                           {"frames", p.frames},
                           {"median_s", p.seconds},
                           {"min_s", p.min_seconds},
                           {"max_s", p.max_seconds},
                           {"reps", p.reps},
                           {"capped", p.capped}});
  }
  j["exponent_bimamba"] = exponent_bimamba;
  j["exponent_attention"] = exponent_attention;
  return j.dump(2);
}

BenchReport run_bench_suite(const BenchConfig& cfg, const std::function<void(const LatencyPoint&)>& progress) {
  require(cfg.grid.size() >= 3, ErrorKind::ConfigError, "benchmark grid needs at least 3 lengths");
  BenchReport report;
  const kin::Skeleton skel = kin::toy9();
  for (model::Backbone b : {model::Backbone::BiMamba, model::Backbone::Attention}) {
    model::DenoiserConfig mc = cfg.base;
    mc.backbone = b;
    mc.motion_dim = skel.frame_dim() + skel.num_contacts();
    const diffusion::Model m = diffusion::make_model(mc, skel, cfg.seed);
    std::vector<std::pair<double, double>> fit;
    for (int frames : cfg.grid) {
      const LatencyPoint pt = measure_latency(m, frames, cfg.reps, cfg.sampler);
      report.points.push_back(pt);
      if (!pt.capped) fit.emplace_back(frames, pt.seconds);
      if (progress) progress(pt);
    }
    const double slope = fit.size() >= 3 ? fit_scaling_exponent(fit) : std::numeric_limits<double>::quiet_NaN();
    (b == model::Backbone::BiMamba ? report.exponent_bimamba : report.exponent_attention) = slope;
  }
  return report;
}

}  // namespace baton::bench
