#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "baton/bench.hpp"
#include "baton/error.hpp"

using namespace baton;
using namespace baton::bench;

namespace {

model::DenoiserConfig small() {
  model::DenoiserConfig c = model::DenoiserConfig::toy(57);
  c.d_model = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.n_blocks = 1;
  c.n_cond_layers = 1;
  return c;
}

template <typename F>
void expect_config_error(F&& f) {
  try {
    f();
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigError);
  }
}

}  // namespace

TEST_CASE("scaling fit: synthetic linear and quadratic laws") {
  std::vector<std::pair<double, double>> lin, quad;
  for (double t : {256.0, 512.0, 1024.0, 2048.0, 4096.0}) {
    lin.emplace_back(t, 3e-4 * t);
    quad.emplace_back(t, 2e-7 * t * t);
  }
  CHECK(std::abs(fit_scaling_exponent(lin) - 1.0) < 1e-6);
  CHECK(std::abs(fit_scaling_exponent(quad) - 2.0) < 1e-6);
  expect_config_error([] { fit_scaling_exponent({{1.0, 1.0}, {2.0, 2.0}}); });
  expect_config_error([] { fit_scaling_exponent({{4.0, 1.0}, {4.0, 2.0}, {4.0, 3.0}}); });
  expect_config_error([] { fit_scaling_exponent({{1.0, 1.0}, {2.0, 0.0}, {3.0, 3.0}}); });
}

TEST_CASE("latency: length and repetition contract") {
  const diffusion::Model m = diffusion::make_model(small(), kin::toy9(), 1);
  diffusion::SamplerConfig sc;
  sc.steps = 2;
  expect_config_error([&] { measure_latency(m, 0, 5, sc); });
  expect_config_error([&] { measure_latency(m, 16, 0, sc); });
}

TEST_CASE("latency: five deterministic repetitions have a small relative spread") {
  const diffusion::Model m = diffusion::make_model(small(), kin::toy9(), 2);
  diffusion::SamplerConfig sc;
  sc.steps = 4;
  const LatencyPoint pt = measure_latency(m, 256, 5, sc);
  CHECK(pt.reps == 5);
  CHECK_FALSE(pt.capped);
  CHECK(pt.seconds > 0.0);
  CHECK(pt.min_seconds <= pt.seconds);
  CHECK(pt.seconds <= pt.max_seconds);
  CHECK((pt.max_seconds - pt.min_seconds) / pt.seconds < 0.5);
}

TEST_CASE("suite: both backbones over the grid, exponents, CSV and JSON") {
  BenchConfig cfg;
  cfg.grid = {32, 64, 128, 256, 512};
  cfg.reps = 1;
  cfg.sampler.steps = 1;
  cfg.base = small();
  int seen = 0;
  const BenchReport r = run_bench_suite(cfg, [&](const LatencyPoint&) { ++seen; });
  CHECK(seen == 10);
  CHECK(r.points.size() == 10);
  CHECK(std::isfinite(r.exponent_bimamba));
  CHECK(std::isfinite(r.exponent_attention));
  CHECK(r.at(model::Backbone::Attention, 128).frames == 128);
  expect_config_error([&] { r.at(model::Backbone::BiMamba, 100); });

  const std::string csv = r.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
  CHECK(csv.rfind("backbone,frames,median_s", 0) == 0);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j.at("points").size() == 10);
  CHECK(j.at("exponent_attention").get<double>() == r.exponent_attention);

  BenchConfig bad = cfg;
  bad.grid = {32, 64};
  expect_config_error([&] { run_bench_suite(bad); });
}
