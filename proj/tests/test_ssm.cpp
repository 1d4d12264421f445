#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "baton/bench.hpp"
#include "baton/ssm.hpp"
#include "support.hpp"

using namespace baton;
using namespace baton::ssm;
using nn::Binding;
using nn::Var;
using testing::randn;

namespace {

struct Instance {
  MatD x, delta, a, b, c, d;
};

Instance random_instance(Index t, Index ch, Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dt(0.001, 0.5), alog(-1.0, 2.0);
  Instance in{randn(t, ch, seed + 1), MatD(t, ch), MatD(ch, n), randn(t, n, seed + 2), randn(t, n, seed + 3),
              randn(1, ch, seed + 4)};
  for (Index i = 0; i < in.delta.size(); ++i) in.delta.data()[i] = dt(rng);
  for (Index i = 0; i < in.a.size(); ++i) in.a.data()[i] = -std::exp(alog(rng));
  return in;
}

// Direct per-step recurrence on separate state vectors.
MatD naive_scan(const Instance& in) {
  const Index t = in.x.rows(), ch = in.x.cols(), n = in.a.cols();
  MatD y(t, ch);
  for (Index c = 0; c < ch; ++c) {
    std::vector<double> h(static_cast<std::size_t>(n), 0.0);
    for (Index k = 0; k < t; ++k) {
      double acc = 0;
      for (Index s = 0; s < n; ++s) {
        const double a = in.a(c, s), dt = in.delta(k, c);
        const double abar = std::exp(dt * a);
        const double bbar = (abar - 1.0) / a * in.b(k, s);
        h[s] = abar * h[s] + bbar * in.x(k, c);
        acc += in.c(k, s) * h[s];
      }
      y(k, c) = acc + in.d(0, c) * in.x(k, c);
    }
  }
  return y;
}

nn::ParamSet<double> mamba_params(int d, std::uint64_t seed, bool bidirectional = false) {
  std::mt19937_64 rng(seed);
  nn::ParamSet<float> p;
  SsmConfig cfg;
  cfg.d_state = 4;
  if (bidirectional) {
    init_bimamba(p, "m", d, cfg, true, rng);
  } else {
    init_mamba(p, "m", d, cfg, rng);
  }
  auto pd = nn::cast_params<double>(p);
  // Nonzero conv bias and larger steps so every path carries signal.
  for (auto& [name, v] : pd) {
    if (name.find("conv.bias") != std::string::npos) v = randn(1, v.cols(), seed + 7, 0.2);
    if (name.find("dt_proj.bias") != std::string::npos) v.array() += 2.0;
  }
  return pd;
}

}  // namespace

TEST_CASE("discretize: scalar hand case") {
  auto d = discretize(MatD::Constant(1, 1, std::log(2.0)), MatD::Constant(1, 1, -1.0), MatD::Constant(1, 1, 1.0));
  CHECK(d.a_bar(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(d.b_bar(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("discretize: small-step limit uses the series form") {
  auto d = discretize(MatD::Constant(1, 1, 1e-9), MatD::Constant(1, 1, -2.0), MatD::Constant(1, 1, 3.0));
  CHECK(d.a_bar(0, 0) == doctest::Approx(1.0 - 2e-9).epsilon(1e-15));
  CHECK(d.b_bar(0, 0) == doctest::Approx(3e-9 * (1.0 - 1e-9)).epsilon(1e-12));
  auto z = discretize(MatD::Constant(1, 1, 1e-300), MatD::Constant(1, 1, -2.0), MatD::Constant(1, 1, 3.0));
  CHECK(z.b_bar(0, 0) >= 0.0);
  CHECK(z.b_bar(0, 0) < 1e-290);
}

TEST_CASE("discretize: negative A and positive step give a contraction") {
  const auto in = random_instance(20, 6, 16, 5);
  const auto d = discretize(in.delta, in.a, in.b);
  CHECK(d.a_bar.minCoeff() > 0.0);
  CHECK(d.a_bar.maxCoeff() < 1.0);
}

TEST_CASE("selective scan: single step with unit tables") {
  Discretized d{MatD::Ones(1, 1), MatD::Ones(1, 1)};
  const MatD y = selective_scan(MatD::Constant(1, 1, 3.0), d, MatD::Ones(1, 1), MatD::Zero(1, 1));
  CHECK(y(0, 0) == 3.0);
}

TEST_CASE("selective scan: zero A accumulates delta * B * x") {
  // With A = 0 the step table is a_bar = 1 and b_bar = delta * B.
  MatD delta(4, 1), b(4, 1), c(4, 1), x(4, 1);
  delta << 0.5, 1.0, 2.0, 0.25;
  b << 1.0, -1.0, 0.5, 2.0;
  c << 1.0, 2.0, -1.0, 0.5;
  x << 2.0, 3.0, 1.0, -4.0;
  const auto d = discretize(delta, MatD::Zero(1, 1), b);
  const MatD y = selective_scan(x, d, c, MatD::Zero(1, 1));
  // partial sums of delta*B*x: 1, -2, -1, -3
  CHECK(y(0, 0) == doctest::Approx(1.0));
  CHECK(y(1, 0) == doctest::Approx(-4.0));
  CHECK(y(2, 0) == doctest::Approx(1.0));
  CHECK(y(3, 0) == doctest::Approx(-1.5));
}

TEST_CASE("selective scan: 100 random instances match the naive recurrence") {
  std::mt19937_64 rng(11);
  double worst = 0, worst_op = 0;
  for (int i = 0; i < 100; ++i) {
    const Index t = std::uniform_int_distribution<Index>(1, 64)(rng);
    const Index ch = std::uniform_int_distribution<Index>(1, 6)(rng);
    const auto in = random_instance(t, ch, 16, 1000 + i);
    const MatD ref = naive_scan(in);
    const MatD y = selective_scan(in.x, discretize(in.delta, in.a, in.b), in.c, in.d);
    worst = std::max(worst, testing::max_abs(y, ref));
    auto op = selective_scan_op(Var<double>::constant(in.x, t), Var<double>::constant(in.delta, t),
                                Var<double>::constant(in.a), Var<double>::constant(in.b, t),
                                Var<double>::constant(in.c, t), Var<double>::constant(in.d));
    worst_op = std::max(worst_op, testing::max_abs(op.value(), ref));
  }
  CHECK(worst < 1e-10);
  CHECK(worst_op < 1e-10);
}

TEST_CASE("selective scan: batched op resets state per sequence and f32 tracks f64") {
  const Index t = 16, ch = 4;
  const auto a = random_instance(t, ch, 16, 21), b = random_instance(t, ch, 16, 22);
  auto stack = [](const MatD& p, const MatD& q) {
    MatD m(p.rows() + q.rows(), p.cols());
    m << p, q;
    return m;
  };
  const MatD x = stack(a.x, b.x), dl = stack(a.delta, b.delta), bb = stack(a.b, b.b), cc = stack(a.c, b.c);
  Instance b_with_a = b;
  b_with_a.a = a.a;
  b_with_a.d = a.d;
  auto y = selective_scan_op(Var<double>::constant(x, t), Var<double>::constant(dl, t), Var<double>::constant(a.a),
                             Var<double>::constant(bb, t), Var<double>::constant(cc, t), Var<double>::constant(a.d));
  CHECK(testing::max_abs(y.value().topRows(t), naive_scan(a)) < 1e-10);
  CHECK(testing::max_abs(y.value().bottomRows(t), naive_scan(b_with_a)) < 1e-10);
  auto yf = selective_scan_op(Var<float>::constant(x.cast<float>(), t), Var<float>::constant(dl.cast<float>(), t),
                              Var<float>::constant(a.a.cast<float>()), Var<float>::constant(bb.cast<float>(), t),
                              Var<float>::constant(cc.cast<float>(), t), Var<float>::constant(a.d.cast<float>()));
  CHECK((yf.value().cast<double>() - y.value()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("selective scan: gradients of the fused op") {
  const Index t = 6;
  const auto in = random_instance(2 * t, 3, 4, 31);
  nn::ParamSet<double> p{{"x", in.x}, {"delta", in.delta}, {"a", in.a}, {"b", in.b}, {"c", in.c}, {"d", in.d}};
  // Include tiny steps so the series branches are exercised.
  p["delta"](0, 0) = 1e-5;
  p["delta"](3, 1) = 1e-3;
  const MatD w = randn(2 * t, 3, 32);
  const double err = nn::grad_check(
      [&](const Binding<double>& q) {
        auto y = selective_scan_op(nn::with_seq_len(q("x"), t), nn::with_seq_len(q("delta"), t), q("a"),
                                   nn::with_seq_len(q("b"), t), nn::with_seq_len(q("c"), t), q("d"));
        return nn::sum(nn::mul(y, Var<double>::constant(w)));
      },
      p, 30, 1e-6);
  CHECK(err < 1e-4);
}

TEST_CASE("selective scan: long sequence stays bounded") {
  const auto in = random_instance(4096, 4, 16, 41);
  const MatD y = selective_scan(in.x, discretize(in.delta, in.a, in.b), in.c, in.d);
  CHECK(y.allFinite());
  CHECK(y.cwiseAbs().maxCoeff() < 1e3);
}

TEST_CASE("selective scan: runtime grows linearly in T") {
  std::vector<std::pair<double, double>> pts;
  for (Index t : {512, 1024, 2048, 4096, 8192}) {
    const auto in = random_instance(t, 16, 16, 51);
    std::vector<double> times;
    for (int r = 0; r < 5; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto y = selective_scan_op(Var<double>::constant(in.x, t), Var<double>::constant(in.delta, t),
                                 Var<double>::constant(in.a), Var<double>::constant(in.b, t),
                                 Var<double>::constant(in.c, t), Var<double>::constant(in.d));
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      CHECK(y.value().allFinite());
    }
    std::sort(times.begin(), times.end());
    pts.emplace_back(static_cast<double>(t), times[2]);
  }
  const double slope = bench::fit_scaling_exponent(pts);
  MESSAGE("scan log-log slope " << slope);
  CHECK(slope >= 0.9);
  CHECK(slope <= 1.3);
}

TEST_CASE("selective scan: shape errors") {
  const auto in = random_instance(8, 3, 4, 61);
  try {
    selective_scan_op(Var<double>::constant(in.x, 8), Var<double>::constant(in.delta, 8),
                      Var<double>::constant(MatD(in.a.topRows(2))), Var<double>::constant(in.b, 8),
                      Var<double>::constant(in.c, 8), Var<double>::constant(in.d));
    FAIL("expected ShapeError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("mamba block: zero input with zero conv bias gives zero output") {
  auto p = mamba_params(6, 71);
  p["m.conv.bias"].setZero();
  Binding<double> bind(p, false);
  auto y = mamba_block(bind, "m", Var<double>::constant(MatD::Zero(10, 6), 10));
  CHECK(y.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mamba block: causal in time") {
  const auto p = mamba_params(6, 72);
  Binding<double> bind(p, false);
  const Index t = 12, k = 5;
  MatD x = randn(t, 6, 73);
  const MatD y0 = mamba_block(bind, "m", Var<double>::constant(x, t)).value();
  x(k, 2) += 0.7;
  const MatD y1 = mamba_block(bind, "m", Var<double>::constant(x, t)).value();
  const MatD diff = (y1 - y0).cwiseAbs();
  CHECK(diff.topRows(k).maxCoeff() == 0.0);
  for (Index r = k; r < t; ++r) CHECK(diff.row(r).maxCoeff() > 0.0);
}

TEST_CASE("mamba block: gradient check") {
  auto p = mamba_params(4, 74);
  const Index t = 5;
  p["x"] = randn(2 * t, 4, 75);
  const MatD w = randn(2 * t, 4, 76);
  const double err = nn::grad_check(
      [&](const Binding<double>& q) {
        auto y = mamba_block(q, "m", nn::with_seq_len(q("x"), t));
        return nn::sum(nn::mul(y, Var<double>::constant(w)));
      },
      p, 12);
  CHECK(err < 1e-4);
}

TEST_CASE("bimamba: backward branch is the forward code on reversed input") {
  const auto p = mamba_params(6, 81, true);
  Binding<double> bind(p, false);
  const Index t = 9;
  const MatD x = randn(t, 6, 82);
  auto xv = Var<double>::constant(x, t);
  const MatD fwd = mamba_block(bind, "m.fwd", xv).value();
  const MatD bwd = nn::reverse_time(mamba_block(bind, "m.bwd", nn::reverse_time(xv))).value();
  const MatD expect =
      nn::layer_norm(bind, "m.norm", Var<double>::constant(MatD(fwd + bwd), t)).value();
  CHECK(testing::max_abs(bimamba(bind, "m", xv).value(), expect) == 0.0);
}

TEST_CASE("bimamba: swapping directions and reversing time reverses the output") {
  const auto p = mamba_params(6, 83, true);
  nn::ParamSet<double> swapped;
  for (const auto& [name, v] : p) {
    std::string n = name;
    if (n.rfind("m.fwd.", 0) == 0) n = "m.bwd." + n.substr(6);
    else if (n.rfind("m.bwd.", 0) == 0) n = "m.fwd." + n.substr(6);
    swapped[n] = v;
  }
  Binding<double> b1(p, false), b2(swapped, false);
  const Index t = 11;
  auto x = Var<double>::constant(randn(t, 6, 84), t);
  const MatD y = bimamba(b1, "m", x).value();
  const MatD yr = bimamba(b2, "m", nn::reverse_time(x)).value();
  CHECK(testing::max_abs(nn::reverse_time(Var<double>::constant(yr, t)).value(), y) < 1e-6);
}

TEST_CASE("bimamba: every output frame sees a single-frame perturbation") {
  const auto p = mamba_params(6, 85, true);
  Binding<double> bind(p, false);
  const Index t = 10;
  MatD x = randn(t, 6, 86);
  const MatD y0 = bimamba(bind, "m", Var<double>::constant(x, t)).value();
  x(4, 1) += 0.5;
  const MatD y1 = bimamba(bind, "m", Var<double>::constant(x, t)).value();
  for (Index r = 0; r < t; ++r) CHECK((y1 - y0).row(r).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("bimamba: unidirectional flag keeps only the forward branch") {
  std::mt19937_64 rng(87);
  nn::ParamSet<float> pf;
  init_bimamba(pf, "m", 6, SsmConfig{}, false, rng);
  CHECK(pf.count("m.bwd.in_proj.weight") == 0);
  Binding<double> bind(nn::cast_params<double>(pf), false);
  const Index t = 8;
  MatD x = randn(t, 6, 88);
  const MatD y0 = bimamba(bind, "m", Var<double>::constant(x, t), false).value();
  x(5, 0) += 1.0;
  const MatD y1 = bimamba(bind, "m", Var<double>::constant(x, t), false).value();
  CHECK((y1 - y0).topRows(5).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("init: A strictly negative and step bias in range") {
  std::mt19937_64 rng(89);
  nn::ParamSet<float> p;
  init_mamba(p, "m", 8, SsmConfig{}, rng);
  CHECK(p.at("m.A_log").cols() == 16);
  CHECK(p.at("m.conv.weight").rows() == 4);
  CHECK(p.at("m.in_proj.weight").cols() == 32);
  for (Index i = 0; i < p.at("m.dt_proj.bias").size(); ++i) {
    const double b = p.at("m.dt_proj.bias").data()[i];
    const double sp = std::log1p(std::exp(b));
    CHECK(sp >= 1e-3 * 0.999);
    CHECK(sp <= 1e-1 * 1.001);
  }
}
