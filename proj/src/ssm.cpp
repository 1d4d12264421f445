#include "baton/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

namespace baton::ssm {

namespace {

constexpr double kSeriesThreshold = 1e-6;

template <typename T>
using Flat = Eigen::Array<T, Eigen::Dynamic, 1>;

// g(x) = (exp(x) - 1) / x, so phi = (exp(delta A) - 1) / A = delta * g(delta A).
// f32 reuses exp(x) outside a Taylor band around 0; f64 keeps expm1.
template <typename T>
void zoh_tables(const Flat<T>& x, Flat<T>& a_bar, Flat<T>& g) {
  a_bar = x.exp();
  if constexpr (std::is_same_v<T, float>) {
    g = (x.abs() < 0.1f).select((((x * (1.0f / 120) + 1.0f / 24) * x + 1.0f / 6) * x + 0.5f) * x + 1.0f,
                                (a_bar - 1.0f) / x);
  } else {
    g = (x.abs() < T(kSeriesThreshold)).select(x * T(0.5) + T(1), x.expm1() / x);
  }
}

// g'(x), so d phi / d A = delta^2 * g'(delta A).
template <typename T>
void zoh_dg(const Flat<T>& x, const Flat<T>& a_bar, Flat<T>& out) {
  const T cut = std::is_same_v<T, float> ? T(0.1) : T(1e-2);
  auto series =
      ((((x * T(1.0 / 840) + T(1.0 / 144)) * x + T(1.0 / 30)) * x + T(1.0 / 8)) * x + T(1.0 / 3)) * x + T(0.5);
  if constexpr (std::is_same_v<T, float>) {
    out = (x.abs() < cut).select(series, (x * a_bar - (a_bar - 1.0f)) / x.square());
  } else {
    out = (x.abs() < cut).select(series, (x * a_bar - x.expm1()) / x.square());
  }
}

}  // namespace

Discretized discretize(const MatD& delta, const MatD& a, const MatD& b) {
  const Index steps = delta.rows();
  const Index channels = delta.cols();
  const Index n = a.cols();
  require(a.rows() == channels, ErrorKind::ShapeError, "discretize: A must be channels x N");
  require(b.rows() == steps && b.cols() == n, ErrorKind::ShapeError, "discretize: B must be T x N");
  Discretized out{MatD(steps, channels * n), MatD(steps, channels * n)};
  for (Index t = 0; t < steps; ++t) {
    for (Index c = 0; c < channels; ++c) {
      const double dt = delta(t, c);
      for (Index s = 0; s < n; ++s) {
        const double x = dt * a(c, s);
        const double a_bar = std::exp(x);
        const double phi = std::abs(x) < kSeriesThreshold ? dt * (1.0 + 0.5 * x) : std::expm1(x) / a(c, s);
        out.a_bar(t, c * n + s) = a_bar;
        out.b_bar(t, c * n + s) = phi * b(t, s);
      }
    }
  }
  if (!out.a_bar.allFinite() || !out.b_bar.allFinite()) {
    fail(ErrorKind::NumericalError, "discretize produced non-finite values");
  }
  return out;
}

MatD selective_scan(const MatD& x, const Discretized& disc, const MatD& c, const MatD& d_skip) {
  const Index steps = x.rows();
  const Index channels = x.cols();
  const Index n = c.cols();
  require(c.rows() == steps, ErrorKind::ShapeError, "selective_scan: C must be T x N");
  require(disc.a_bar.rows() == steps && disc.a_bar.cols() == channels * n &&
              disc.b_bar.rows() == steps && disc.b_bar.cols() == channels * n,
          ErrorKind::ShapeError, "selective_scan: transition tables misaligned");
  require(d_skip.rows() == 1 && d_skip.cols() == channels, ErrorKind::ShapeError,
          "selective_scan: D must be 1 x channels");
  MatD y(steps, channels);
  MatD h = MatD::Zero(channels, n);
  for (Index t = 0; t < steps; ++t) {
    for (Index ch = 0; ch < channels; ++ch) {
      double acc = 0.0;
      for (Index s = 0; s < n; ++s) {
        h(ch, s) = disc.a_bar(t, ch * n + s) * h(ch, s) + disc.b_bar(t, ch * n + s) * x(t, ch);
        acc += c(t, s) * h(ch, s);
      }
      y(t, ch) = acc + d_skip(0, ch) * x(t, ch);
    }
  }
  if (!y.allFinite()) fail(ErrorKind::NumericalError, "selective_scan produced non-finite values");
  return y;
}

template <typename T>
nn::Var<T> selective_scan_op(const nn::Var<T>& u, const nn::Var<T>& delta, const nn::Var<T>& a,
                             const nn::Var<T>& b, const nn::Var<T>& c, const nn::Var<T>& d_skip) {
  const Index channels = u.cols();
  const Index n = a.cols();
  const Index tl = u.seq_len();
  require(tl > 0 && u.rows() % tl == 0, ErrorKind::ShapeError, "scan: bad sequence layout");
  require(delta.rows() == u.rows() && delta.cols() == channels, ErrorKind::ShapeError, "scan: delta shape");
  require(a.rows() == channels, ErrorKind::ShapeError, "scan: A shape");
  require(b.rows() == u.rows() && b.cols() == n && c.rows() == u.rows() && c.cols() == n,
          ErrorKind::ShapeError, "scan: B/C shape");
  require(d_skip.rows() == 1 && d_skip.cols() == channels, ErrorKind::ShapeError, "scan: D shape");

  const Index batch = u.rows() / tl;
  const Index cn = channels * n;
  const bool need = u.requires_grad() || delta.requires_grad() || a.requires_grad() ||
                    b.requires_grad() || c.requires_grad() || d_skip.requires_grad();

  const auto& uv = u.value();
  const auto& dv = delta.value();
  const auto& bv = b.value();
  const auto& cv = c.value();
  const T* av = a.value().data();
  const T* dskip = d_skip.value().data();

  nn::Mat<T> y(u.rows(), channels);
  nn::Mat<T> history;  // h_t per row, channel-major
  if (need) history.resize(u.rows(), cn);

  Flat<T> h(cn), x(cn), a_bar(cn), g(cn);
  for (Index bi = 0; bi < batch; ++bi) {
    h.setZero();
    for (Index t = 0; t < tl; ++t) {
      const Index r = bi * tl + t;
      const T* dt = dv.row(r).data();
      const T* ut = uv.row(r).data();
      const T* br = bv.row(r).data();
      const T* cr = cv.row(r).data();
      for (Index ch = 0; ch < channels; ++ch) {
        for (Index s = 0; s < n; ++s) x[ch * n + s] = av[ch * n + s] * dt[ch];
      }
      zoh_tables<T>(x, a_bar, g);
      T* yr = y.row(r).data();
      for (Index ch = 0; ch < channels; ++ch) {
        const T du = dt[ch] * ut[ch];
        T* hc = h.data() + ch * n;
        const T* ac = a_bar.data() + ch * n;
        const T* gc = g.data() + ch * n;
        T acc = 0;
        for (Index s = 0; s < n; ++s) {
          hc[s] = ac[s] * hc[s] + gc[s] * du * br[s];
          acc += hc[s] * cr[s];
        }
        yr[ch] = acc + dskip[ch] * ut[ch];
      }
      if (need) std::copy(h.data(), h.data() + cn, history.row(r).data());
    }
  }
  if (!y.allFinite()) fail(ErrorKind::NumericalError, "selective scan produced non-finite values");

  if (!need) return nn::Var<T>::constant(std::move(y), tl);

  auto node = std::make_shared<nn::Node<T>>();
  node->value = std::move(y);
  node->seq_len = tl;
  node->requires_grad = true;
  node->parents = {u.node(), delta.node(), a.node(), b.node(), c.node(), d_skip.node()};
  node->backward_fn = [history = std::move(history), batch, tl, channels, n, cn](nn::Node<T>& self) {
    auto& un = *self.parents[0];
    auto& dn = *self.parents[1];
    auto& an = *self.parents[2];
    auto& bn = *self.parents[3];
    auto& cnode = *self.parents[4];
    auto& sn = *self.parents[5];
    const T* av = an.value.data();
    const T* dskip = sn.value.data();
    nn::Mat<T> du = nn::Mat<T>::Zero(un.value.rows(), channels);
    nn::Mat<T> ddelta = nn::Mat<T>::Zero(dn.value.rows(), channels);
    nn::Mat<T> db = nn::Mat<T>::Zero(bn.value.rows(), n);
    nn::Mat<T> dc = nn::Mat<T>::Zero(cnode.value.rows(), n);
    Flat<T> da = Flat<T>::Zero(cn);
    Flat<T> dd = Flat<T>::Zero(channels);
    Flat<T> dh(cn), x(cn), a_bar(cn), g(cn), dg(cn);
    for (Index bi = 0; bi < batch; ++bi) {
      dh.setZero();
      for (Index t = tl - 1; t >= 0; --t) {
        const Index r = bi * tl + t;
        const T* dy = self.grad.row(r).data();
        const T* ut = un.value.row(r).data();
        const T* dt = dn.value.row(r).data();
        const T* br = bn.value.row(r).data();
        const T* cr = cnode.value.row(r).data();
        const T* ht = history.row(r).data();
        const T* hp = t > 0 ? history.row(r - 1).data() : nullptr;
        T* dur = du.row(r).data();
        T* ddr = ddelta.row(r).data();
        T* dbr = db.row(r).data();
        T* dcr = dc.row(r).data();
        for (Index ch = 0; ch < channels; ++ch) {
          for (Index s = 0; s < n; ++s) x[ch * n + s] = av[ch * n + s] * dt[ch];
        }
        zoh_tables<T>(x, a_bar, g);
        zoh_dg<T>(x, a_bar, dg);
        for (Index ch = 0; ch < channels; ++ch) {
          const T dyc = dy[ch], uc = ut[ch], dtc = dt[ch];
          dd[ch] += dyc * uc;
          T du_acc = dyc * dskip[ch];
          T ddt_acc = 0;
          T* dhc = dh.data() + ch * n;
          const T* ac = a_bar.data() + ch * n;
          const T* gc = g.data() + ch * n;
          const T* dgc = dg.data() + ch * n;
          const T* acol = av + ch * n;
          const T* htc = ht + ch * n;
          T* dac = da.data() + ch * n;
          for (Index s = 0; s < n; ++s) {
            dhc[s] += dyc * cr[s];
            dcr[s] += dyc * htc[s];
            // b_bar * u = dt * g * B_s * u_c
            const T phi = dtc * gc[s];
            const T dh_phi = dhc[s] * phi;
            dbr[s] += uc * dh_phi;
            du_acc += dh_phi * br[s];
            const T d_phi = dhc[s] * br[s] * uc;
            const T g_x = hp ? dhc[s] * hp[ch * n + s] * ac[s] : T(0);  // d/dx of exp(x)
            ddt_acc += g_x * acol[s] + d_phi * ac[s];
            dac[s] += g_x * dtc + d_phi * dtc * dtc * dgc[s];
            dhc[s] *= ac[s];
          }
          dur[ch] += du_acc;
          ddr[ch] += ddt_acc;
        }
      }
    }
    if (un.requires_grad) un.grad_buffer() += du;
    if (dn.requires_grad) dn.grad_buffer() += ddelta;
    if (an.requires_grad) an.grad_buffer() += Eigen::Map<const nn::Mat<T>>(da.data(), channels, n);
    if (bn.requires_grad) bn.grad_buffer() += db;
    if (cnode.requires_grad) cnode.grad_buffer() += dc;
    if (sn.requires_grad) sn.grad_buffer() += Eigen::Map<const nn::Mat<T>>(dd.data(), 1, channels);
  };
  return nn::Var<T>(std::move(node));
}

template <typename T>
nn::Var<T> mamba_block(const nn::Binding<T>& p, const std::string& prefix, const nn::Var<T>& x) {
  const auto& in_w = p(prefix + ".in_proj.weight");
  require(in_w.rows() == x.cols(), ErrorKind::ShapeError, "mamba_block: input width mismatch");
  const Index inner = in_w.cols() / 2;
  nn::Var<T> xz = nn::matmul(x, in_w);
  nn::Var<T> u = nn::slice_cols(xz, 0, inner);
  nn::Var<T> gate = nn::slice_cols(xz, inner, inner);
  u = nn::silu(nn::causal_conv1d(u, p(prefix + ".conv.weight"), p(prefix + ".conv.bias")));
  nn::Var<T> delta = nn::softplus(nn::linear(p, prefix + ".dt_proj", u));
  nn::Var<T> bmat = nn::matmul(u, p(prefix + ".b_proj.weight"));
  nn::Var<T> cmat = nn::matmul(u, p(prefix + ".c_proj.weight"));
  nn::Var<T> a = nn::neg_exp(p(prefix + ".A_log"));
  nn::Var<T> y = selective_scan_op(u, delta, a, bmat, cmat, p(prefix + ".D"));
  y = nn::mul(y, nn::silu(gate));
  return nn::matmul(y, p(prefix + ".out_proj.weight"));
}

template <typename T>
nn::Var<T> bimamba(const nn::Binding<T>& p, const std::string& prefix, const nn::Var<T>& x,
                   bool bidirectional) {
  nn::Var<T> y = mamba_block(p, prefix + ".fwd", x);
  if (bidirectional) {
    y = nn::add(y, nn::reverse_time(mamba_block(p, prefix + ".bwd", nn::reverse_time(x))));
  }
  return nn::layer_norm(p, prefix + ".norm", y);
}

using nn::uniform_init;

void init_mamba(nn::ParamSet<float>& params, const std::string& prefix, int d_model,
                const SsmConfig& cfg, std::mt19937_64& rng) {
  const Index d = d_model;
  const Index inner = static_cast<Index>(cfg.expand) * d;
  const Index n = cfg.d_state;
  const Index k = cfg.d_conv;
  params[prefix + ".in_proj.weight"] = uniform_init(d, 2 * inner, 1.0 / std::sqrt(double(d)), rng);
  params[prefix + ".conv.weight"] = uniform_init(k, inner, 1.0 / std::sqrt(double(k)), rng);
  params[prefix + ".conv.bias"] = nn::Mat<float>::Zero(1, inner);
  params[prefix + ".dt_proj.weight"] = uniform_init(inner, inner, 1.0 / std::sqrt(double(inner)), rng);
  // softplus(bias) log-uniform in [1e-3, 1e-1]
  nn::Mat<float> dt_bias(1, inner);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  for (Index c = 0; c < inner; ++c) {
    const double dt = std::exp(log_dt(rng));
    dt_bias(0, c) = static_cast<float>(dt + std::log(-std::expm1(-dt)));
  }
  params[prefix + ".dt_proj.bias"] = dt_bias;
  params[prefix + ".b_proj.weight"] = uniform_init(inner, n, 1.0 / std::sqrt(double(inner)), rng);
  params[prefix + ".c_proj.weight"] = uniform_init(inner, n, 1.0 / std::sqrt(double(inner)), rng);
  nn::Mat<float> a_log(inner, n);
  for (Index c = 0; c < inner; ++c) {
    for (Index s = 0; s < n; ++s) a_log(c, s) = static_cast<float>(std::log(double(s + 1)));
  }
  params[prefix + ".A_log"] = a_log;
  params[prefix + ".D"] = nn::Mat<float>::Ones(1, inner);
  params[prefix + ".out_proj.weight"] = uniform_init(inner, d, 1.0 / std::sqrt(double(inner)), rng);
}

void init_bimamba(nn::ParamSet<float>& params, const std::string& prefix, int d_model,
                  const SsmConfig& cfg, bool bidirectional, std::mt19937_64& rng) {
  init_mamba(params, prefix + ".fwd", d_model, cfg, rng);
  if (bidirectional) init_mamba(params, prefix + ".bwd", d_model, cfg, rng);
  params[prefix + ".norm.weight"] = nn::Mat<float>::Ones(1, d_model);
  params[prefix + ".norm.bias"] = nn::Mat<float>::Zero(1, d_model);
}

#define BATON_SSM_INSTANTIATE(T)                                                                 \
  template nn::Var<T> selective_scan_op(const nn::Var<T>&, const nn::Var<T>&, const nn::Var<T>&, \
                                        const nn::Var<T>&, const nn::Var<T>&, const nn::Var<T>&); \
  template nn::Var<T> mamba_block(const nn::Binding<T>&, const std::string&, const nn::Var<T>&);  \
  template nn::Var<T> bimamba(const nn::Binding<T>&, const std::string&, const nn::Var<T>&, bool);

BATON_SSM_INSTANTIATE(float)
BATON_SSM_INSTANTIATE(double)

}  // namespace baton::ssm
