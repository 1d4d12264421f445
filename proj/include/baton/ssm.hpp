#pragma once

// Selective state-space model: input-dependent ZOH discretization, the
// sequential scan, the Mamba block and its bidirectional wrapper.

#include <random>
#include <string>

#include "baton/nn.hpp"

namespace baton::ssm {

using nn::Index;
using MatD = nn::Mat<double>;

struct SsmConfig {
  int d_state = 16;
  int d_conv = 4;
  int expand = 2;
};

// Per-step transition tables, row t holds channel-major (c * N + n) entries.
struct Discretized {
  MatD a_bar;
  MatD b_bar;
};

// a_bar = exp(delta * A); b_bar = ((exp(delta * A) - 1) / A) * B, with the
// series delta * B * (1 + delta * A / 2) when |delta * A| < 1e-6.
// delta: T x C (positive), A: C x N, B: T x N.
Discretized discretize(const MatD& delta, const MatD& a, const MatD& b);

// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t, y_t = C_t h_t + D * x_t, h_0 = 0.
MatD selective_scan(const MatD& x, const Discretized& disc, const MatD& c, const MatD& d_skip);

// Fused differentiable scan (discretization included). u, delta: (B*T) x C;
// a: C x N; b, c: (B*T) x N; d_skip: 1 x C.
template <typename T>
nn::Var<T> selective_scan_op(const nn::Var<T>& u, const nn::Var<T>& delta, const nn::Var<T>& a,
                             const nn::Var<T>& b, const nn::Var<T>& c, const nn::Var<T>& d_skip);

// in_proj -> (u, gate); u -> causal conv -> SiLU -> (delta, B, C) -> scan;
// out = out_proj(y * SiLU(gate)). No residual.
template <typename T>
nn::Var<T> mamba_block(const nn::Binding<T>& p, const std::string& prefix, const nn::Var<T>& x);

// layer_norm(fwd(x) + reverse(bwd(reverse(x)))). With bidirectional == false
// the backward branch is dropped (the unidirectional ablation).
template <typename T>
nn::Var<T> bimamba(const nn::Binding<T>& p, const std::string& prefix, const nn::Var<T>& x,
                   bool bidirectional = true);

void init_mamba(nn::ParamSet<float>& params, const std::string& prefix, int d_model,
                const SsmConfig& cfg, std::mt19937_64& rng);
void init_bimamba(nn::ParamSet<float>& params, const std::string& prefix, int d_model,
                  const SsmConfig& cfg, bool bidirectional, std::mt19937_64& rng);

}  // namespace baton::ssm
