#pragma once

// Dense reverse-mode autodiff over row-major matrices plus the fixed layer
// catalog the denoiser is assembled from.
//
// Sequence batches are stored as (B*T) x d matrices; every Var carries the
// per-sequence row count T so sequence-aware ops (conv, scan, attention,
// time reversal) can find sequence boundaries.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "baton/error.hpp"

namespace baton::nn {

using Index = Eigen::Index;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  Index seq_len = 0;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Mat<T>& grad_buffer() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  // seq_len == 0 means "one sequence spanning all rows".
  static Var constant(Mat<T> value, Index seq_len = 0);
  static Var leaf(Mat<T> value, Index seq_len = 0);

  bool defined() const { return node_ != nullptr; }
  const Mat<T>& value() const { return node_->value; }
  Mat<T> grad() const;
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index seq_len() const { return node_->seq_len; }
  Index batch() const { return rows() / seq_len(); }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const;

  // Seeds d(self)/d(self) = 1; self must be 1x1.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op node. Parents and the backward closure are kept only when some
// input requires grad.
template <typename T>
Var<T> make_op(Mat<T>&& value, Index seq_len, const std::vector<Var<T>>& inputs,
               std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->seq_len = seq_len > 0 ? seq_len : node->value.rows();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

// Forward-pass switches. Dropout is only active when train is set.
struct Context {
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

// ---- elementwise and linear algebra -------------------------------------

template <typename T> Var<T> matmul(const Var<T>& x, const Var<T>& w);
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// x + row, row is 1 x d broadcast over all rows.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& row);
template <typename T> Var<T> mul_row(const Var<T>& x, const Var<T>& row);
// B x d -> (B*T) x d, each row repeated over its sequence.
template <typename T> Var<T> broadcast_seq(const Var<T>& x, Index seq_len);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> softplus(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
// -exp(x), used for the negative-real state matrix.
template <typename T> Var<T> neg_exp(const Var<T>& x);
template <typename T> Var<T> slice_cols(const Var<T>& x, Index start, Index count);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
// Column gather; `columns` may repeat.
template <typename T> Var<T> gather_cols(const Var<T>& x, const std::vector<Index>& columns);

// ---- reductions -----------------------------------------------------------

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b);

// ---- sequence ops ---------------------------------------------------------

template <typename T> Var<T> reverse_time(const Var<T>& x);
// v_t = x_{t+1} - x_t per sequence: B*T rows -> B*(T-1) rows.
template <typename T> Var<T> temporal_diff(const Var<T>& x);
// Drops the last frame of every sequence.
template <typename T> Var<T> trim_last(const Var<T>& x);
// y_t[c] = bias[c] + sum_i kernel[i,c] * x_{t-k+1+i}[c], zero left padding.
template <typename T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias);

// ---- layers -----------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Multi-head scaled dot-product attention on projected q/k/v. q has seq_len
// Tq, k and v share seq_len Tk, and both carry the same batch count.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const Context& ctx = {});

// y = (1 + gamma_b) * x + beta_b with gamma/beta given per sequence (B x d).
template <typename T> Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

template <typename T> Var<T> dropout(const Var<T>& x, const Context& ctx);

// [sin(t w_i), cos(t w_i)], w_i = 10000^(-2i/d).
template <typename T> Mat<T> timestep_embedding(const std::vector<int>& timesteps, Index dim);

// ---- parameters -------------------------------------------------------------

template <typename T>
using ParamSet = std::map<std::string, Mat<T>>;

template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& params) {
  ParamSet<To> out;
  for (const auto& [name, value] : params) out.emplace(name, value.template cast<To>());
  return out;
}

std::size_t parameter_count(const ParamSet<float>& params);
std::uint64_t checksum(const ParamSet<float>& params);

// Initializers: weights uniform in +-1/sqrt(fan_in), biases zero, layer norm
// weight one and bias zero.
Mat<float> uniform_init(Index rows, Index cols, double bound, std::mt19937_64& rng);
void init_linear(ParamSet<float>& params, const std::string& prefix, Index d_in, Index d_out,
                 std::mt19937_64& rng, bool bias = true);
void init_zero_linear(ParamSet<float>& params, const std::string& prefix, Index d_in, Index d_out,
                      bool bias = true);
void init_layer_norm(ParamSet<float>& params, const std::string& prefix, Index dim);
void init_attention(ParamSet<float>& params, const std::string& prefix, Index dim, std::mt19937_64& rng);

// Same rows and values with a new per-sequence row count.
template <typename T> Var<T> with_seq_len(const Var<T>& x, Index seq_len);

// Graph leaves for a parameter set.
template <typename T>
class Binding {
 public:
  Binding(const ParamSet<T>& params, bool requires_grad);

  const Var<T>& operator()(const std::string& name) const;
  bool contains(const std::string& name) const { return leaves_.count(name) != 0; }
  // Accumulated gradients; zero for parameters the graph did not touch.
  ParamSet<T> grads() const;

 private:
  std::map<std::string, Var<T>> leaves_;
};

// prefix.weight / prefix.bias helpers
template <typename T>
Var<T> linear(const Binding<T>& p, const std::string& prefix, const Var<T>& x);
template <typename T>
Var<T> layer_norm(const Binding<T>& p, const std::string& prefix, const Var<T>& x);
// Output projection of multi-head attention over q_in (queries) and mem (keys/values).
template <typename T>
Var<T> attention_layer(const Binding<T>& p, const std::string& prefix, const Var<T>& q_in,
                       const Var<T>& mem, int heads, const Context& ctx);

// ---- gradient checking ------------------------------------------------------

using ScalarFn = std::function<Var<double>(const Binding<double>&)>;

// Max over probed entries of |g_a - g_n| / max(1, |g_a|, |g_n|) with central
// differences of step eps. probes_per_tensor entries are drawn per tensor.
double grad_check(const ScalarFn& f, const ParamSet<double>& params, int probes_per_tensor,
                  double eps = 1e-4, std::uint64_t seed = 0);

// Same comparison against a caller-supplied analytic gradient (used to show the
// checker catches corrupted gradients).
double grad_check_against(const ScalarFn& f, const ParamSet<double>& params,
                          const ParamSet<double>& analytic, int probes_per_tensor,
                          double eps = 1e-4, std::uint64_t seed = 0);

}  // namespace baton::nn
