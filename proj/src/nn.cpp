#include "baton/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace baton::nn {

namespace {

template <typename T>
Var<T> record(Mat<T>&& value, Index seq_len, std::vector<Var<T>> inputs,
              std::function<void(Node<T>&)> backward_fn) {
  return make_op<T>(std::move(value), seq_len, inputs, std::move(backward_fn));
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::ShapeError, std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                                    "x" + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

template <typename T>
void check_seq(const Var<T>& x, const char* op) {
  if (x.seq_len() <= 0 || x.rows() % x.seq_len() != 0) {
    fail(ErrorKind::ShapeError, std::string(op) + ": rows not divisible by sequence length");
  }
}

template <typename T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

template <typename T>
Var<T> elementwise(const Var<T>& x, T (*f)(T), T (*df)(T)) {
  Mat<T> y = x.value().unaryExpr([f](T v) { return f(v); });
  return record<T>(std::move(y), x.seq_len(), {x}, [df](Node<T>& self) {
    auto& in = *self.parents[0];
    in.grad_buffer().array() +=
        self.grad.array() * in.value.unaryExpr([df](T v) { return df(v); }).array();
  });
}

template <typename T> T silu_f(T v) { return v * sigmoid_scalar(v); }
template <typename T> T silu_df(T v) {
  const T s = sigmoid_scalar(v);
  return s * (T(1) + v * (T(1) - s));
}
template <typename T> T gelu_f(T v) {
  return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
}
template <typename T> T gelu_df(T v) {
  const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
  return cdf + v * pdf;
}
template <typename T> T softplus_f(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}
template <typename T> T softplus_df(T v) { return sigmoid_scalar(v); }
template <typename T> T sigmoid_f(T v) { return sigmoid_scalar(v); }
template <typename T> T sigmoid_df(T v) {
  const T s = sigmoid_scalar(v);
  return s * (T(1) - s);
}
template <typename T> T neg_exp_f(T v) { return -std::exp(v); }
template <typename T> T neg_exp_df(T v) { return -std::exp(v); }

}  // namespace

// ---- Var --------------------------------------------------------------------

template <typename T>
Var<T> Var<T>::constant(Mat<T> value, Index seq_len) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->seq_len = seq_len > 0 ? seq_len : node->value.rows();
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::leaf(Mat<T> value, Index seq_len) {
  Var v = constant(std::move(value), seq_len);
  v.node_->requires_grad = true;
  return v;
}

template <typename T>
Mat<T> Var<T>::grad() const {
  if (node_->grad.size() == 0) return Mat<T>::Zero(rows(), cols());
  return node_->grad;
}

template <typename T>
T Var<T>::item() const {
  require(rows() == 1 && cols() == 1, ErrorKind::ShapeError, "item() on non-scalar");
  return node_->value(0, 0);
}

template <typename T>
void Var<T>::backward() const {
  require(rows() == 1 && cols() == 1, ErrorKind::ShapeError, "backward() on non-scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()(0, 0) += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

// ---- linear algebra and elementwise ----------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  if (x.cols() != w.rows()) {
    fail(ErrorKind::ShapeError, "matmul: inner dims " + std::to_string(x.cols()) + " vs " +
                                    std::to_string(w.rows()));
  }
  Mat<T> y = x.value() * w.value();
  return record<T>(std::move(y), x.seq_len(), {x, w}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    if (xn.requires_grad) xn.grad_buffer().noalias() += self.grad * wn.value.transpose();
    if (wn.requires_grad) wn.grad_buffer().noalias() += xn.value.transpose() * self.grad;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x, w);
  return b.defined() ? add_row(y, b) : y;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Mat<T> y = a.value() + b.value();
  return record<T>(std::move(y), a.seq_len(), {a, b}, [](Node<T>& self) {
    if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
    if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Mat<T> y = a.value() - b.value();
  return record<T>(std::move(y), a.seq_len(), {a, b}, [](Node<T>& self) {
    if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
    if (wants(self, 1)) self.parents[1]->grad_buffer() -= self.grad;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Mat<T> y = a.value().cwiseProduct(b.value());
  return record<T>(std::move(y), a.seq_len(), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) an.grad_buffer() += self.grad.cwiseProduct(bn.value);
    if (bn.requires_grad) bn.grad_buffer() += self.grad.cwiseProduct(an.value);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Mat<T> y = a.value() * s;
  return record<T>(std::move(y), a.seq_len(), {a}, [s](Node<T>& self) {
    self.parents[0]->grad_buffer() += self.grad * s;
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), ErrorKind::ShapeError, "add_row: bad row");
  Mat<T> y = x.value().rowwise() + row.value().row(0);
  return record<T>(std::move(y), x.seq_len(), {x, row}, [](Node<T>& self) {
    if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
    if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad.colwise().sum();
  });
}

template <typename T>
Var<T> mul_row(const Var<T>& x, const Var<T>& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), ErrorKind::ShapeError, "mul_row: bad row");
  Mat<T> y = x.value().array().rowwise() * row.value().row(0).array();
  return record<T>(std::move(y), x.seq_len(), {x, row}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& rn = *self.parents[1];
    if (xn.requires_grad) {
      xn.grad_buffer().array() += self.grad.array().rowwise() * rn.value.row(0).array();
    }
    if (rn.requires_grad) {
      rn.grad_buffer() += self.grad.cwiseProduct(xn.value).colwise().sum();
    }
  });
}

template <typename T>
Var<T> broadcast_seq(const Var<T>& x, Index seq_len) {
  require(seq_len > 0, ErrorKind::ShapeError, "broadcast_seq: seq_len must be positive");
  const Index batch = x.rows();
  Mat<T> y(batch * seq_len, x.cols());
  for (Index b = 0; b < batch; ++b) {
    y.middleRows(b * seq_len, seq_len).rowwise() = x.value().row(b);
  }
  return record<T>(std::move(y), seq_len, {x}, [batch, seq_len](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < batch; ++b) g.row(b) += self.grad.middleRows(b * seq_len, seq_len).colwise().sum();
  });
}

template <typename T> Var<T> silu(const Var<T>& x) { return elementwise<T>(x, silu_f<T>, silu_df<T>); }
template <typename T> Var<T> gelu(const Var<T>& x) { return elementwise<T>(x, gelu_f<T>, gelu_df<T>); }
template <typename T> Var<T> softplus(const Var<T>& x) { return elementwise<T>(x, softplus_f<T>, softplus_df<T>); }
template <typename T> Var<T> sigmoid(const Var<T>& x) { return elementwise<T>(x, sigmoid_f<T>, sigmoid_df<T>); }
template <typename T> Var<T> neg_exp(const Var<T>& x) { return elementwise<T>(x, neg_exp_f<T>, neg_exp_df<T>); }

template <typename T>
Var<T> slice_cols(const Var<T>& x, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), ErrorKind::ShapeError,
          "slice_cols: range out of bounds");
  Mat<T> y = x.value().middleCols(start, count);
  return record<T>(std::move(y), x.seq_len(), {x}, [start, count](Node<T>& self) {
    self.parents[0]->grad_buffer().middleCols(start, count) += self.grad;
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::ShapeError, "concat_cols: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts[0].rows(), ErrorKind::ShapeError, "concat_cols: row mismatch");
    total += p.cols();
  }
  Mat<T> y(parts[0].rows(), total);
  Index off = 0;
  for (const auto& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return record<T>(std::move(y), parts[0].seq_len(), parts, [](Node<T>& self) {
    Index o = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->grad_buffer() += self.grad.middleCols(o, c);
      o += c;
    }
  });
}

template <typename T>
Var<T> gather_cols(const Var<T>& x, const std::vector<Index>& columns) {
  Mat<T> y(x.rows(), static_cast<Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i) {
    require(columns[i] >= 0 && columns[i] < x.cols(), ErrorKind::ShapeError,
            "gather_cols: column out of range");
    y.col(static_cast<Index>(i)) = x.value().col(columns[i]);
  }
  return record<T>(std::move(y), x.seq_len(), {x}, [columns](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < columns.size(); ++i) g.col(columns[i]) += self.grad.col(static_cast<Index>(i));
  });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  Mat<T> y(1, 1);
  y(0, 0) = x.value().sum();
  return record<T>(std::move(y), 1, {x}, [](Node<T>& self) {
    self.parents[0]->grad_buffer().array() += self.grad(0, 0);
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  require(x.value().size() > 0, ErrorKind::ShapeError, "mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mse");
  require(a.value().size() > 0, ErrorKind::ShapeError, "mse of empty tensor");
  const T n = static_cast<T>(a.value().size());
  Mat<T> y(1, 1);
  y(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  return record<T>(std::move(y), 1, {a, b}, [n](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const T g = self.grad(0, 0) * T(2) / n;
    if (an.requires_grad) an.grad_buffer() += g * (an.value - bn.value);
    if (bn.requires_grad) bn.grad_buffer() -= g * (an.value - bn.value);
  });
}

// ---- sequence ops -------------------------------------------------------------

template <typename T>
Var<T> reverse_time(const Var<T>& x) {
  check_seq(x, "reverse_time");
  const Index tl = x.seq_len();
  const Index batch = x.batch();
  Mat<T> y(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b) {
    y.middleRows(b * tl, tl) = x.value().middleRows(b * tl, tl).colwise().reverse();
  }
  return record<T>(std::move(y), tl, {x}, [tl, batch](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < batch; ++b) {
      g.middleRows(b * tl, tl) += self.grad.middleRows(b * tl, tl).colwise().reverse();
    }
  });
}

template <typename T>
Var<T> temporal_diff(const Var<T>& x) {
  check_seq(x, "temporal_diff");
  const Index tl = x.seq_len();
  require(tl >= 2, ErrorKind::InputTooShort, "temporal_diff needs at least 2 frames");
  const Index batch = x.batch();
  Mat<T> y(batch * (tl - 1), x.cols());
  for (Index b = 0; b < batch; ++b) {
    y.middleRows(b * (tl - 1), tl - 1) =
        x.value().middleRows(b * tl + 1, tl - 1) - x.value().middleRows(b * tl, tl - 1);
  }
  return record<T>(std::move(y), tl - 1, {x}, [tl, batch](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < batch; ++b) {
      const auto gb = self.grad.middleRows(b * (tl - 1), tl - 1);
      g.middleRows(b * tl + 1, tl - 1) += gb;
      g.middleRows(b * tl, tl - 1) -= gb;
    }
  });
}

template <typename T>
Var<T> trim_last(const Var<T>& x) {
  check_seq(x, "trim_last");
  const Index tl = x.seq_len();
  require(tl >= 2, ErrorKind::InputTooShort, "trim_last needs at least 2 frames");
  const Index batch = x.batch();
  Mat<T> y(batch * (tl - 1), x.cols());
  for (Index b = 0; b < batch; ++b) {
    y.middleRows(b * (tl - 1), tl - 1) = x.value().middleRows(b * tl, tl - 1);
  }
  return record<T>(std::move(y), tl - 1, {x}, [tl, batch](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < batch; ++b) {
      g.middleRows(b * tl, tl - 1) += self.grad.middleRows(b * (tl - 1), tl - 1);
    }
  });
}

template <typename T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  check_seq(x, "causal_conv1d");
  require(kernel.cols() == x.cols() && kernel.rows() >= 1, ErrorKind::ShapeError,
          "causal_conv1d: kernel must be k x channels");
  require(!bias.defined() || (bias.rows() == 1 && bias.cols() == x.cols()), ErrorKind::ShapeError,
          "causal_conv1d: bias must be 1 x channels");
  const Index tl = x.seq_len();
  const Index batch = x.batch();
  const Index k = kernel.rows();
  Mat<T> y(x.rows(), x.cols());
  if (bias.defined()) {
    y.rowwise() = bias.value().row(0);
  } else {
    y.setZero();
  }
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < tl; ++t) {
      for (Index i = 0; i < k; ++i) {
        const Index s = t - k + 1 + i;
        if (s < 0) continue;
        y.row(b * tl + t).array() += kv.row(i).array() * xv.row(b * tl + s).array();
      }
    }
  }
  std::vector<Var<T>> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return record<T>(std::move(y), tl, inputs, [tl, batch, k](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& kn = *self.parents[1];
    const auto& g = self.grad;
    for (Index b = 0; b < batch; ++b) {
      for (Index t = 0; t < tl; ++t) {
        for (Index i = 0; i < k; ++i) {
          const Index s = t - k + 1 + i;
          if (s < 0) continue;
          if (xn.requires_grad) {
            xn.grad_buffer().row(b * tl + s).array() += kn.value.row(i).array() * g.row(b * tl + t).array();
          }
          if (kn.requires_grad) {
            kn.grad_buffer().row(i).array() += xn.value.row(b * tl + s).array() * g.row(b * tl + t).array();
          }
        }
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      self.parents[2]->grad_buffer() += g.colwise().sum();
    }
  });
}

// ---- layers -------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Index d = x.cols();
  require(d >= 1, ErrorKind::ShapeError, "layer_norm: empty feature axis");
  require(gamma.cols() == d && beta.cols() == d, ErrorKind::ShapeError, "layer_norm: affine size");
  const Index n = x.rows();
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_sigma(n);
  for (Index r = 0; r < n; ++r) {
    const auto row = x.value().row(r);
    const T mu = row.mean();
    const T var = (row.array() - mu).square().mean();
    inv_sigma(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_sigma(r);
  }
  Mat<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const bool need = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (!need) return record<T>(std::move(y), x.seq_len(), {x, gamma, beta}, nullptr);
  return record<T>(std::move(y), x.seq_len(), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), d](Node<T>& self) {
                     auto& xn = *self.parents[0];
                     auto& gn = *self.parents[1];
                     auto& bn = *self.parents[2];
                     const auto& g = self.grad;
                     if (gn.requires_grad) gn.grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
                     if (bn.requires_grad) bn.grad_buffer() += g.colwise().sum();
                     if (xn.requires_grad) {
                       Mat<T> dxhat = g.array().rowwise() * gn.value.row(0).array();
                       auto& gx = xn.grad_buffer();
                       for (Index r = 0; r < g.rows(); ++r) {
                         const T m1 = dxhat.row(r).mean();
                         const T m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<T>(d);
                         gx.row(r).array() +=
                             inv_sigma(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                       }
                     }
                   });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const Context& ctx) {
  check_seq(q, "attention");
  check_seq(k, "attention");
  require(heads >= 1 && q.cols() % heads == 0, ErrorKind::ShapeError, "attention: heads must divide d");
  require(k.cols() == q.cols() && v.cols() == q.cols(), ErrorKind::ShapeError, "attention: width mismatch");
  require(k.rows() == v.rows() && k.seq_len() == v.seq_len(), ErrorKind::ShapeError,
          "attention: key/value mismatch");
  require(q.batch() == k.batch(), ErrorKind::ShapeError, "attention: batch mismatch");

  const Index tq = q.seq_len();
  const Index tk = k.seq_len();
  const Index batch = q.batch();
  const Index dh = q.cols() / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const bool need = q.requires_grad() || k.requires_grad() || v.requires_grad();
  const bool drop = ctx.train && ctx.dropout > 0.0;
  require(!drop || ctx.rng != nullptr, ErrorKind::ConfigError, "attention dropout needs an rng");
  const T keep = T(1) - static_cast<T>(ctx.dropout);

  Mat<T> out(q.rows(), q.cols());
  if (!need && !drop) {
    // Inference: query tiles keep the score block cache resident.
    const Index tile = std::max<Index>(8, std::min<Index>(64, (Index{1} << 16) / std::max<Index>(tk, 1)));
    Mat<T> st, kt, vb, qs;
    for (Index b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        kt = k.value().block(b * tk, h * dh, tk, dh).transpose();
        vb = v.value().block(b * tk, h * dh, tk, dh);
        qs = q.value().block(b * tq, h * dh, tq, dh) * sc;
        for (Index r0 = 0; r0 < tq; r0 += tile) {
          const Index rows = std::min(tile, tq - r0);
          st.noalias() = qs.middleRows(r0, rows) * kt;
          for (Index r = 0; r < rows; ++r) {
            auto row = st.row(r);
            const T mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
          }
          out.block(b * tq + r0, h * dh, rows, dh).noalias() = st * vb;
        }
      }
    }
    return record<T>(std::move(out), tq, {q, k, v}, nullptr);
  }
  std::vector<Mat<T>> probs;     // softmax rows, kept for backward
  std::vector<Mat<T>> masks;     // dropout masks already scaled by 1/keep
  if (need) probs.reserve(static_cast<std::size_t>(batch * heads));
  Mat<T> s;
  std::bernoulli_distribution bern(drop ? static_cast<double>(keep) : 1.0);
  for (Index b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * tq, h * dh, tq, dh);
      const auto kb = k.value().block(b * tk, h * dh, tk, dh);
      const auto vb = v.value().block(b * tk, h * dh, tk, dh);
      s.noalias() = (qb * kb.transpose()) * sc;
      for (Index r = 0; r < tq; ++r) {
        auto row = s.row(r);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      if (drop) {
        Mat<T> m(tq, tk);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = bern(*ctx.rng) ? T(1) / keep : T(0);
        out.block(b * tq, h * dh, tq, dh).noalias() = s.cwiseProduct(m) * vb;
        if (need) masks.push_back(std::move(m));
      } else {
        out.block(b * tq, h * dh, tq, dh).noalias() = s * vb;
      }
      if (need) probs.push_back(s);
    }
  }
  if (!need) return record<T>(std::move(out), tq, {q, k, v}, nullptr);
  return record<T>(
      std::move(out), tq, {q, k, v},
      [probs = std::move(probs), masks = std::move(masks), tq, tk, batch, heads, dh, sc](Node<T>& self) {
        auto& qn = *self.parents[0];
        auto& kn = *self.parents[1];
        auto& vn = *self.parents[2];
        Mat<T> dp, ds, pd;
        for (Index b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const std::size_t idx = static_cast<std::size_t>(b * heads + h);
            const Mat<T>& p = probs[idx];
            const auto g = self.grad.block(b * tq, h * dh, tq, dh);
            const auto qb = qn.value.block(b * tq, h * dh, tq, dh);
            const auto kb = kn.value.block(b * tk, h * dh, tk, dh);
            const auto vb = vn.value.block(b * tk, h * dh, tk, dh);
            if (masks.empty()) {
              pd = p;
            } else {
              pd = p.cwiseProduct(masks[idx]);
            }
            if (vn.requires_grad) vn.grad_buffer().block(b * tk, h * dh, tk, dh).noalias() += pd.transpose() * g;
            dp.noalias() = g * vb.transpose();
            if (!masks.empty()) dp = dp.cwiseProduct(masks[idx]);
            ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
            ds -= p.cwiseProduct((rs * Eigen::Matrix<T, 1, Eigen::Dynamic>::Ones(tk)));
            ds *= sc;
            if (qn.requires_grad) qn.grad_buffer().block(b * tq, h * dh, tq, dh).noalias() += ds * kb;
            if (kn.requires_grad) kn.grad_buffer().block(b * tk, h * dh, tk, dh).noalias() += ds.transpose() * qb;
          }
        }
      });
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  check_seq(x, "film");
  const Index tl = x.seq_len();
  const Index batch = x.batch();
  require(gamma.rows() == batch && beta.rows() == batch && gamma.cols() == x.cols() &&
              beta.cols() == x.cols(),
          ErrorKind::ShapeError, "film: modulation must be batch x d");
  Mat<T> y(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b) {
    y.middleRows(b * tl, tl) =
        (x.value().middleRows(b * tl, tl).array().rowwise() * (gamma.value().row(b).array() + T(1)))
            .rowwise() +
        beta.value().row(b).array();
  }
  return record<T>(std::move(y), tl, {x, gamma, beta}, [tl, batch](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    for (Index b = 0; b < batch; ++b) {
      const auto g = self.grad.middleRows(b * tl, tl);
      if (xn.requires_grad) {
        xn.grad_buffer().middleRows(b * tl, tl).array() += g.array().rowwise() * (gn.value.row(b).array() + T(1));
      }
      if (gn.requires_grad) {
        gn.grad_buffer().row(b) += g.cwiseProduct(xn.value.middleRows(b * tl, tl)).colwise().sum();
      }
      if (bn.requires_grad) bn.grad_buffer().row(b) += g.colwise().sum();
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, const Context& ctx) {
  if (!ctx.train || ctx.dropout <= 0.0) return x;
  require(ctx.rng != nullptr, ErrorKind::ConfigError, "dropout needs an rng");
  const T keep = T(1) - static_cast<T>(ctx.dropout);
  std::bernoulli_distribution bern(static_cast<double>(keep));
  Mat<T> m(x.rows(), x.cols());
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = bern(*ctx.rng) ? T(1) / keep : T(0);
  return mul(x, Var<T>::constant(std::move(m), x.seq_len()));
}

template <typename T>
Mat<T> timestep_embedding(const std::vector<int>& timesteps, Index dim) {
  require(dim > 0 && dim % 2 == 0, ErrorKind::ConfigError, "timestep embedding dim must be even");
  const Index half = dim / 2;
  Mat<T> out(static_cast<Index>(timesteps.size()), dim);
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double a = static_cast<double>(timesteps[r]) * w;
      out(static_cast<Index>(r), i) = static_cast<T>(std::sin(a));
      out(static_cast<Index>(r), half + i) = static_cast<T>(std::cos(a));
    }
  }
  return out;
}

// ---- parameters -----------------------------------------------------------------

std::size_t parameter_count(const ParamSet<float>& params) {
  std::size_t n = 0;
  for (const auto& [name, value] : params) n += static_cast<std::size_t>(value.size());
  return n;
}

std::uint64_t checksum(const ParamSet<float>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, value] : params) {
    mix(name.data(), name.size());
    mix(value.data(), static_cast<std::size_t>(value.size()) * sizeof(float));
  }
  return h;
}

Mat<float> uniform_init(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<float> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
  return m;
}

void init_linear(ParamSet<float>& params, const std::string& prefix, Index d_in, Index d_out,
                 std::mt19937_64& rng, bool bias) {
  params[prefix + ".weight"] = uniform_init(d_in, d_out, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  if (bias) params[prefix + ".bias"] = Mat<float>::Zero(1, d_out);
}

void init_zero_linear(ParamSet<float>& params, const std::string& prefix, Index d_in, Index d_out,
                      bool bias) {
  params[prefix + ".weight"] = Mat<float>::Zero(d_in, d_out);
  if (bias) params[prefix + ".bias"] = Mat<float>::Zero(1, d_out);
}

void init_layer_norm(ParamSet<float>& params, const std::string& prefix, Index dim) {
  params[prefix + ".weight"] = Mat<float>::Ones(1, dim);
  params[prefix + ".bias"] = Mat<float>::Zero(1, dim);
}

void init_attention(ParamSet<float>& params, const std::string& prefix, Index dim, std::mt19937_64& rng) {
  for (const char* proj : {".q_proj", ".k_proj", ".v_proj", ".o_proj"}) {
    init_linear(params, prefix + proj, dim, dim, rng);
  }
}

template <typename T>
Var<T> with_seq_len(const Var<T>& x, Index seq_len) {
  if (seq_len <= 0 || x.rows() % seq_len != 0) fail(ErrorKind::ShapeError, "with_seq_len: rows not divisible");
  Mat<T> y = x.value();
  return record<T>(std::move(y), seq_len, {x}, [](Node<T>& self) {
    self.parents[0]->grad_buffer() += self.grad;
  });
}

template <typename T>
Binding<T>::Binding(const ParamSet<T>& params, bool requires_grad) {
  for (const auto& [name, value] : params) {
    leaves_.emplace(name, requires_grad ? Var<T>::leaf(value) : Var<T>::constant(value));
  }
}

template <typename T>
const Var<T>& Binding<T>::operator()(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) fail(ErrorKind::ConfigError, "missing parameter '" + name + "'");
  return it->second;
}

template <typename T>
ParamSet<T> Binding<T>::grads() const {
  ParamSet<T> out;
  for (const auto& [name, leaf] : leaves_) out.emplace(name, leaf.grad());
  return out;
}

template <typename T>
Var<T> linear(const Binding<T>& p, const std::string& prefix, const Var<T>& x) {
  const std::string bias = prefix + ".bias";
  return p.contains(bias) ? linear(x, p(prefix + ".weight"), p(bias)) : matmul(x, p(prefix + ".weight"));
}

template <typename T>
Var<T> layer_norm(const Binding<T>& p, const std::string& prefix, const Var<T>& x) {
  return layer_norm(x, p(prefix + ".weight"), p(prefix + ".bias"));
}

template <typename T>
Var<T> attention_layer(const Binding<T>& p, const std::string& prefix, const Var<T>& q_in,
                       const Var<T>& mem, int heads, const Context& ctx) {
  Var<T> q = linear(p, prefix + ".q_proj", q_in);
  Var<T> k = linear(p, prefix + ".k_proj", mem);
  Var<T> v = linear(p, prefix + ".v_proj", mem);
  return linear(p, prefix + ".o_proj", attention(q, k, v, heads, ctx));
}

// ---- gradient checking ------------------------------------------------------------

double grad_check_against(const ScalarFn& f, const ParamSet<double>& params,
                          const ParamSet<double>& analytic, int probes_per_tensor, double eps,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet<double> work = params;
  auto eval = [&]() {
    const double v = f(Binding<double>(work, false)).item();
    if (!std::isfinite(v)) fail(ErrorKind::NumericalError, "grad_check: non-finite objective");
    return v;
  };
  double worst = 0.0;
  for (auto& [name, value] : work) {
    const Index size = value.size();
    if (size == 0) continue;
    std::vector<Index> idx(static_cast<std::size_t>(size));
    for (Index i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    const Index n = std::min<Index>(size, probes_per_tensor);
    const auto& ga_mat = analytic.at(name);
    for (Index j = 0; j < n; ++j) {
      const Index i = idx[static_cast<std::size_t>(j)];
      const double orig = value.data()[i];
      value.data()[i] = orig + eps;
      const double fp = eval();
      value.data()[i] = orig - eps;
      const double fm = eval();
      value.data()[i] = orig;
      const double gn = (fp - fm) / (2.0 * eps);
      const double ga = ga_mat.data()[i];
      const double rel = std::abs(ga - gn) / std::max({1.0, std::abs(ga), std::abs(gn)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

double grad_check(const ScalarFn& f, const ParamSet<double>& params, int probes_per_tensor, double eps,
                  std::uint64_t seed) {
  Binding<double> bound(params, true);
  Var<double> loss = f(bound);
  if (!std::isfinite(loss.item())) fail(ErrorKind::NumericalError, "grad_check: non-finite objective");
  loss.backward();
  return grad_check_against(f, params, bound.grads(), probes_per_tensor, eps, seed);
}

// ---- explicit instantiation ---------------------------------------------------------

#define BATON_NN_INSTANTIATE(T)                                                                    \
  template class Var<T>;                                                                           \
  template class Binding<T>;                                                                       \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> add(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                               \
  template Var<T> scale(const Var<T>&, T);                                                         \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul_row(const Var<T>&, const Var<T>&);                                           \
  template Var<T> broadcast_seq(const Var<T>&, Index);                                             \
  template Var<T> silu(const Var<T>&);                                                             \
  template Var<T> gelu(const Var<T>&);                                                             \
  template Var<T> softplus(const Var<T>&);                                                         \
  template Var<T> sigmoid(const Var<T>&);                                                          \
  template Var<T> neg_exp(const Var<T>&);                                                          \
  template Var<T> slice_cols(const Var<T>&, Index, Index);                                         \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                         \
  template Var<T> gather_cols(const Var<T>&, const std::vector<Index>&);                           \
  template Var<T> sum(const Var<T>&);                                                              \
  template Var<T> mean(const Var<T>&);                                                             \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                               \
  template Var<T> reverse_time(const Var<T>&);                                                     \
  template Var<T> temporal_diff(const Var<T>&);                                                    \
  template Var<T> trim_last(const Var<T>&);                                                        \
  template Var<T> causal_conv1d(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                      \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, const Context&);     \
  template Var<T> film(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> dropout(const Var<T>&, const Context&);                                          \
  template Var<T> with_seq_len(const Var<T>&, Index);                                              \
  template Mat<T> timestep_embedding<T>(const std::vector<int>&, Index);                           \
  template Var<T> linear(const Binding<T>&, const std::string&, const Var<T>&);                    \
  template Var<T> layer_norm(const Binding<T>&, const std::string&, const Var<T>&);                \
  template Var<T> attention_layer(const Binding<T>&, const std::string&, const Var<T>&,            \
                                  const Var<T>&, int, const Context&);

BATON_NN_INSTANTIATE(float)
BATON_NN_INSTANTIATE(double)

}  // namespace baton::nn
