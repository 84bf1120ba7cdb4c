#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "vitdet/tensor.hpp"

// Differentiable kernels as free functions over Tensor<S>. Eigen carries the
// matmul-shaped work (matmul, conv via im2col); everything else is plain
// loops. Each op writes a fresh output tensor and, when grad tracking is on,
// attaches a closure that scatters the output grad back to its parents.

namespace vitdet {

namespace detail {

template <typename S>
using ConstMat = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using MutMat = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename S>
void check_2d(const Tensor<S>& t, const char* op) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor, got " +
                                shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<S> out(a.values());
  for (int64_t i = 0; i < b.size(); ++i) out[i] += b.data()[i];
  Tensor<S> y = Tensor<S>::from_values(a.shape(), std::move(out));
  attach_backward(y, {a, b}, [](detail::TensorNode<S>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& parent = *self.parents[p];
      if (!parent.requires_grad) continue;
      auto& g = parent.grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<S> out(a.values());
  for (int64_t i = 0; i < b.size(); ++i) out[i] -= b.data()[i];
  Tensor<S> y = Tensor<S>::from_values(a.shape(), std::move(out));
  attach_backward(y, {a, b}, [](detail::TensorNode<S>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<S> out(a.values());
  for (int64_t i = 0; i < b.size(); ++i) out[i] *= b.data()[i];
  Tensor<S> y = Tensor<S>::from_values(a.shape(), std::move(out));
  attach_backward(y, {a, b}, [](detail::TensorNode<S>& self) {
    const auto& av = self.parents[0]->values;
    const auto& bv = self.parents[1]->values;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  std::vector<S> out(x.values());
  for (auto& v : out) v += c;
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x}, [](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
  return y;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  std::vector<S> out(x.values());
  for (auto& v : out) v *= c;
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x}, [c](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
  return y;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return mul_scalar(x, S(-1));
}

// x: (N, D), v: (D); adds v to every row.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_2d(x, "add_rowvec");
  if (v.ndim() != 1 || v.dim(0) != x.dim(1)) {
    throw std::invalid_argument("add_rowvec: vector shape " + shape_str(v.shape()) +
                                " does not match columns of " + shape_str(x.shape()));
  }
  const int64_t n = x.dim(0), d = x.dim(1);
  std::vector<S> out(x.values());
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] += v.data()[c];
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x, v}, [n, d](detail::TensorNode<S>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<S> y = Tensor<S>::scalar(acc);
  attach_backward(y, {x}, [](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const S go = self.grad[0];
    for (auto& v : g) v += go;
  });
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return mul_scalar(sum(x), S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// activations and normalization

template <typename S>
S gelu_scalar(S x) {
  // Exact Gaussian CDF form: x * Phi(x).
  return x * S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S phi_cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  const S phi_pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);
  return phi_cdf + x * phi_pdf;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = gelu_scalar(v);
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x}, [](detail::TensorNode<S>& self) {
    const auto& xv = self.parents[0]->values;
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * gelu_grad_scalar(xv[i]);
  });
  return y;
}

// Softmax over the last dimension; leading dimensions index the rows.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  if (x.ndim() < 1) throw std::invalid_argument("softmax_rows: scalar input");
  const int64_t d = x.dim(x.ndim() - 1);
  const int64_t rows = x.size() / d;
  std::vector<S> out(static_cast<size_t>(x.size()));
  for (int64_t r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * d;
    S* yi = out.data() + r * d;
    S m = xi[0];
    for (int64_t c = 1; c < d; ++c) m = std::max(m, xi[c]);
    S z = 0;
    for (int64_t c = 0; c < d; ++c) {
      yi[c] = std::exp(xi[c] - m);
      z += yi[c];
    }
    for (int64_t c = 0; c < d; ++c) yi[c] /= z;
  }
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x}, [rows, d](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const S* yi = self.values.data() + r * d;
      const S* go = self.grad.data() + r * d;
      S dot = 0;
      for (int64_t c = 0; c < d; ++c) dot += go[c] * yi[c];
      for (int64_t c = 0; c < d; ++c) g[r * d + c] += yi[c] * (go[c] - dot);
    }
  });
  return y;
}

// Normalizes each row (last dimension) to zero mean, unit population
// variance, then applies gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  const int64_t d = x.dim(x.ndim() - 1);
  if (gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(d) +
                                " elements");
  }
  const int64_t rows = x.size() / d;
  std::vector<S> out(static_cast<size_t>(x.size()));
  std::vector<S> invstd(static_cast<size_t>(rows));
  std::vector<S> mu(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * d;
    S m = 0;
    for (int64_t c = 0; c < d; ++c) m += xi[c];
    m /= static_cast<S>(d);
    S var = 0;
    for (int64_t c = 0; c < d; ++c) var += (xi[c] - m) * (xi[c] - m);
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    mu[r] = m;
    invstd[r] = is;
    for (int64_t c = 0; c < d; ++c)
      out[r * d + c] = (xi[c] - m) * is * gain.data()[c] + bias.data()[c];
  }
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(y, {x, gain, bias},
                  [rows, d, mu = std::move(mu), invstd = std::move(invstd)](
                      detail::TensorNode<S>& self) {
    const auto& xv = self.parents[0]->values;
    const auto& gv = self.parents[1]->values;
    for (int64_t r = 0; r < rows; ++r) {
      const S* xi = xv.data() + r * d;
      const S* go = self.grad.data() + r * d;
      const S is = invstd[r], m = mu[r];
      if (self.parents[1]->requires_grad) {
        auto& gg = self.parents[1]->grad_buffer();
        for (int64_t c = 0; c < d; ++c) gg[c] += go[c] * (xi[c] - m) * is;
      }
      if (self.parents[2]->requires_grad) {
        auto& gb = self.parents[2]->grad_buffer();
        for (int64_t c = 0; c < d; ++c) gb[c] += go[c];
      }
      if (self.parents[0]->requires_grad) {
        auto& gx = self.parents[0]->grad_buffer();
        // d/dx of (xhat * gain): mean-centered projection form.
        S sum_h = 0, sum_hx = 0;
        for (int64_t c = 0; c < d; ++c) {
          const S h = go[c] * gv[c];
          sum_h += h;
          sum_hx += h * (xi[c] - m) * is;
        }
        const S inv_d = S(1) / static_cast<S>(d);
        for (int64_t c = 0; c < d; ++c) {
          const S h = go[c] * gv[c];
          const S xhat = (xi[c] - m) * is;
          gx[r * d + c] += is * (h - inv_d * sum_h - xhat * inv_d * sum_hx);
        }
      }
    }
  });
  return y;
}

template <typename S>
struct BatchNormState {
  std::vector<S> running_mean;
  std::vector<S> running_var;
  explicit BatchNormState(int64_t channels = 0)
      : running_mean(static_cast<size_t>(channels), S(0)),
        running_var(static_cast<size_t>(channels), S(1)) {}
};

// Channels-last batch norm: the last dimension indexes channels, everything
// else is the reduction set. In training mode batch statistics are used and
// the running estimates updated; with a single reduction element the batch
// variance is identically zero, so the op falls back to the running
// statistics even when training.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     BatchNormState<S>& state, bool training, double momentum = 0.1,
                     double eps = 1e-5) {
  const int64_t c = x.dim(x.ndim() - 1);
  if (gamma.size() != c || beta.size() != c ||
      static_cast<int64_t>(state.running_mean.size()) != c) {
    throw std::invalid_argument("batch_norm: channel mismatch for input " + shape_str(x.shape()));
  }
  const int64_t m = x.size() / c;
  const bool use_batch_stats = training && m > 1;

  std::vector<S> mu(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
  if (use_batch_stats) {
    std::vector<S> var(static_cast<size_t>(c), S(0));
    for (int64_t ch = 0; ch < c; ++ch) mu[ch] = S(0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t ch = 0; ch < c; ++ch) mu[ch] += x.data()[i * c + ch];
    for (int64_t ch = 0; ch < c; ++ch) mu[ch] /= static_cast<S>(m);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        const S dv = x.data()[i * c + ch] - mu[ch];
        var[ch] += dv * dv;
      }
    for (int64_t ch = 0; ch < c; ++ch) {
      var[ch] /= static_cast<S>(m);
      invstd[ch] = S(1) / std::sqrt(var[ch] + static_cast<S>(eps));
      state.running_mean[ch] =
          (S(1) - static_cast<S>(momentum)) * state.running_mean[ch] +
          static_cast<S>(momentum) * mu[ch];
      state.running_var[ch] = (S(1) - static_cast<S>(momentum)) * state.running_var[ch] +
                              static_cast<S>(momentum) * var[ch];
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mu[ch] = state.running_mean[ch];
      invstd[ch] = S(1) / std::sqrt(state.running_var[ch] + static_cast<S>(eps));
    }
  }

  std::vector<S> out(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t idx = i * c + ch;
      out[idx] = (x.data()[idx] - mu[ch]) * invstd[ch] * gamma.data()[ch] + beta.data()[ch];
    }
  Tensor<S> y = Tensor<S>::from_values(x.shape(), std::move(out));
  attach_backward(
      y, {x, gamma, beta},
      [m, c, use_batch_stats, mu = std::move(mu), invstd = std::move(invstd)](
          detail::TensorNode<S>& self) {
        const auto& xv = self.parents[0]->values;
        const auto& gv = self.parents[1]->values;
        std::vector<S> sum_g(static_cast<size_t>(c), S(0));
        std::vector<S> sum_gx(static_cast<size_t>(c), S(0));
        for (int64_t i = 0; i < m; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t idx = i * c + ch;
            const S xhat = (xv[idx] - mu[ch]) * invstd[ch];
            sum_g[ch] += self.grad[idx];
            sum_gx[ch] += self.grad[idx] * xhat;
          }
        if (self.parents[1]->requires_grad) {
          auto& gg = self.parents[1]->grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (self.parents[0]->requires_grad) {
          auto& gx = self.parents[0]->grad_buffer();
          const S inv_m = S(1) / static_cast<S>(m);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
              const int64_t idx = i * c + ch;
              const S go = self.grad[idx];
              if (use_batch_stats) {
                const S xhat = (xv[idx] - mu[ch]) * invstd[ch];
                gx[idx] += gv[ch] * invstd[ch] *
                           (go - inv_m * sum_g[ch] - xhat * inv_m * sum_gx[ch]);
              } else {
                gx[idx] += go * gv[ch] * invstd[ch];
              }
            }
        }
      });
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<size_t>(m * n));
  detail::MutMat<S>(out.data(), m, n).noalias() =
      detail::ConstMat<S>(a.data(), m, k) * detail::ConstMat<S>(b.data(), k, n);
  Tensor<S> y = Tensor<S>::from_values({m, n}, std::move(out));
  attach_backward(y, {a, b}, [m, k, n](detail::TensorNode<S>& self) {
    detail::ConstMat<S> go(self.grad.data(), m, n);
    if (self.parents[0]->requires_grad) {
      auto& ga = self.parents[0]->grad_buffer();
      detail::MutMat<S>(ga.data(), m, k).noalias() +=
          go * detail::ConstMat<S>(self.parents[1]->values.data(), k, n).transpose();
    }
    if (self.parents[1]->requires_grad) {
      auto& gb = self.parents[1]->grad_buffer();
      detail::MutMat<S>(gb.data(), k, n).noalias() +=
          detail::ConstMat<S>(self.parents[0]->values.data(), m, k).transpose() * go;
    }
  });
  return y;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  detail::check_2d(x, "transpose");
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<S> out(static_cast<size_t>(m * n));
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < n; ++c) out[c * m + r] = x.data()[r * n + c];
  Tensor<S> y = Tensor<S>::from_values({n, m}, std::move(out));
  attach_backward(y, {x}, [m, n](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < m; ++r)
      for (int64_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c * m + r];
  });
  return y;
}

// x @ w + b with w: (in, out), b: (out).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// shape surgery

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: element count mismatch, " + shape_str(x.shape()) +
                                " -> " + shape_str(shape));
  }
  Tensor<S> y = Tensor<S>::from_values(std::move(shape), x.values());
  attach_backward(y, {x}, [](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
  return y;
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int64_t r0, int64_t r1) {
  detail::check_2d(x, "slice_rows");
  if (r0 < 0 || r1 > x.dim(0) || r0 >= r1) {
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + ", " +
                                std::to_string(r1) + ") for " + shape_str(x.shape()));
  }
  const int64_t d = x.dim(1);
  std::vector<S> out(x.values().begin() + r0 * d, x.values().begin() + r1 * d);
  Tensor<S> y = Tensor<S>::from_values({r1 - r0, d}, std::move(out));
  attach_backward(y, {x}, [r0, d](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < self.grad.size(); ++i) g[static_cast<size_t>(r0 * d) + i] += self.grad[i];
  });
  return y;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, int64_t c0, int64_t c1) {
  detail::check_2d(x, "slice_cols");
  if (c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") for " + shape_str(x.shape()));
  }
  const int64_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
  std::vector<S> out(static_cast<size_t>(n * w));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < w; ++c) out[r * w + c] = x.data()[r * d + c0 + c];
  Tensor<S> y = Tensor<S>::from_values({n, w}, std::move(out));
  attach_backward(y, {x}, [n, d, w, c0](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < w; ++c) g[r * d + c0 + c] += self.grad[r * w + c];
  });
  return y;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int64_t n = parts[0].dim(0);
  int64_t total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    if (p.dim(0) != n) throw std::invalid_argument("concat_cols: row count mismatch");
    total += p.dim(1);
  }
  std::vector<S> out(static_cast<size_t>(n * total));
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < w; ++c) out[r * total + off + c] = p.data()[r * w + c];
    off += w;
  }
  Tensor<S> y = Tensor<S>::from_values({n, total}, std::move(out));
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      auto* node = y.node();
      node->requires_grad = true;
      for (const auto& p : parts) node->parents.push_back(p.node_ptr());
      node->backprop = [n, total](detail::TensorNode<S>& self) {
        int64_t off2 = 0;
        for (auto& parent : self.parents) {
          const int64_t w = parent->shape[1];
          if (parent->requires_grad) {
            auto& g = parent->grad_buffer();
            for (int64_t r = 0; r < n; ++r)
              for (int64_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off2 + c];
          }
          off2 += w;
        }
      };
    }
  }
  return y;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int64_t d = parts[0].dim(1);
  int64_t total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_rows");
    if (p.dim(1) != d) throw std::invalid_argument("concat_rows: column count mismatch");
    total += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(static_cast<size_t>(total * d));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor<S> y = Tensor<S>::from_values({total, d}, std::move(out));
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      auto* node = y.node();
      node->requires_grad = true;
      for (const auto& p : parts) node->parents.push_back(p.node_ptr());
      node->backprop = [](detail::TensorNode<S>& self) {
        size_t off = 0;
        for (auto& parent : self.parents) {
          const size_t cnt = parent->values.size();
          if (parent->requires_grad) {
            auto& g = parent->grad_buffer();
            for (size_t i = 0; i < cnt; ++i) g[i] += self.grad[off + i];
          }
          off += cnt;
        }
      };
    }
  }
  return y;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& rows) {
  detail::check_2d(x, "gather_rows");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const int64_t d = x.dim(1);
  std::vector<S> out(rows.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.dim(0))
      throw std::invalid_argument("gather_rows: index out of range");
    std::copy_n(x.data() + rows[i] * d, d, out.data() + static_cast<int64_t>(i) * d);
  }
  Tensor<S> y = Tensor<S>::from_values({static_cast<int64_t>(rows.size()), d}, std::move(out));
  attach_backward(y, {x}, [rows, d](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t c = 0; c < d; ++c) g[rows[i] * d + c] += self.grad[static_cast<int64_t>(i) * d + c];
  });
  return y;
}

// Per row r, selects columns [starts[r], starts[r] + width).
template <typename S>
Tensor<S> gather_cols_per_row(const Tensor<S>& x, const std::vector<int64_t>& starts,
                              int64_t width) {
  detail::check_2d(x, "gather_cols_per_row");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (static_cast<int64_t>(starts.size()) != n)
    throw std::invalid_argument("gather_cols_per_row: one start per row required");
  std::vector<S> out(static_cast<size_t>(n * width));
  for (int64_t r = 0; r < n; ++r) {
    if (starts[r] < 0 || starts[r] + width > d)
      throw std::invalid_argument("gather_cols_per_row: window out of range");
    std::copy_n(x.data() + r * d + starts[r], width, out.data() + r * width);
  }
  Tensor<S> y = Tensor<S>::from_values({n, width}, std::move(out));
  attach_backward(y, {x}, [starts, n, d, width](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < width; ++c) g[r * d + starts[r] + c] += self.grad[r * width + c];
  });
  return y;
}

// ---------------------------------------------------------------------------
// convolution

// Input (H, W, Cin), kernel (KH, KW, Cin, Cout), optional bias (Cout).
// Padding is explicit zero padding; stride may exceed the kernel (overlap-free
// strided patching) or undercut it (overlapping patches).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>* bias,
                 int64_t stride_h, int64_t stride_w, int64_t pad_h = 0, int64_t pad_w = 0) {
  if (x.ndim() != 3) throw std::invalid_argument("conv2d: input must be (H, W, C)");
  if (kernel.ndim() != 4) throw std::invalid_argument("conv2d: kernel must be (KH, KW, Cin, Cout)");
  if (stride_h < 1 || stride_w < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                                " input channels, input has " + std::to_string(cin));
  }
  if (bias && bias->size() != cout) throw std::invalid_argument("conv2d: bias/kernel mismatch");
  const int64_t oh = (h + 2 * pad_h - kh) / stride_h + 1;
  const int64_t ow = (w + 2 * pad_w - kw) / stride_w + 1;
  if (h + 2 * pad_h < kh || w + 2 * pad_w < kw) {
    throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) +
                                " smaller than kernel window");
  }

  const int64_t k = kh * kw * cin;
  std::vector<S> col(static_cast<size_t>(oh * ow * k), S(0));
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      S* row = col.data() + (oy * ow + ox) * k;
      for (int64_t ky = 0; ky < kh; ++ky) {
        const int64_t iy = oy * stride_h - pad_h + ky;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < kw; ++kx) {
          const int64_t ix = ox * stride_w - pad_w + kx;
          if (ix < 0 || ix >= w) continue;
          std::copy_n(x.data() + (iy * w + ix) * cin, cin, row + (ky * kw + kx) * cin);
        }
      }
    }

  std::vector<S> out(static_cast<size_t>(oh * ow * cout));
  detail::MutMat<S>(out.data(), oh * ow, cout).noalias() =
      detail::ConstMat<S>(col.data(), oh * ow, k) * detail::ConstMat<S>(kernel.data(), k, cout);
  if (bias) {
    for (int64_t r = 0; r < oh * ow; ++r)
      for (int64_t c = 0; c < cout; ++c) out[r * cout + c] += bias->data()[c];
  }

  Tensor<S> y = Tensor<S>::from_values({oh, ow, cout}, std::move(out));
  auto bw = [=, col = std::move(col)](detail::TensorNode<S>& self) {
    detail::ConstMat<S> go(self.grad.data(), oh * ow, cout);
    if (self.parents[1]->requires_grad) {
      auto& gk = self.parents[1]->grad_buffer();
      detail::MutMat<S>(gk.data(), k, cout).noalias() +=
          detail::ConstMat<S>(col.data(), oh * ow, k).transpose() * go;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (int64_t r = 0; r < oh * ow; ++r)
        for (int64_t c = 0; c < cout; ++c) gb[c] += self.grad[r * cout + c];
    }
    if (self.parents[0]->requires_grad) {
      std::vector<S> gcol(static_cast<size_t>(oh * ow * k));
      detail::MutMat<S>(gcol.data(), oh * ow, k).noalias() =
          go * detail::ConstMat<S>(self.parents[1]->values.data(), k, cout).transpose();
      auto& gx = self.parents[0]->grad_buffer();
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          const S* row = gcol.data() + (oy * ow + ox) * k;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride_h - pad_h + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride_w - pad_w + kx;
              if (ix < 0 || ix >= w) continue;
              S* dst = gx.data() + (iy * w + ix) * cin;
              const S* src = row + (ky * kw + kx) * cin;
              for (int64_t ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
            }
          }
        }
    }
  };
  if (bias) {
    attach_backward(y, {x, kernel, *bias}, std::move(bw));
  } else {
    attach_backward(y, {x, kernel}, std::move(bw));
  }
  return y;
}

template <typename S>
Tensor<S> conv2d_valid(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>* bias,
                       int64_t stride) {
  return conv2d(x, kernel, bias, stride, stride, 0, 0);
}

// 'Same' spatial padding for odd kernels at stride 1.
template <typename S>
Tensor<S> conv2d_same(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>* bias) {
  return conv2d(x, kernel, bias, 1, 1, kernel.dim(0) / 2, kernel.dim(1) / 2);
}

// ---------------------------------------------------------------------------
// resampling

// Align-corners bilinear interpolation over a (H, W, C) grid, channelwise.
// Output index i samples source coordinate i*(in-1)/(out-1); when extents
// match this is the exact identity.
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& grid, int64_t out_h, int64_t out_w) {
  if (grid.ndim() != 3) throw std::invalid_argument("bilinear_resize: input must be (H, W, C)");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: zero output extent");
  const int64_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);

  struct Pick {
    int64_t lo;
    int64_t hi;
    S t;
  };
  auto axis_picks = [](int64_t in, int64_t out) {
    std::vector<Pick> picks(static_cast<size_t>(out));
    for (int64_t i = 0; i < out; ++i) {
      double s = (out == 1) ? 0.0
                            : static_cast<double>(i * (in - 1)) / static_cast<double>(out - 1);
      int64_t lo = static_cast<int64_t>(std::floor(s));
      if (lo > in - 1) lo = in - 1;
      int64_t hi = std::min(lo + 1, in - 1);
      picks[static_cast<size_t>(i)] = {lo, hi, static_cast<S>(s - static_cast<double>(lo))};
    }
    return picks;
  };
  const auto ys = axis_picks(h, out_h);
  const auto xs = axis_picks(w, out_w);

  std::vector<S> out(static_cast<size_t>(out_h * out_w * c));
  for (int64_t oy = 0; oy < out_h; ++oy)
    for (int64_t ox = 0; ox < out_w; ++ox) {
      const auto& py = ys[static_cast<size_t>(oy)];
      const auto& px = xs[static_cast<size_t>(ox)];
      const S w00 = (S(1) - py.t) * (S(1) - px.t);
      const S w01 = (S(1) - py.t) * px.t;
      const S w10 = py.t * (S(1) - px.t);
      const S w11 = py.t * px.t;
      const S* p00 = grid.data() + (py.lo * w + px.lo) * c;
      const S* p01 = grid.data() + (py.lo * w + px.hi) * c;
      const S* p10 = grid.data() + (py.hi * w + px.lo) * c;
      const S* p11 = grid.data() + (py.hi * w + px.hi) * c;
      S* dst = out.data() + (oy * out_w + ox) * c;
      for (int64_t ch = 0; ch < c; ++ch)
        dst[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  Tensor<S> y = Tensor<S>::from_values({out_h, out_w, c}, std::move(out));
  attach_backward(y, {grid}, [=](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const auto& py = ys[static_cast<size_t>(oy)];
        const auto& px = xs[static_cast<size_t>(ox)];
        const S w00 = (S(1) - py.t) * (S(1) - px.t);
        const S w01 = (S(1) - py.t) * px.t;
        const S w10 = py.t * (S(1) - px.t);
        const S w11 = py.t * px.t;
        const S* go = self.grad.data() + (oy * out_w + ox) * c;
        for (int64_t ch = 0; ch < c; ++ch) {
          g[(py.lo * w + px.lo) * c + ch] += w00 * go[ch];
          g[(py.lo * w + px.hi) * c + ch] += w01 * go[ch];
          g[(py.hi * w + px.lo) * c + ch] += w10 * go[ch];
          g[(py.hi * w + px.hi) * c + ch] += w11 * go[ch];
        }
      }
  });
  return y;
}

// ---------------------------------------------------------------------------
// RoI feature extraction

// Average-of-bilinear-samples RoI pooling over a (H, W, C) feature map.
// Boxes are (x1, y1, x2, y2) in image pixels; division by feature_stride maps
// them to feature coordinates without rounding. Each output bin averages
// samples x samples bilinear taps; grid values live at integer coordinates
// and out-of-range taps clamp at the border (taps beyond one cell outside
// contribute zero). Output rows are the flattened (out_h, out_w, C) grids,
// one row per box.
template <typename S>
Tensor<S> roi_align(const Tensor<S>& fm, const std::vector<std::array<double, 4>>& boxes,
                    double feature_stride, int64_t out_h, int64_t out_w, int64_t samples = 2) {
  if (fm.ndim() != 3) throw std::invalid_argument("roi_align: feature map must be (H, W, C)");
  if (boxes.empty()) throw std::invalid_argument("roi_align: no boxes");
  const int64_t h = fm.dim(0), w = fm.dim(1), c = fm.dim(2);
  const int64_t bins = out_h * out_w;
  const int64_t taps_per_bin = samples * samples;

  struct Tap {
    int64_t idx00, idx01, idx10, idx11;  // spatial offsets into the map
    S w00, w01, w10, w11;
  };
  // Tap layout: [box][bin][tap]
  std::vector<Tap> taps(static_cast<size_t>(boxes.size()) * bins * taps_per_bin);

  auto make_tap = [&](double y, double x) -> Tap {
    if (y < -1.0 || y > static_cast<double>(h) || x < -1.0 || x > static_cast<double>(w)) {
      return Tap{0, 0, 0, 0, S(0), S(0), S(0), S(0)};
    }
    y = std::max(y, 0.0);
    x = std::max(x, 0.0);
    int64_t y0 = static_cast<int64_t>(y);
    int64_t x0 = static_cast<int64_t>(x);
    if (y0 > h - 1) y0 = h - 1;
    if (x0 > w - 1) x0 = w - 1;
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const int64_t x1 = std::min(x0 + 1, w - 1);
    const double ly = y - static_cast<double>(y0);
    const double lx = x - static_cast<double>(x0);
    Tap t;
    t.idx00 = y0 * w + x0;
    t.idx01 = y0 * w + x1;
    t.idx10 = y1 * w + x0;
    t.idx11 = y1 * w + x1;
    t.w00 = static_cast<S>((1.0 - ly) * (1.0 - lx));
    t.w01 = static_cast<S>((1.0 - ly) * lx);
    t.w10 = static_cast<S>(ly * (1.0 - lx));
    t.w11 = static_cast<S>(ly * lx);
    return t;
  };

  for (size_t b = 0; b < boxes.size(); ++b) {
    const double x1 = boxes[b][0] / feature_stride;
    const double y1 = boxes[b][1] / feature_stride;
    const double x2 = boxes[b][2] / feature_stride;
    const double y2 = boxes[b][3] / feature_stride;
    const double roi_w = std::max(x2 - x1, 1.0);
    const double roi_h = std::max(y2 - y1, 1.0);
    const double bin_w = roi_w / static_cast<double>(out_w);
    const double bin_h = roi_h / static_cast<double>(out_h);
    for (int64_t by = 0; by < out_h; ++by)
      for (int64_t bx = 0; bx < out_w; ++bx)
        for (int64_t sy = 0; sy < samples; ++sy)
          for (int64_t sx = 0; sx < samples; ++sx) {
            const double yy =
                y1 + (static_cast<double>(by) +
                      (static_cast<double>(sy) + 0.5) / static_cast<double>(samples)) *
                         bin_h;
            const double xx =
                x1 + (static_cast<double>(bx) +
                      (static_cast<double>(sx) + 0.5) / static_cast<double>(samples)) *
                         bin_w;
            taps[((b * bins) + (by * out_w + bx)) * taps_per_bin + sy * samples + sx] =
                make_tap(yy, xx);
          }
  }

  const S tap_scale = S(1) / static_cast<S>(taps_per_bin);
  std::vector<S> out(static_cast<size_t>(boxes.size()) * bins * c, S(0));
  for (size_t b = 0; b < boxes.size(); ++b)
    for (int64_t bin = 0; bin < bins; ++bin) {
      S* dst = out.data() + (static_cast<int64_t>(b) * bins + bin) * c;
      for (int64_t t = 0; t < taps_per_bin; ++t) {
        const Tap& tp = taps[(b * bins + bin) * taps_per_bin + t];
        const S* f = fm.data();
        for (int64_t ch = 0; ch < c; ++ch) {
          dst[ch] += tap_scale * (tp.w00 * f[tp.idx00 * c + ch] + tp.w01 * f[tp.idx01 * c + ch] +
                                  tp.w10 * f[tp.idx10 * c + ch] + tp.w11 * f[tp.idx11 * c + ch]);
        }
      }
    }

  Tensor<S> y =
      Tensor<S>::from_values({static_cast<int64_t>(boxes.size()), bins * c}, std::move(out));
  attach_backward(y, {fm},
                  [taps = std::move(taps), bins, taps_per_bin, c, tap_scale,
                   nboxes = boxes.size()](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t b = 0; b < nboxes; ++b)
      for (int64_t bin = 0; bin < bins; ++bin) {
        const S* go = self.grad.data() + (static_cast<int64_t>(b) * bins + bin) * c;
        for (int64_t t = 0; t < taps_per_bin; ++t) {
          const Tap& tp = taps[(b * bins + bin) * taps_per_bin + t];
          for (int64_t ch = 0; ch < c; ++ch) {
            const S gv = tap_scale * go[ch];
            g[tp.idx00 * c + ch] += tp.w00 * gv;
            g[tp.idx01 * c + ch] += tp.w01 * gv;
            g[tp.idx10 * c + ch] += tp.w10 * gv;
            g[tp.idx11 * c + ch] += tp.w11 * gv;
          }
        }
      }
  });
  return y;
}

// ---------------------------------------------------------------------------
// losses

// Mean binary cross-entropy over logits against {0,1} targets, in the
// numerically stable max(x,0) - x t + log(1 + exp(-|x|)) form.
template <typename S>
Tensor<S> bce_with_logits_mean(const Tensor<S>& logits, const std::vector<S>& targets) {
  if (logits.size() != static_cast<int64_t>(targets.size()))
    throw std::invalid_argument("bce_with_logits_mean: logit/target count mismatch");
  const int64_t n = logits.size();
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const S x = logits.data()[i];
    acc += std::max(x, S(0)) - x * targets[static_cast<size_t>(i)] +
           std::log1p(std::exp(-std::abs(x)));
  }
  Tensor<S> y = Tensor<S>::scalar(acc / static_cast<S>(n));
  attach_backward(y, {logits}, [targets, n](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const S go = self.grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) {
      const S x = self.parents[0]->values[static_cast<size_t>(i)];
      const S sig = S(1) / (S(1) + std::exp(-x));
      g[static_cast<size_t>(i)] += go * (sig - targets[static_cast<size_t>(i)]);
    }
  });
  return y;
}

// Mean softmax cross-entropy; logits (N, K), one class label per row.
template <typename S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<int64_t>& labels) {
  detail::check_2d(logits, "cross_entropy_mean");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy_mean: one label per row required");
  S acc = 0;
  for (int64_t r = 0; r < n; ++r) {
    if (labels[static_cast<size_t>(r)] < 0 || labels[static_cast<size_t>(r)] >= k)
      throw std::invalid_argument("cross_entropy_mean: label out of range");
    const S* xi = logits.data() + r * k;
    S m = xi[0];
    for (int64_t c = 1; c < k; ++c) m = std::max(m, xi[c]);
    S z = 0;
    for (int64_t c = 0; c < k; ++c) z += std::exp(xi[c] - m);
    acc += m + std::log(z) - xi[labels[static_cast<size_t>(r)]];
  }
  Tensor<S> y = Tensor<S>::scalar(acc / static_cast<S>(n));
  attach_backward(y, {logits}, [labels, n, k](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const S go = self.grad[0] / static_cast<S>(n);
    for (int64_t r = 0; r < n; ++r) {
      const S* xi = self.parents[0]->values.data() + r * k;
      S m = xi[0];
      for (int64_t c = 1; c < k; ++c) m = std::max(m, xi[c]);
      S z = 0;
      for (int64_t c = 0; c < k; ++c) z += std::exp(xi[c] - m);
      for (int64_t c = 0; c < k; ++c) {
        const S p = std::exp(xi[c] - m) / z;
        g[r * k + c] += go * (p - (c == labels[static_cast<size_t>(r)] ? S(1) : S(0)));
      }
    }
  });
  return y;
}

// Summed Huber loss against constant targets: 0.5 d^2 / beta for |d| < beta,
// |d| - 0.5 beta otherwise.
template <typename S>
Tensor<S> huber_sum(const Tensor<S>& pred, const std::vector<S>& target, double beta = 1.0) {
  if (pred.size() != static_cast<int64_t>(target.size()))
    throw std::invalid_argument("huber_sum: prediction/target count mismatch");
  const S b = static_cast<S>(beta);
  S acc = 0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const S d = pred.data()[i] - target[static_cast<size_t>(i)];
    const S a = std::abs(d);
    acc += (a < b) ? S(0.5) * d * d / b : a - S(0.5) * b;
  }
  Tensor<S> y = Tensor<S>::scalar(acc);
  attach_backward(y, {pred}, [target, b](detail::TensorNode<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const S go = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) {
      const S d = self.parents[0]->values[i] - target[i];
      g[i] += go * ((std::abs(d) < b) ? d / b : (d > 0 ? S(1) : S(-1)));
    }
  });
  return y;
}

}  // namespace vitdet
