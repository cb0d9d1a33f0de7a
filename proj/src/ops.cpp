#include "vitfl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vitfl/error.hpp"
#include "vitfl/matrix.hpp"

namespace vitfl::ops {

using detail::make_result;
using detail::Node;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.defined() && t.rank() == rank, std::string(op) + ": expected rank " +
                                               std::to_string(rank) + " tensor, got " +
                                               (t.defined() ? to_string(t.shape()) : "undefined"));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

// Gradient buffer of parent i, or nullptr if it does not need one.
double* parent_grad(Node& self, std::size_t i) {
  if (i >= self.parents.size()) return nullptr;
  Node& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

const double* parent_value(const Node& self, std::size_t i) { return self.parents[i]->value.data(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions disagree " + to_string(a.shape()) + " x " +
                             to_string(b.shape()));
  std::vector<double> out(m * n);
  gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0, out.data());
  return make_result({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                     [m, n, k](Node& self) {
                       const double* g = self.grad.data();
                       if (double* da = parent_grad(self, 0))
                         gemm(false, true, m, k, n, 1.0, g, parent_value(self, 1), 1.0, da);
                       if (double* db = parent_grad(self, 1))
                         gemm(true, false, k, n, m, 1.0, parent_value(self, 0), g, 1.0, db);
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  require(weight.dim(1) == in, "linear: input width " + std::to_string(in) +
                                   " does not match weight " + to_string(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == out_dim, "linear: bias length mismatch");

  std::vector<double> out(m * out_dim);
  gemm(false, true, m, out_dim, in, 1.0, x.data().data(), weight.data().data(), 0.0, out.data());
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b[j];
  }
  std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result({m, out_dim}, std::move(out), "linear", std::move(parents),
                     [m, in, out_dim](Node& self) {
                       const double* g = self.grad.data();
                       if (double* dx = parent_grad(self, 0))
                         gemm(false, false, m, in, out_dim, 1.0, g, parent_value(self, 1), 1.0, dx);
                       if (double* dw = parent_grad(self, 1))
                         gemm(true, false, out_dim, in, m, 1.0, g, parent_value(self, 0), 1.0, dw);
                       if (double* db = parent_grad(self, 2)) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[i * out_dim + j];
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node& self) {
    const auto& g = self.grad;
    for (std::size_t p = 0; p < 2; ++p)
      if (double* d = parent_grad(self, p))
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node& self) {
    const auto& g = self.grad;
    if (double* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (double* d = parent_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node& self) {
    const auto& g = self.grad;
    const double* av = parent_value(self, 0);
    const double* bv = parent_value(self, 1);
    if (double* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    if (double* d = parent_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), "scale", {a.node()}, [s](Node& self) {
    if (double* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * s;
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, "sum", {a.node()}, [](Node& self) {
    if (double* d = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_result(x.shape(), std::move(out), "relu", {x.node()}, [](Node& self) {
    if (double* d = parent_grad(self, 0)) {
      const double* xv = parent_value(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xv[i] > 0.0) d[i] += self.grad[i];
    }
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  return make_result(x.shape(), std::move(out), "gelu", {x.node()}, [](Node& self) {
    if (double* d = parent_grad(self, 0)) {
      const double* xv = parent_value(self, 0);
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        d[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(),
          "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x.node()}, [](Node& self) {
    if (double* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

Tensor add_tiled(const Tensor& x, const Tensor& pattern) {
  const std::size_t p = pattern.numel();
  require(p > 0 && x.numel() % p == 0, "add_tiled: " + to_string(x.shape()) +
                                            " is not a whole number of " +
                                            to_string(pattern.shape()) + " tiles");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + pattern[i % p];
  return make_result(x.shape(), std::move(out), "add_tiled", {x.node(), pattern.node()},
                     [p](Node& self) {
                       const auto& g = self.grad;
                       if (double* d = parent_grad(self, 0))
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       if (double* d = parent_grad(self, 1))
                         for (std::size_t i = 0; i < g.size(); ++i) d[i % p] += g[i];
                     });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mx = *std::max_element(xi, xi + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[i * n + j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result({m, n}, std::move(out), "softmax_rows", {x.node()}, [m, n, y](Node& self) {
    if (double* d = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = self.grad.data() + i * n;
        const double* yi = y->data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += yi[j] * (gi[j] - dot);
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  require(labels.size() == m, "cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(m) + " rows");
  require(m > 0, "cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(m * c);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                  std::to_string(c) + ")");
    }
    const double* li = logits.data().data() + i * c;
    const double mx = *std::max_element(li, li + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += ((*probs)[i * c + j] = std::exp(li[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= s;
    // Shifted form: equal top logits give exactly log(s).
    total += std::log(s) - (li[y] - mx);
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  return make_result({}, {total / static_cast<double>(m)}, "cross_entropy", {logits.node()},
                     [m, c, probs, lab, inv_m](Node& self) {
                       if (double* d = parent_grad(self, 0)) {
                         const double g = self.grad[0] * inv_m;
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g * (*probs)[i * c + j];
                           d[i * c + static_cast<std::size_t>((*lab)[i])] -= g;
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(gamma.numel() == n && beta.numel() == n, "layer_norm: affine length mismatch");
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mu) * r;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gamma[j] + beta[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), "layer_norm", {x.node(), gamma.node(), beta.node()},
      [m, n, xhat, rstd](Node& self) {
        const double* g = self.grad.data();
        const double* gam = parent_value(self, 1);
        if (double* dg = parent_grad(self, 1))
          for (std::size_t i = 0; i < m * n; ++i) dg[i % n] += g[i] * (*xhat)[i];
        if (double* db = parent_grad(self, 2))
          for (std::size_t i = 0; i < m * n; ++i) db[i % n] += g[i];
        if (double* dx = parent_grad(self, 0)) {
          std::vector<double> dxh(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxh[j] = g[i * n + j] * gam[j];
              s1 += dxh[j];
              s2 += dxh[j] * (*xhat)[i * n + j];
            }
            s1 /= static_cast<double>(n);
            s2 /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              dx[i * n + j] += (*rstd)[i] * (dxh[j] - s1 - (*xhat)[i * n + j] * s2);
          }
        }
      });
}

Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 std::vector<double>* weights_out) {
  require_rank(qkv, 2, "attention");
  require(qkv.dim(0) == batch * tokens, "attention: row count != batch*tokens");
  require(qkv.dim(1) % 3 == 0, "attention: width is not 3*dim");
  const std::size_t dim = qkv.dim(1) / 3;
  require(heads > 0 && dim % heads == 0, "attention: dim not divisible by heads");
  const std::size_t dh = dim / heads;
  const std::size_t stride = 3 * dim;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* in = qkv.data().data();

  auto probs = std::make_shared<std::vector<double>>(batch * heads * tokens * tokens);
  std::vector<double> out(batch * tokens * dim, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * tokens * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const double* qi = in + (b * tokens + i) * stride + h * dh;
        double* pi = p + i * tokens;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* kj = in + (b * tokens + j) * stride + dim + h * dh;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          pi[j] = s * sc;
          mx = std::max(mx, pi[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) z += (pi[j] = std::exp(pi[j] - mx));
        for (std::size_t j = 0; j < tokens; ++j) pi[j] /= z;
        double* oi = out.data() + (b * tokens + i) * dim + h * dh;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* vj = in + (b * tokens + j) * stride + 2 * dim + h * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += pi[j] * vj[d];
        }
      }
    }
  }
  if (weights_out) *weights_out = *probs;

  return make_result(
      {batch * tokens, dim}, std::move(out), "attention", {qkv.node()},
      [=](Node& self) {
        double* dq = parent_grad(self, 0);
        if (!dq) return;
        const double* x = parent_value(self, 0);
        const double* g = self.grad.data();
        std::vector<double> dp(tokens * tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (b * heads + h) * tokens * tokens;
            auto row = [&](std::size_t t, std::size_t off) { return (b * tokens + t) * stride + off + h * dh; };
            // dP = dO V^T ; dV += P^T dO
            for (std::size_t i = 0; i < tokens; ++i) {
              const double* gi = g + (b * tokens + i) * dim + h * dh;
              for (std::size_t j = 0; j < tokens; ++j) {
                const double* vj = x + row(j, 2 * dim);
                double* dvj = dq + row(j, 2 * dim);
                const double pij = p[i * tokens + j];
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) {
                  s += gi[d] * vj[d];
                  dvj[d] += pij * gi[d];
                }
                dp[i * tokens + j] = s;
              }
            }
            // dS = P * (dP - rowsum(dP * P))
            for (std::size_t i = 0; i < tokens; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < tokens; ++j) dot += dp[i * tokens + j] * p[i * tokens + j];
              for (std::size_t j = 0; j < tokens; ++j)
                dp[i * tokens + j] = p[i * tokens + j] * (dp[i * tokens + j] - dot) * sc;
            }
            for (std::size_t i = 0; i < tokens; ++i) {
              const double* qi = x + row(i, 0);
              double* dqi = dq + row(i, 0);
              for (std::size_t j = 0; j < tokens; ++j) {
                const double s = dp[i * tokens + j];
                const double* kj = x + row(j, dim);
                double* dkj = dq + row(j, dim);
                for (std::size_t d = 0; d < dh; ++d) {
                  dqi[d] += s * kj[d];
                  dkj[d] += s * qi[d];
                }
              }
            }
          }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::size_t col_rows() const { return c * k * k; }
  std::size_t col_cols() const { return ho * wo; }
};

void im2col(const ConvGeometry& g, const double* img, double* cols) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = cols + ((ch * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            dst[oy * g.wo + ox] = inside ? img[(ch * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* img) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = cols + ((ch * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(ch * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  require(stride > 0, "conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = x.dim(0), g.c = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.o = weight.dim(0), g.k = weight.dim(2), g.stride = stride, g.pad = padding;
  require(weight.dim(1) == g.c && weight.dim(3) == g.k,
          "conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
              to_string(x.shape()));
  require(g.h + 2 * padding >= g.k && g.w + 2 * padding >= g.k, "conv2d: kernel larger than input");
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == g.o, "conv2d: bias length mismatch");

  const std::size_t in_sz = g.c * g.h * g.w, out_sz = g.o * g.col_cols();
  std::vector<double> cols(g.col_rows() * g.col_cols());
  std::vector<double> out(g.n * out_sz);
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(g, x.data().data() + i * in_sz, cols.data());
    gemm(false, false, g.o, g.col_cols(), g.col_rows(), 1.0, weight.data().data(), cols.data(), 0.0,
         out.data() + i * out_sz);
    if (has_bias)
      for (std::size_t oc = 0; oc < g.o; ++oc)
        for (std::size_t p = 0; p < g.col_cols(); ++p) out[i * out_sz + oc * g.col_cols() + p] += bias[oc];
  }
  std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result({g.n, g.o, g.ho, g.wo}, std::move(out), "conv2d", std::move(parents),
                     [g, in_sz, out_sz](Node& self) {
                       const double* gr = self.grad.data();
                       const double* xv = parent_value(self, 0);
                       const double* wv = parent_value(self, 1);
                       double* dx = parent_grad(self, 0);
                       double* dw = parent_grad(self, 1);
                       double* db = parent_grad(self, 2);
                       std::vector<double> cols(g.col_rows() * g.col_cols());
                       for (std::size_t i = 0; i < g.n; ++i) {
                         const double* gi = gr + i * out_sz;
                         if (dw) {
                           im2col(g, xv + i * in_sz, cols.data());
                           gemm(false, true, g.o, g.col_rows(), g.col_cols(), 1.0, gi, cols.data(),
                                1.0, dw);
                         }
                         if (dx) {
                           gemm(true, false, g.col_rows(), g.col_cols(), g.o, 1.0, wv, gi, 0.0,
                                cols.data());
                           col2im_add(g, cols.data(), dx + i * in_sz);
                         }
                         if (db)
                           for (std::size_t oc = 0; oc < g.o; ++oc)
                             for (std::size_t p = 0; p < g.col_cols(); ++p) db[oc] += gi[oc * g.col_cols() + p];
                       }
                     });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::span<double> running_mean, std::span<double> running_var, bool training,
                    double momentum, double eps) {
  require_rank(x, 4, "batch_norm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.size() == c &&
              running_var.size() == c,
          "batch_norm2d: per-channel parameter length mismatch");
  const std::size_t count = n * hw;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(c);
  std::vector<double> out(x.numel());
  const double* xv = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      mu = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) mu += xv[(i * c + ch) * hw + p];
      mu /= static_cast<double>(count);
      var = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = xv[(i * c + ch) * hw + p] - mu;
          var += d * d;
        }
      const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : 0.0;
      var /= static_cast<double>(count);
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[ch] = r;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (i * c + ch) * hw + p;
        (*xhat)[idx] = (xv[idx] - mu) * r;
        out[idx] = (*xhat)[idx] * gamma[ch] + beta[ch];
      }
  }
  return make_result(
      x.shape(), std::move(out), "batch_norm2d", {x.node(), gamma.node(), beta.node()},
      [n, c, hw, count, xhat, rstd, training](Node& self) {
        const double* g = self.grad.data();
        const double* gam = parent_value(self, 1);
        double* dx = parent_grad(self, 0);
        double* dg = parent_grad(self, 1);
        double* db = parent_grad(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t idx = (i * c + ch) * hw + p;
              sg += g[idx];
              sgx += g[idx] * (*xhat)[idx];
            }
          if (dg) dg[ch] += sgx;
          if (db) db[ch] += sg;
          if (!dx) continue;
          const double r = (*rstd)[ch];
          if (training) {
            const double inv = 1.0 / static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                dx[idx] += gam[ch] * r * (g[idx] - inv * sg - (*xhat)[idx] * inv * sgx);
              }
          } else {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                dx[idx] += gam[ch] * r * g[idx];
              }
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  return make_result({n, c}, std::move(out), "global_avg_pool", {x.node()}, [n, c, hw](Node& self) {
    if (double* d = parent_grad(self, 0)) {
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t p = 0; p < hw; ++p) d[i * hw + p] += self.grad[i] * inv;
    }
  });
}

Tensor mean_tokens(const Tensor& x, std::size_t tokens) {
  require_rank(x, 2, "mean_tokens");
  require(tokens > 0 && x.dim(0) % tokens == 0, "mean_tokens: rows not divisible by tokens");
  const std::size_t b = x.dim(0) / tokens, d = x.dim(1);
  std::vector<double> out(b * d, 0.0);
  const double inv = 1.0 / static_cast<double>(tokens);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * tokens + t) * d + j] * inv;
  return make_result({b, d}, std::move(out), "mean_tokens", {x.node()}, [b, d, tokens, inv](Node& self) {
    if (double* dx = parent_grad(self, 0))
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < tokens; ++t)
          for (std::size_t j = 0; j < d; ++j) dx[(i * tokens + t) * d + j] += self.grad[i * d + j] * inv;
  });
}

Tensor patchify(const Tensor& x, std::size_t patch) {
  require_rank(x, 4, "patchify");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(patch > 0 && h % patch == 0 && w % patch == 0,
          "patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by patch " + std::to_string(patch));
  const std::size_t gy = h / patch, gx = w / patch, t = gy * gx, pd = c * patch * patch;
  // index map: output position -> input position
  auto map = std::make_shared<std::vector<std::size_t>>(n * t * pd);
  std::vector<double> out(n * t * pd);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t py = 0; py < gy; ++py)
      for (std::size_t px = 0; px < gx; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t dy = 0; dy < patch; ++dy)
            for (std::size_t dx = 0; dx < patch; ++dx) {
              const std::size_t o = ((i * t + py * gx + px) * pd) + (ch * patch + dy) * patch + dx;
              const std::size_t s = ((i * c + ch) * h + py * patch + dy) * w + px * patch + dx;
              (*map)[o] = s;
              out[o] = x[s];
            }
  return make_result({n * t, pd}, std::move(out), "patchify", {x.node()}, [map](Node& self) {
    if (double* d = parent_grad(self, 0))
      for (std::size_t o = 0; o < map->size(); ++o) d[(*map)[o]] += self.grad[o];
  });
}

Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps) {
  require_rank(a, 2, "cosine_rows");
  require_same_shape(a, b, "cosine_rows");
  const std::size_t m = a.dim(0), d = a.dim(1);
  auto na = std::make_shared<std::vector<double>>(m);
  auto nb = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = a[i * d + j], y = b[i * d + j];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    (*na)[i] = std::sqrt(aa + eps);
    (*nb)[i] = std::sqrt(bb + eps);
    out[i] = ab / ((*na)[i] * (*nb)[i]);
  }
  auto cosv = std::make_shared<std::vector<double>>(out);
  return make_result({m}, std::move(out), "cosine_rows", {a.node(), b.node()},
                     [m, d, na, nb, cosv](Node& self) {
                       const double* av = parent_value(self, 0);
                       const double* bv = parent_value(self, 1);
                       double* da = parent_grad(self, 0);
                       double* db = parent_grad(self, 1);
                       for (std::size_t i = 0; i < m; ++i) {
                         const double g = self.grad[i];
                         const double inv = 1.0 / ((*na)[i] * (*nb)[i]);
                         const double ca = (*cosv)[i] / ((*na)[i] * (*na)[i]);
                         const double cb = (*cosv)[i] / ((*nb)[i] * (*nb)[i]);
                         for (std::size_t j = 0; j < d; ++j) {
                           const std::size_t k = i * d + j;
                           if (da) da[k] += g * (bv[k] * inv - ca * av[k]);
                           if (db) db[k] += g * (av[k] * inv - cb * bv[k]);
                         }
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& columns) {
  require(!columns.empty(), "concat_cols: no columns");
  const std::size_t m = columns.front().numel(), k = columns.size();
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<double> out(m * k);
  for (std::size_t j = 0; j < k; ++j) {
    require(columns[j].numel() == m, "concat_cols: column length mismatch");
    for (std::size_t i = 0; i < m; ++i) out[i * k + j] = columns[j][i];
    parents.push_back(columns[j].node());
  }
  return make_result({m, k}, std::move(out), "concat_cols", std::move(parents), [m, k](Node& self) {
    for (std::size_t j = 0; j < k; ++j)
      if (double* d = parent_grad(self, j))
        for (std::size_t i = 0; i < m; ++i) d[i] += self.grad[i * k + j];
  });
}

}  // namespace vitfl::ops
