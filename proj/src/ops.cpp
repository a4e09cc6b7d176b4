#include "cdlab/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdlab/errors.hpp"

namespace cdlab::ops {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RMat>;
using CMapM = Eigen::Map<const RMat>;

CMapM cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MapM wmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

detail::Node& parent(detail::Node& n, std::size_t i) { return *n.parents[i]; }

// Unary elementwise op with a local derivative computed from (x, y).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  const auto& xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return make_result(x.shape(), std::move(y), {x}, [dfdx](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    }
  });
}

std::vector<double> row_softmax(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* out = y.data() + r * cols;
    double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      z += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[c] /= z;
  }
  return y;
}

// log-softmax rows
std::vector<double> row_log_softmax(const std::vector<double>& x, std::size_t rows,
                                    std::size_t cols) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* out = y.data() + r * cols;
    double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[c] = in[c] - lse;
  }
  return y;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  wmap(out, m, n).noalias() = cmap(a.values(), m, k) * cmap(b.values(), k, n);
  return make_result(Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto G = cmap(self.grad, m, n);
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      wmap(pa.grad_buffer(), m, k).noalias() += G * cmap(pb.value, k, n).transpose();
    }
    if (pb.requires_grad) {
      wmap(pb.grad_buffer(), k, n).noalias() += cmap(pa.value, m, k).transpose() * G;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  wmap(out, c, r) = cmap(a.values(), r, c).transpose();
  return make_result(Shape{c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    auto& p = parent(self, 0);
    if (p.requires_grad) wmap(p.grad_buffer(), r, c) += cmap(self.grad, c, r).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int i = 0; i < 2; ++i) {
      auto& p = parent(self, i);
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] -= self.grad[j];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j] * pb.value[j];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j] * pa.value[j];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

namespace {

Tensor row_broadcast(const Tensor& x, const Tensor& v, double sign, const char* op) {
  const auto cols = x.cols();
  if (v.numel() != cols) {
    throw DimensionError(std::string(op) + ": row vector " + shape_str(v.shape()) +
                         " does not match " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / cols;
  std::vector<double> out(x.values());
  const auto& vv = v.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += sign * vv[c];
  }
  return make_result(x.shape(), std::move(out), {x, v}, [rows, cols, sign](detail::Node& self) {
    auto& px = parent(self, 0);
    auto& pv = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
    }
    if (pv.requires_grad) {
      auto& g = pv.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += sign * self.grad[r * cols + c];
      }
    }
  });
}

}  // namespace

Tensor add_row(const Tensor& x, const Tensor& v) { return row_broadcast(x, v, 1.0, "add_row"); }

Tensor sub_row(const Tensor& x, const Tensor& v) { return row_broadcast(x, v, -1.0, "sub_row"); }

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor softmax(const Tensor& x) {
  const auto cols = x.cols();
  const auto rows = x.numel() / cols;
  auto y = row_softmax(x.values(), rows, cols);
  return make_result(x.shape(), std::move(y), {x}, [rows, cols](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = self.value.data() + r * cols;
      const double* gy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += s[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += s[c] * (gy[c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto cols = x.cols();
  const auto rows = x.numel() / cols;
  if (gain.numel() != cols || bias.numel() != cols) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mu) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * gv[c] + bv[c];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& pg = parent(self, 1);
        auto& pb = parent(self, 2);
        const auto& gy = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t i = 0; i < rows * cols; ++i) gg[i % cols] += gy[i] * xhat[i];
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < rows * cols; ++i) gb[i % cols] += gy[i];
        }
        if (!px.requires_grad) return;
        auto& gx = px.grad_buffer();
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            double d = gy[r * cols + c] * pg.value[c];
            mean_d += d;
            mean_dx += d * xhat[r * cols + c];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t c = 0; c < cols; ++c) {
            double d = gy[r * cols + c] * pg.value[c];
            gx[r * cols + c] += inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t offset) {
  require_matrix(q, "causal_attention");
  require_matrix(k, "causal_attention");
  require_matrix(v, "causal_attention");
  const auto s = q.dim(0), d = q.dim(1), t = k.dim(0);
  if (k.shape() != v.shape() || k.dim(1) != d || t != offset + s) {
    throw DimensionError("causal_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()) + ", offset " +
                         std::to_string(offset));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(n_heads));
  }
  const auto dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto S = static_cast<Eigen::Index>(s), T = static_cast<Eigen::Index>(t),
             DH = static_cast<Eigen::Index>(dh);

  auto Q = cmap(q.values(), s, d);
  auto K = cmap(k.values(), t, d);
  auto V = cmap(v.values(), t, d);
  std::vector<double> out(s * d);
  auto O = wmap(out, s, d);
  std::vector<RMat> probs(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    RMat P = (Q.middleCols(c0, DH) * K.middleCols(c0, DH).transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < S; ++i) {
      const auto last = static_cast<Eigen::Index>(offset) + i;
      double mx = P.row(i).head(last + 1).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j < T; ++j) {
        double e = j <= last ? std::exp(P(i, j) - mx) : 0.0;
        P(i, j) = e;
        z += e;
      }
      P.row(i) /= z;
    }
    O.middleCols(c0, DH).noalias() = P * V.middleCols(c0, DH);
    probs[h] = std::move(P);
  }
  return make_result(
      Shape{s, d}, std::move(out), {q, k, v},
      [s, d, t, n_heads, dh, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
        auto& pq = parent(self, 0);
        auto& pk = parent(self, 1);
        auto& pv = parent(self, 2);
        auto G = cmap(self.grad, s, d);
        auto Qv = cmap(pq.value, s, d);
        auto Kv = cmap(pk.value, t, d);
        auto Vv = cmap(pv.value, t, d);
        const auto DH = static_cast<Eigen::Index>(dh);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto c0 = static_cast<Eigen::Index>(h * dh);
          const RMat& P = probs[h];
          auto Gh = G.middleCols(c0, DH);
          if (pv.requires_grad) {
            wmap(pv.grad_buffer(), t, d).middleCols(c0, DH).noalias() += P.transpose() * Gh;
          }
          if (!pq.requires_grad && !pk.requires_grad) continue;
          RMat dP = Gh * Vv.middleCols(c0, DH).transpose();
          RMat dS = P.cwiseProduct(dP);
          Eigen::VectorXd rowdot = dS.rowwise().sum();
          dS -= P.cwiseProduct(rowdot.replicate(1, dS.cols()));
          dS *= inv_sqrt;
          if (pq.requires_grad) {
            wmap(pq.grad_buffer(), s, d).middleCols(c0, DH).noalias() +=
                dS * Kv.middleCols(c0, DH);
          }
          if (pk.requires_grad) {
            wmap(pk.grad_buffer(), t, d).middleCols(c0, DH).noalias() +=
                dS.transpose() * Qv.middleCols(c0, DH);
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const auto cols = logits.cols();
  const auto rows = logits.numel() / cols;
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  for (auto t : targets) {
    if (t >= cols) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " out of range for " + std::to_string(cols) + " classes");
    }
  }
  auto logp = row_log_softmax(logits.values(), rows, cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) loss -= logp[r * cols + targets[r]];
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_result(Shape{1}, {loss}, {logits},
                     [rows, cols, logp = std::move(logp), tg = std::move(tg)](detail::Node& self) {
                       auto& p = parent(self, 0);
                       if (!p.requires_grad) return;
                       auto& g = p.grad_buffer();
                       const double w = self.grad[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           double prob = std::exp(logp[r * cols + c]);
                           g[r * cols + c] += w * (prob - (c == tg[r] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  std::size_t t[1] = {target};
  return softmax_cross_entropy(logits, std::span<const std::size_t>(t, 1));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto rows = a.numel() / a.cols();
  const auto& av = a.values();
  const auto& bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  acc /= static_cast<double>(rows);
  return make_result(Shape{1}, {acc}, {a, b}, [rows](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    const double w = 2.0 * self.grad[0] / static_cast<double>(rows);
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      double d = w * (pa.value[i] - pb.value[i]);
      if (pa.requires_grad) pa.grad_buffer()[i] += d;
      if (pb.requires_grad) pb.grad_buffer()[i] -= d;
    }
  });
}

Tensor l1_norm(const Tensor& f) {
  const auto rows = f.numel() / f.cols();
  double acc = 0.0;
  for (double v : f.values()) acc += std::abs(v);
  acc /= static_cast<double>(rows);
  return make_result(Shape{1}, {acc}, {f}, [rows](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double w = self.grad[0] / static_cast<double>(rows);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = p.value[i];
      g[i] += v > 0.0 ? w : (v < 0.0 ? -w : 0.0);
    }
  });
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  const auto cols = p_logits.cols();
  const auto rows = p_logits.numel() / cols;
  auto logp = row_log_softmax(p_logits.values(), rows, cols);
  auto logq = row_log_softmax(q_logits.values(), rows, cols);
  std::vector<double> per_row(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      auto i = r * cols + c;
      per_row[r] += std::exp(logp[i]) * (logp[i] - logq[i]);
    }
    total += per_row[r];
  }
  total /= static_cast<double>(rows);
  return make_result(
      Shape{1}, {total}, {p_logits, q_logits},
      [rows, cols, logp = std::move(logp), logq = std::move(logq),
       per_row = std::move(per_row)](detail::Node& self) {
        auto& pp = parent(self, 0);
        auto& pq = parent(self, 1);
        const double w = self.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            auto i = r * cols + c;
            double P = std::exp(logp[i]);
            if (pp.requires_grad) pp.grad_buffer()[i] += w * P * (logp[i] - logq[i] - per_row[r]);
            if (pq.requires_grad) pq.grad_buffer()[i] += w * (std::exp(logq[i]) - P);
          }
        }
      });
}

Tensor topk_keep(const Tensor& f, std::size_t k) {
  const auto cols = f.cols();
  const auto rows = f.numel() / cols;
  if (k < 1 || k > cols) {
    throw ContractError("topk_keep: k = " + std::to_string(k) + " outside [1, " +
                        std::to_string(cols) + "]");
  }
  const auto& fv = f.values();
  std::vector<double> out(fv.size(), 0.0);
  std::vector<unsigned char> keep(fv.size(), 0);
  std::vector<std::size_t> idx(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = fv.data() + r * cols;
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    for (std::size_t j = 0; j < k; ++j) {
      keep[r * cols + idx[j]] = 1;
      out[r * cols + idx[j]] = row[idx[j]];
    }
  }
  return make_result(f.shape(), std::move(out), {f}, [keep = std::move(keep)](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (keep[i]) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result(Shape{1}, {acc}, {x}, [](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    for (auto& g : p.grad_buffer()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  const auto n = table.dim(0), cols = table.dim(1);
  std::vector<double> out(ids.size() * cols);
  const auto& tv = table.values();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= n) {
      throw IndexError("gather_rows: id " + std::to_string(ids[r]) + " out of range for " +
                       std::to_string(n) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return make_result(Shape{ids.size(), cols}, std::move(out), {table},
                     [cols, idv = std::move(idv)](detail::Node& self) {
                       auto& p = parent(self, 0);
                       if (!p.requires_grad) return;
                       auto& g = p.grad_buffer();
                       for (std::size_t r = 0; r < idv.size(); ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           g[idv[r] * cols + c] += self.grad[r * cols + c];
                         }
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  const auto cols = x.dim(1);
  if (begin >= end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end * cols));
  return make_result(Shape{end - begin, cols}, std::move(out), {x},
                     [begin, cols](detail::Node& self) {
                       auto& p = parent(self, 0);
                       if (!p.requires_grad) return;
                       auto& g = p.grad_buffer();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         g[begin * cols + i] += self.grad[i];
                       }
                     });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto cols = a.cols();
  const auto na = a.numel();
  std::vector<double> out(a.values());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const auto rows = out.size() / cols;
  return make_result(Shape{rows, cols}, std::move(out), {a, b}, [na](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

Tensor select_row(const Tensor& x, std::size_t row) {
  const auto cols = x.cols();
  if (row >= x.rows()) {
    throw IndexError("select_row: row " + std::to_string(row) + " of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(row * cols),
                          x.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * cols));
  return make_result(Shape{cols}, std::move(out), {x}, [row, cols](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t c = 0; c < cols; ++c) g[row * cols + c] += self.grad[c];
  });
}

Tensor replace_row(const Tensor& x, std::size_t row, const Tensor& v) {
  const auto cols = x.cols();
  if (row >= x.rows()) {
    throw IndexError("replace_row: row " + std::to_string(row) + " of " + shape_str(x.shape()));
  }
  if (v.numel() != cols) {
    throw DimensionError("replace_row: vector " + shape_str(v.shape()) + " for rows of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.values());
  std::copy(v.values().begin(), v.values().end(),
            out.begin() + static_cast<std::ptrdiff_t>(row * cols));
  return make_result(x.shape(), std::move(out), {x, v}, [row, cols](detail::Node& self) {
    auto& px = parent(self, 0);
    auto& pv = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (i / cols != row) g[i] += self.grad[i];
      }
    }
    if (pv.requires_grad) {
      auto& g = pv.grad_buffer();
      for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[row * cols + c];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), x.values(), {x}, [](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor solve(const Tensor& a, const Tensor& b) {
  require_matrix(a, "solve");
  require_matrix(b, "solve");
  const auto n = a.dim(0), m = b.dim(1);
  if (a.dim(1) != n || b.dim(0) != n) {
    throw DimensionError("solve: " + shape_str(a.shape()) + " with rhs " + shape_str(b.shape()));
  }
  Eigen::PartialPivLU<RMat> lu(cmap(a.values(), n, n));
  const double rcond = lu.rcond();
  if (!(rcond > 1e-12)) {
    throw NumericalError("solve: matrix is near-singular (reciprocal condition estimate " +
                         std::to_string(rcond) + ")");
  }
  std::vector<double> out(n * m);
  wmap(out, n, m) = lu.solve(cmap(b.values(), n, m));
  return make_result(Shape{n, m}, std::move(out), {a, b},
                     [n, m, lu = std::move(lu)](detail::Node& self) {
                       auto& pa = parent(self, 0);
                       auto& pb = parent(self, 1);
                       RMat dB = lu.transpose().solve(cmap(self.grad, n, m));
                       if (pb.requires_grad) wmap(pb.grad_buffer(), n, m) += dB;
                       if (pa.requires_grad) {
                         wmap(pa.grad_buffer(), n, n).noalias() -=
                             dB * cmap(self.value, n, m).transpose();
                       }
                     });
}

Tensor lerp_gate(const Tensor& a, const Tensor& b, const Tensor& gate) {
  require_same_shape(a, b, "lerp_gate");
  const auto cols = a.cols();
  const bool broadcast = gate.shape() != a.shape();
  if (broadcast && gate.numel() != cols) {
    throw DimensionError("lerp_gate: gate " + shape_str(gate.shape()) + " vs " +
                         shape_str(a.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  const auto& gv = gate.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    double g = gv[broadcast ? i % cols : i];
    out[i] = av[i] == bv[i] ? av[i] : (1.0 - g) * av[i] + g * bv[i];
  }
  return make_result(a.shape(), std::move(out), {a, b, gate},
                     [broadcast, cols](detail::Node& self) {
                       auto& pa = parent(self, 0);
                       auto& pb = parent(self, 1);
                       auto& pg = parent(self, 2);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         const auto gi = broadcast ? i % cols : i;
                         const double g = pg.value[gi];
                         const double gy = self.grad[i];
                         if (pa.requires_grad) pa.grad_buffer()[i] += (1.0 - g) * gy;
                         if (pb.requires_grad) pb.grad_buffer()[i] += g * gy;
                         if (pg.requires_grad) {
                           pg.grad_buffer()[gi] += (pb.value[i] - pa.value[i]) * gy;
                         }
                       }
                     });
}

}  // namespace cdlab::ops
