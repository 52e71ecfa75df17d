#include "smelab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "kernels.hpp"
#include "smelab/errors.hpp"

namespace smelab {

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

double gelu(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double activate(double x, Activation kind) {
  return kind == Activation::kReLU ? (x > 0.0 ? x : 0.0) : gelu(x);
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " . " +
                     shape_string(bv.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      std::vector<double> bt(k * n);
      kernels::transpose(t.value(ib).data(), bt.data(), k, n);
      kernels::gemm_nn(g.data(), bt.data(), t.grad(ia).data(), m, n, k, true);
    }
    if (t.needs_grad(ib)) {
      kernels::gemm_tn_acc(t.value(ia).data(), g.data(), t.grad(ib).data(), m, k, n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(av.shape()) + " . " +
                     shape_string(bv.shape()) + "^T");
  }
  std::vector<double> bt(k * n);
  kernels::transpose(bv.data(), bt.data(), n, k);
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nn(av.data(), bt.data(), out.data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      kernels::gemm_nn(g.data(), t.value(ib).data(), t.grad(ia).data(), m, n, k, true);
    }
    if (t.needs_grad(ib)) {
      kernels::gemm_tn_acc(g.data(), t.value(ia).data(), t.grad(ib).data(), m, n, k);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = av.transposed();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) accumulate(t.grad(ia), g);
    if (t.needs_grad(ib)) accumulate(t.grad(ib), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) accumulate(t.grad(ia), g);
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_row_vector(Var a, Var v) {
  const Tensor& av = a.value();
  const Tensor& vv = v.value();
  require_matrix(av, "add_row_vector");
  const std::size_t m = av.rows(), n = av.cols();
  if (vv.numel() != n) {
    throw ShapeError("add_row_vector: vector of " + std::to_string(vv.numel()) +
                     " entries for rows of width " + std::to_string(n));
  }
  Tensor out = av.detached();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += vv[j];
  const std::size_t ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {a, v}, [ia, iv, m, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) accumulate(t.grad(ia), g);
    if (t.needs_grad(iv)) {
      auto& gv = t.grad(iv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value().detached();
  for (auto& x : out.values()) x *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = a.value().detached();
  for (auto& x : out.values()) x += offset;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    accumulate(t.grad(ia), t.grad(self));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var activation(Var x, Activation kind) {
  Tensor out = x.value().detached();
  for (auto& v : out.values()) v = activate(v, kind);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, kind](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double d = kind == Activation::kReLU ? (xv[i] > 0.0 ? 1.0 : 0.0) : gelu_derivative(xv[i]);
      gx[i] += g[i] * d;
    }
  });
}

Var exp(Var x) {
  Tensor out = x.value().detached();
  for (auto& v : out.values()) v = std::exp(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& y = t.value(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i];
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(total), {x}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(ix)) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var row_sum(Var x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "row_sum");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv[i * n + j];
    out[i] = s;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, m, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    accumulate(t.grad(ix), t.grad(self));
  });
}

Var flatten(Var x) { return reshape(x, Shape{x.numel()}); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias width");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out = Tensor::matrix(n, d);
  // Saved for backward: normalised input and inverse stddev per row.
  Tensor xhat = Tensor::matrix(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                               std::size_t self) {
        const auto& g = t.grad(self);
        if (t.needs_grad(ig)) {
          auto& gg = t.grad(ig);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (t.needs_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (t.needs_grad(ix)) {
          auto& gx = t.grad(ix);
          const Tensor& gv = t.value(ig);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_dy = 0.0, mean_dy_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gv[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[i * d + j];
            }
            mean_dy *= inv_d;
            mean_dy_xhat *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gv[j];
              gx[i * d + j] += inv_std[i] * (dy - mean_dy - xhat[i * d + j] * mean_dy_xhat);
            }
          }
        }
      });
}

Tensor softmax_rows(const Tensor& logits) {
  require_matrix(logits, "softmax_rows");
  const std::size_t n = logits.rows(), c = logits.cols();
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return out;
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets, Reduction reduction) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t n = lv.rows(), c = lv.cols();
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: no rows");
  for (int y : targets) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
    }
  }
  Tensor probs = softmax_rows(lv);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    total += std::log(z) + mx - row[targets[i]];
  }
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<int> ys(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor::scalar(total * factor), {logits},
      [il, n, c, factor, ys = std::move(ys), probs = std::move(probs)](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * factor;
        auto& gl = t.grad(il);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
          gl[i * c + static_cast<std::size_t>(ys[i])] -= g;
        }
      });
}

Var kl_divergence(const Tensor& ref_probs, Var logits) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "kl_divergence");
  require_same_shape(ref_probs, lv, "kl_divergence");
  const std::size_t n = lv.rows(), c = lv.cols();
  if (n == 0) throw ShapeError("kl_divergence: no rows");
  Tensor probs = softmax_rows(lv);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) {
      const double p = ref_probs[i * c + j];
      if (p > 0.0) total += p * (std::log(p) - (row[j] - log_z));
    }
  }
  const double factor = 1.0 / static_cast<double>(n);
  Tensor ref = ref_probs.detached();
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor::scalar(total * factor), {logits},
      [il, n, c, factor, ref = std::move(ref), probs = std::move(probs)](Tape& t,
                                                                         std::size_t self) {
        const double g = t.grad(self)[0] * factor;
        auto& gl = t.grad(il);
        for (std::size_t i = 0; i < n; ++i) {
          double ref_mass = 0.0;
          for (std::size_t j = 0; j < c; ++j) ref_mass += ref[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += g * (ref_mass * probs[i * c + j] - ref[i * c + j]);
        }
      });
}

std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
  k = std::min(k, values.size());
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  if (k < idx.size()) std::nth_element(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), before);
  idx.resize(k);
  std::sort(idx.begin(), idx.end(), before);
  return idx;
}

Var topk_mean_exp(Var v, std::size_t k) {
  if (k == 0) throw ParameterError("topk_mean_exp: k must be at least 1");
  const Tensor& vv = v.value();
  if (vv.numel() == 0) throw ShapeError("topk_mean_exp: empty input");
  k = std::min(k, vv.numel());
  auto chosen = topk_indices(vv.values(), k);
  std::vector<double> ex(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    ex[i] = std::exp(vv[chosen[i]]);
    total += ex[i];
  }
  const double inv_k = 1.0 / static_cast<double>(k);
  const std::size_t iv = v.id();
  return v.tape().record(
      Tensor::scalar(total * inv_k), {v},
      [iv, inv_k, chosen = std::move(chosen), ex = std::move(ex)](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * inv_k;
        auto& gv = t.grad(iv);
        for (std::size_t i = 0; i < chosen.size(); ++i) gv[chosen[i]] += g * ex[i];
      });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table},
                             [it, d, saved = std::move(saved)](Tape& t, std::size_t self) {
                               const auto& g = t.grad(self);
                               auto& gt = t.grad(it);
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 double* dst = gt.data() + static_cast<std::size_t>(saved[r]) * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
                               }
                             });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  require_matrix(xv, "select_rows");
  const std::size_t m = xv.rows(), d = xv.cols();
  Tensor out = Tensor::matrix(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw IndexError("select_rows: row " + std::to_string(rows[r]) + " of " + std::to_string(m));
    std::copy_n(xv.data() + rows[r] * d, d, out.data() + r * d);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, d, saved = std::move(saved)](Tape& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(ix);
                           for (std::size_t r = 0; r < saved.size(); ++r)
                             for (std::size_t j = 0; j < d; ++j) gx[saved[r] * d + j] += g[r * d + j];
                         });
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "concat_cols");
  require_matrix(bv, "concat_cols");
  const std::size_t m = av.rows(), ca = av.cols(), cb = bv.cols();
  if (bv.rows() != m) throw ShapeError("concat_cols: row counts differ");
  Tensor out = Tensor::matrix(m, ca + cb);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(bv.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, ca, cb](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const std::size_t w = ca + cb;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * w + j];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * w + ca + j];
    }
  });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "attention");
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const std::size_t B = layout.batch, T = layout.seq_len, H = layout.heads;
  const std::size_t d = qv.cols();
  if (qv.rows() != B * T) throw ShapeError("attention: rows != batch * seq_len");
  if (H == 0 || d % H != 0) throw ShapeError("attention: width not divisible by heads");
  if (layout.lengths.size() != B) throw ShapeError("attention: one length per sequence required");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = Tensor::matrix(B * T, d);
  // probs[b][h][i][j], zero where masked
  std::vector<double> probs(B * H * T * T, 0.0);
  std::vector<std::size_t> limits(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::min(layout.lengths[b], T);
    if (len == 0) throw ShapeError("attention: empty sequence");
    for (std::size_t i = 0; i < T; ++i)
      limits[b * T + i] = layout.causal ? std::min(i + 1, len) : len;
  }
  std::vector<double> scores(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        const std::size_t lim = limits[b * T + i];
        const double* qi = qv.data() + (b * T + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < lim; ++j) {
          const double* kj = kv.data() + (b * T + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* p = probs.data() + ((b * H + h) * T + i) * T;
        double* oi = out.data() + (b * T + i) * d + h * dh;
        for (std::size_t j = 0; j < lim; ++j) {
          p[j] = scores[j] / z;
          const double* vj = vv.data() + (b * T + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, B, T, H, d, dh, inv_sqrt, probs = std::move(probs),
       limits = std::move(limits)](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        const bool need_q = t.needs_grad(iq), need_k = t.needs_grad(ik), need_v = t.needs_grad(iv);
        double* gq = need_q ? t.grad(iq).data() : nullptr;
        double* gk = need_k ? t.grad(ik).data() : nullptr;
        double* gv = need_v ? t.grad(iv).data() : nullptr;
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
              const std::size_t lim = limits[b * T + i];
              const double* p = probs.data() + ((b * H + h) * T + i) * T;
              const double* go = g.data() + (b * T + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < lim; ++j) {
                const double* vj = vv.data() + (b * T + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * p[j];
                if (gv) {
                  double* gvj = gv + (b * T + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = qv.data() + (b * T + i) * d + h * dh;
              for (std::size_t j = 0; j < lim; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.data() + (b * T + j) * d + h * dh;
                if (gq) {
                  double* gqi = gq + (b * T + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (b * T + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace smelab
