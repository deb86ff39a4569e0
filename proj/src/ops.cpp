#include "stagesum/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stagesum/errors.hpp"

namespace stagesum {

using detail::make_result;
using detail::Node;

namespace {

constexpr double kLogClamp = 1e-30;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                       " and " + shape_string(b.shape()));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

// C[m×n] += A[m×k] · B[k×n]
void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  }
  return t;
}

Node& input(Node& out, std::size_t i) { return *out.inputs[i]; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error("matmul", a, b);
  std::vector<double> c(m * n, 0.0);
  gemm_accumulate(a.values().data(), b.values().data(), c.data(), m, k, n);
  return make_result({m, n}, std::move(c), {&a, &b}, [m, k, n](Node& out) {
    Node& na = input(out, 0);
    Node& nb = input(out, 1);
    if (na.requires_grad) {
      const auto bt = transpose(nb.value, k, n);
      gemm_accumulate(out.grad.data(), bt.data(), na.ensure_grad().data(), m, n, k);
    }
    if (nb.requires_grad) {
      const auto at = transpose(na.value, m, k);
      gemm_accumulate(at.data(), out.grad.data(), nb.ensure_grad().data(), k, m, n);
    }
  });
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank("matmul_transposed", a, 2);
  require_rank("matmul_transposed", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) shape_error("matmul_transposed", a, b);
  std::vector<double> c(m * n, 0.0);
  const auto bt = transpose(b.values(), n, k);
  gemm_accumulate(a.values().data(), bt.data(), c.data(), m, k, n);
  return make_result({m, n}, std::move(c), {&a, &b}, [m, k, n](Node& out) {
    Node& na = input(out, 0);
    Node& nb = input(out, 1);
    if (na.requires_grad) {
      gemm_accumulate(out.grad.data(), nb.value.data(), na.ensure_grad().data(), m, n, k);
    }
    if (nb.requires_grad) {
      const auto gt = transpose(out.grad, m, n);
      gemm_accumulate(gt.data(), na.value.data(), nb.ensure_grad().data(), n, m, k);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a, b);
  std::vector<double> c(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(c), {&a, &b}, [](Node& out) {
    for (std::size_t which = 0; which < 2; ++which) {
      Node& in = input(out, which);
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a, b);
  std::vector<double> c(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(c), {&a, &b}, [](Node& out) {
    for (std::size_t which = 0; which < 2; ++which) {
      Node& in = input(out, which);
      if (!in.requires_grad) continue;
      const double sign = which == 0 ? 1.0 : -1.0;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * out.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  std::vector<double> c(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(c), {&a, &b}, [](Node& out) {
    Node& na = input(out, 0);
    Node& nb = input(out, 1);
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * na.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> c(x.values().begin(), x.values().end());
  for (auto& v : c) v *= factor;
  return make_result(x.shape(), std::move(c), {&x}, [factor](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * out.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  const std::size_t n = bias.dim(0);
  if (x.shape().back() != n) shape_error("add_bias", x, bias);
  std::vector<double> c(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += bv[i % n];
  return make_result(x.shape(), std::move(c), {&x, &bias}, [n](Node& out) {
    Node& nx = input(out, 0);
    Node& nb = input(out, 1);
    if (nx.requires_grad) {
      auto& g = nx.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> y(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xv[i];
    if (v >= 0) {
      y[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y[i] = e / (1.0 + e);
    }
  }
  return make_result(x.shape(), std::move(y), {&x}, [](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = out.value[i];
      g[i] += out.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> y(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  }
  return make_result(x.shape(), std::move(y), {&x}, [](Node& out) {
    Node& in = input(out, 0);
    auto& g = in.ensure_grad();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += out.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total}, {&x}, [](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (auto& v : g) v += out.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const auto xv = x.values();
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) {
        const double v = xv[base + l * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - mx);
        y[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) y[base + l * inner] /= total;
    }
  }
  return make_result(shape, std::move(y), {&x}, [outer, inner, len](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) {
          dot += out.grad[base + l * inner] * out.value[base + l * inner];
        }
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          g[idx] += out.value[idx] * (out.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("layer_norm", gain, 1);
  require_rank("layer_norm", bias, 1);
  const std::size_t n = x.shape().back();
  if (gain.dim(0) != n) shape_error("layer_norm", x, gain);
  if (bias.dim(0) != n) shape_error("layer_norm", x, bias);
  const std::size_t rows = x.size() / n;
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  std::vector<double> y(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (row[i] - mu) * inv;
      xhat[r * n + i] = h;
      y[r * n + i] = gv[i] * h + bv[i];
    }
  }
  return make_result(x.shape(), std::move(y), {&x, &gain, &bias},
                     [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& out) {
                       Node& nx = input(out, 0);
                       Node& ng = input(out, 1);
                       Node& nb = input(out, 2);
                       if (ng.requires_grad) {
                         auto& g = ng.ensure_grad();
                         for (std::size_t i = 0; i < out.grad.size(); ++i) {
                           g[i % n] += out.grad[i] * xhat[i];
                         }
                       }
                       if (nb.requires_grad) {
                         auto& g = nb.ensure_grad();
                         for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i];
                       }
                       if (!nx.requires_grad) return;
                       auto& g = nx.ensure_grad();
                       std::vector<double> dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_d = 0.0, mean_dx = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           dxhat[i] = out.grad[r * n + i] * ng.value[i];
                           mean_d += dxhat[i];
                           mean_dx += dxhat[i] * xhat[r * n + i];
                         }
                         mean_d /= static_cast<double>(n);
                         mean_dx /= static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           g[r * n + i] +=
                               inv_std[r] * (dxhat[i] - mean_d - xhat[r * n + i] * mean_dx);
                         }
                       }
                     });
}

Tensor dropout_tokens(const Tensor& x, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  require_rank("dropout_tokens", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> row_scale(rows);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& s : row_scale) s = rng.bernoulli(rate) ? 0.0 : keep_scale;
  std::vector<double> y(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xv[r * cols + c] * row_scale[r];
  }
  return make_result(x.shape(), std::move(y), {&x},
                     [cols, row_scale = std::move(row_scale)](Node& out) {
                       auto& g = input(out, 0).ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += out.grad[i] * row_scale[i / cols];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank("gather_rows", table, 2);
  const std::size_t n = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  std::vector<int> index(ids.begin(), ids.end());
  std::vector<double> y(index.size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= n) {
      throw DimensionError("gather_rows: id " + std::to_string(index[r]) +
                           " out of range for table " + shape_string(table.shape()));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(index[r]) * d, d, y.data() + r * d);
  }
  const std::size_t rows = index.size();
  return make_result({rows, d}, std::move(y), {&table},
                     [d, index = std::move(index)](Node& out) {
                       auto& g = input(out, 0).ensure_grad();
                       for (std::size_t r = 0; r < index.size(); ++r) {
                         double* dst = g.data() + static_cast<std::size_t>(index[r]) * d;
                         for (std::size_t c = 0; c < d; ++c) dst[c] += out.grad[r * d + c];
                       }
                     });
}

Tensor leading_rows(const Tensor& table, std::size_t count) {
  require_rank("leading_rows", table, 2);
  const std::size_t d = table.dim(1);
  if (count == 0 || count > table.dim(0)) {
    throw DimensionError("leading_rows: " + std::to_string(count) + " rows requested from " +
                         shape_string(table.shape()));
  }
  std::vector<double> y(table.values().begin(), table.values().begin() + count * d);
  return make_result({count, d}, std::move(y), {&table}, [](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  require_rank("concat_rows", top, 2);
  require_rank("concat_rows", bottom, 2);
  if (top.dim(1) != bottom.dim(1)) shape_error("concat_rows", top, bottom);
  std::vector<double> y(top.values().begin(), top.values().end());
  y.insert(y.end(), bottom.values().begin(), bottom.values().end());
  const std::size_t split = top.size();
  return make_result({top.dim(0) + bottom.dim(0), top.dim(1)}, std::move(y), {&top, &bottom},
                     [split](Node& out) {
                       Node& a = input(out, 0);
                       Node& b = input(out, 1);
                       if (a.requires_grad) {
                         auto& g = a.ensure_grad();
                         for (std::size_t i = 0; i < split; ++i) g[i] += out.grad[i];
                       }
                       if (b.requires_grad) {
                         auto& g = b.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[split + i];
                       }
                     });
}

Tensor attention_logits(const Tensor& q, const Tensor& k, std::size_t heads) {
  require_rank("attention_logits", q, 2);
  require_rank("attention_logits", k, 2);
  const std::size_t tq = q.dim(0), tk = k.dim(0), hidden = q.dim(1);
  if (k.dim(1) != hidden) shape_error("attention_logits", q, k);
  if (heads == 0 || hidden % heads != 0) {
    throw DimensionError("attention_logits: hidden " + std::to_string(hidden) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = hidden / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.values(), kv = k.values();
  std::vector<double> y(heads * tq * tk);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      const double* qrow = qv.data() + i * hidden + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        const double* krow = kv.data() + j * hidden + h * dh;
        double dot = 0.0;
        for (std::size_t d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
        y[(h * tq + i) * tk + j] = dot * s;
      }
    }
  }
  return make_result({heads, tq, tk}, std::move(y), {&q, &k},
                     [heads, tq, tk, hidden, dh, s](Node& out) {
                       Node& nq = input(out, 0);
                       Node& nk = input(out, 1);
                       double* gq = nq.requires_grad ? nq.ensure_grad().data() : nullptr;
                       double* gk = nk.requires_grad ? nk.ensure_grad().data() : nullptr;
                       for (std::size_t h = 0; h < heads; ++h) {
                         for (std::size_t i = 0; i < tq; ++i) {
                           for (std::size_t j = 0; j < tk; ++j) {
                             const double go = out.grad[(h * tq + i) * tk + j] * s;
                             if (go == 0.0) continue;
                             const std::size_t qo = i * hidden + h * dh, ko = j * hidden + h * dh;
                             for (std::size_t d = 0; d < dh; ++d) {
                               if (gq) gq[qo + d] += go * nk.value[ko + d];
                               if (gk) gk[ko + d] += go * nq.value[qo + d];
                             }
                           }
                         }
                       }
                     });
}

Tensor add_attention_offsets(const Tensor& logits, const Tensor& offsets) {
  require_rank("add_attention_offsets", logits, 3);
  require_rank("add_attention_offsets", offsets, 2);
  const std::size_t plane = logits.dim(1) * logits.dim(2);
  if (offsets.dim(0) != logits.dim(1) || offsets.dim(1) != logits.dim(2)) {
    shape_error("add_attention_offsets", logits, offsets);
  }
  std::vector<double> y(logits.values().begin(), logits.values().end());
  const auto ov = offsets.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += ov[i % plane];
  return make_result(logits.shape(), std::move(y), {&logits}, [](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

Tensor attention_context(const Tensor& probs, const Tensor& v) {
  require_rank("attention_context", probs, 3);
  require_rank("attention_context", v, 2);
  const std::size_t heads = probs.dim(0), tq = probs.dim(1), tk = probs.dim(2);
  const std::size_t hidden = v.dim(1);
  if (v.dim(0) != tk || hidden % heads != 0) shape_error("attention_context", probs, v);
  const std::size_t dh = hidden / heads;
  const auto pv = probs.values(), vv = v.values();
  std::vector<double> y(tq * hidden, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      double* yrow = y.data() + i * hidden + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        const double p = pv[(h * tq + i) * tk + j];
        const double* vrow = vv.data() + j * hidden + h * dh;
        for (std::size_t d = 0; d < dh; ++d) yrow[d] += p * vrow[d];
      }
    }
  }
  return make_result({tq, hidden}, std::move(y), {&probs, &v},
                     [heads, tq, tk, hidden, dh](Node& out) {
                       Node& np = input(out, 0);
                       Node& nv = input(out, 1);
                       double* gp = np.requires_grad ? np.ensure_grad().data() : nullptr;
                       double* gv = nv.requires_grad ? nv.ensure_grad().data() : nullptr;
                       for (std::size_t h = 0; h < heads; ++h) {
                         for (std::size_t i = 0; i < tq; ++i) {
                           const double* grow = out.grad.data() + i * hidden + h * dh;
                           for (std::size_t j = 0; j < tk; ++j) {
                             const std::size_t pi = (h * tq + i) * tk + j;
                             const std::size_t vo = j * hidden + h * dh;
                             if (gp) {
                               double dot = 0.0;
                               for (std::size_t d = 0; d < dh; ++d) dot += grow[d] * nv.value[vo + d];
                               gp[pi] += dot;
                             }
                             if (gv) {
                               const double p = np.value[pi];
                               for (std::size_t d = 0; d < dh; ++d) gv[vo + d] += p * grow[d];
                             }
                           }
                         }
                       }
                     });
}

Tensor select_head(const Tensor& logits, std::size_t head) {
  require_rank("select_head", logits, 3);
  if (head >= logits.dim(0)) {
    throw DimensionError("select_head: head " + std::to_string(head) + " out of range for " +
                         shape_string(logits.shape()));
  }
  const std::size_t plane = logits.dim(1) * logits.dim(2);
  const auto lv = logits.values();
  std::vector<double> y(lv.begin() + head * plane, lv.begin() + (head + 1) * plane);
  return make_result({logits.dim(1), logits.dim(2)}, std::move(y), {&logits},
                     [head, plane](Node& out) {
                       auto& g = input(out, 0).ensure_grad();
                       for (std::size_t i = 0; i < plane; ++i) g[head * plane + i] += out.grad[i];
                     });
}

Tensor scatter_columns(const Tensor& a, std::span<const int> ids, std::span<const std::uint8_t> include,
                       std::size_t vocab) {
  require_rank("scatter_columns", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (ids.size() != cols || include.size() != cols) {
    throw DimensionError("scatter_columns: " + std::to_string(ids.size()) + " ids for logits " +
                         shape_string(a.shape()));
  }
  std::vector<int> target(cols, -1);
  for (std::size_t s = 0; s < cols; ++s) {
    if (!include[s]) continue;
    if (ids[s] < 0 || static_cast<std::size_t>(ids[s]) >= vocab) {
      throw DimensionError("scatter_columns: id " + std::to_string(ids[s]) + " outside vocab " +
                           std::to_string(vocab));
    }
    target[s] = ids[s];
  }
  const auto av = a.values();
  std::vector<double> y(rows * vocab, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t s = 0; s < cols; ++s) {
      if (target[s] >= 0) y[t * vocab + static_cast<std::size_t>(target[s])] += av[t * cols + s];
    }
  }
  return make_result({rows, vocab}, std::move(y), {&a},
                     [rows, cols, vocab, target = std::move(target)](Node& out) {
                       auto& g = input(out, 0).ensure_grad();
                       for (std::size_t t = 0; t < rows; ++t) {
                         for (std::size_t s = 0; s < cols; ++s) {
                           if (target[s] >= 0) {
                             g[t * cols + s] +=
                                 out.grad[t * vocab + static_cast<std::size_t>(target[s])];
                           }
                         }
                       }
                     });
}

Tensor mix_rows(const Tensor& gate, const Tensor& y, const Tensor& c) {
  require_rank("mix_rows", y, 2);
  if (y.shape() != c.shape()) shape_error("mix_rows", y, c);
  const std::size_t rows = y.dim(0), cols = y.dim(1);
  if (gate.rank() != 2 || gate.dim(0) != rows || gate.dim(1) != 1) shape_error("mix_rows", gate, y);
  const auto gv = gate.values(), yv = y.values(), cv = c.values();
  std::vector<double> z(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double p = gv[r];
    for (std::size_t j = 0; j < cols; ++j) {
      z[r * cols + j] = p * yv[r * cols + j] + (1.0 - p) * cv[r * cols + j];
    }
  }
  return make_result({rows, cols}, std::move(z), {&gate, &y, &c}, [rows, cols](Node& out) {
    Node& ng = input(out, 0);
    Node& ny = input(out, 1);
    Node& nc = input(out, 2);
    double* gg = ng.requires_grad ? ng.ensure_grad().data() : nullptr;
    double* gy = ny.requires_grad ? ny.ensure_grad().data() : nullptr;
    double* gc = nc.requires_grad ? nc.ensure_grad().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double p = ng.value[r];
      double dp = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t i = r * cols + j;
        const double go = out.grad[i];
        dp += go * (ny.value[i] - nc.value[i]);
        if (gy) gy[i] += p * go;
        if (gc) gc[i] += (1.0 - p) * go;
      }
      if (gg) gg[r] += dp;
    }
  });
}

Tensor nll_sum(const Tensor& probs, std::span<const int> targets, std::span<const std::uint8_t> include,
               std::size_t* clamped) {
  require_rank("nll_sum", probs, 2);
  const std::size_t rows = probs.dim(0), vocab = probs.dim(1);
  if (targets.size() != rows || include.size() != rows) {
    throw DimensionError("nll_sum: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(probs.shape()));
  }
  const auto pv = probs.values();
  std::vector<std::size_t> picked;
  std::vector<double> scale_at;
  double total = 0.0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!include[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw DimensionError("nll_sum: target id " + std::to_string(targets[t]) + " outside vocab " +
                           std::to_string(vocab));
    }
    const std::size_t idx = t * vocab + static_cast<std::size_t>(targets[t]);
    const double p = pv[idx];
    if (p < kLogClamp) {
      if (clamped) ++*clamped;
      total -= std::log(kLogClamp);
      continue;
    }
    total -= std::log(p);
    picked.push_back(idx);
    scale_at.push_back(-1.0 / p);
  }
  return make_result({1}, {total}, {&probs},
                     [picked = std::move(picked), scale_at = std::move(scale_at)](Node& out) {
                       auto& g = input(out, 0).ensure_grad();
                       for (std::size_t i = 0; i < picked.size(); ++i) {
                         g[picked[i]] += out.grad[0] * scale_at[i];
                       }
                     });
}

Tensor binary_cross_entropy(const Tensor& p, std::span<const double> labels,
                            std::span<const std::uint8_t> include) {
  const std::size_t n = p.size();
  if (labels.size() != n || include.size() != n) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + shape_string(p.shape()));
  }
  const auto pv = p.values();
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += include[i] ? 1 : 0;
  if (count == 0) throw ValidationError("binary_cross_entropy: no valid positions");
  std::vector<double> dp(n, 0.0);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < n; ++i) {
    if (!include[i]) continue;
    const double y = labels[i];
    const double pi = pv[i];
    const double lp = std::max(pi, kLogClamp);
    const double lq = std::max(1.0 - pi, kLogClamp);
    total -= y * std::log(lp) + (1.0 - y) * std::log(lq);
    double d = 0.0;
    if (pi > kLogClamp) d -= y / pi;
    if (1.0 - pi > kLogClamp) d += (1.0 - y) / (1.0 - pi);
    dp[i] = d * inv;
  }
  return make_result({1}, {total * inv}, {&p}, [dp = std::move(dp)](Node& out) {
    auto& g = input(out, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0] * dp[i];
  });
}

}  // namespace stagesum
