#include "pop/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "gemm.hpp"

namespace pop::ops {
namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.defined()) throw InvalidArgument(std::string(op) + ": " + what + " is undefined");
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": " + what + " must be 2-D, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw InvalidArgument(std::string(op) + ": non-finite input");
  }
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul", "lhs");
  require_matrix(b, "matmul", "rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ, lhs " + shape_str(a.shape()) + " rhs " +
                         shape_str(b.shape()));
  }
  auto out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  if (tape.needs_grad({&a, &b})) {
    const std::array<Tensor<T>, 2> ins{a, b};
    tape.record("matmul", ins, out, [a, b, out, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(m, k, n, g, b.data().data(), a.grad_buffer().data());
      if (b.requires_grad()) detail::gemm_tn(m, n, k, a.data().data(), g, b.grad_buffer().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_matrix(x, "linear", "input");
  require_matrix(w, "linear", "weight");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  auto out = Tensor<T>::zeros({m, n});
  auto o = out.data();
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), o.begin() + i * n);
  }
  detail::gemm_nn(m, n, k, x.data().data(), w.data().data(), o.data());
  if (tape.needs_grad({&x, &w, &bias})) {
    std::vector<Tensor<T>> ins{x, w};
    if (has_bias) ins.push_back(bias);
    tape.record("linear", ins, out, [x, w, bias, out, m, n, k, has_bias]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (x.requires_grad()) detail::gemm_nt(m, k, n, g, w.data().data(), x.grad_buffer().data());
      if (w.requires_grad()) detail::gemm_tn(m, n, k, x.data().data(), g, w.grad_buffer().data());
      if (has_bias && bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (tape.needs_grad({&a, &b})) {
    const std::array<Tensor<T>, 2> ins{a, b};
    tape.record("add", ins, out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) add_into(a.grad_buffer(), out.grad());
      if (b.requires_grad()) add_into(b.grad_buffer(), out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (tape.needs_grad({&x})) {
    const std::array<Tensor<T>, 1> ins{x};
    tape.record("scale", ins, out, [x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto dx = x.grad_buffer();
      const auto g = out.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_blockwise(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& rows) {
  require_matrix(x, "add_blockwise", "input");
  require_matrix(rows, "add_blockwise", "rows");
  const std::size_t k = rows.shape()[0], d = rows.shape()[1];
  if (x.shape()[1] != d || k == 0 || x.shape()[0] % k != 0) {
    throw DimensionError("add_blockwise: input " + shape_str(x.shape()) + " is not a stack of " +
                         shape_str(rows.shape()) + " blocks");
  }
  const std::size_t blocks = x.shape()[0] / k, block = k * d;
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  const auto xv = x.data(), rv = rows.data();
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < block; ++i) o[b * block + i] = xv[b * block + i] + rv[i];
  if (tape.needs_grad({&x, &rows})) {
    const std::array<Tensor<T>, 2> ins{x, rows};
    tape.record("add_blockwise", ins, out, [x, rows, out, blocks, block]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      if (x.requires_grad()) add_into(x.grad_buffer(), g);
      if (rows.requires_grad()) {
        auto dr = rows.grad_buffer();
        for (std::size_t b = 0; b < blocks; ++b)
          for (std::size_t i = 0; i < block; ++i) dr[i] += g[b * block + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::from({1}, {acc});
  if (tape.needs_grad({&x})) {
    const std::array<Tensor<T>, 1> ins{x};
    tape.record("sum", ins, out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, std::span<const Tensor<T>> terms, std::span<const T> weights) {
  if (terms.size() != weights.size()) throw InvalidArgument("weighted_sum: terms/weights length differ");
  std::vector<Tensor<T>> used;
  std::vector<T> used_w;
  T acc = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) {
      throw DimensionError("weighted_sum: term " + std::to_string(i) + " is not scalar");
    }
    if (weights[i] == T(0)) continue;
    acc += weights[i] * terms[i].item();
    used.push_back(terms[i]);
    used_w.push_back(weights[i]);
  }
  auto out = Tensor<T>::from({1}, {acc});
  if (tape.needs_grad(std::span<const Tensor<T>>(used))) {
    tape.record("weighted_sum", used, out, [used, used_w, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (std::size_t i = 0; i < used.size(); ++i) {
        if (used[i].requires_grad()) used[i].grad_buffer()[0] += used_w[i] * g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  require_finite(x, "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        o[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) o[base + j * inner] /= z;
    }
  }
  if (tape.needs_grad({&x})) {
    const std::array<Tensor<T>, 1> ins{x};
    tape.record("softmax", ins, out, [x, out, outer, inner, len]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto y = out.data();
      auto dx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          T dot = T(0);
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last extent of " + shape_str(x.shape()));
  }
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      o[r * d + j] = gv[j] * h + bv[j];
    }
  }
  if (tape.needs_grad({&x, &gamma, &beta})) {
    const std::array<Tensor<T>, 3> ins{x, gamma, beta};
    tape.record("layer_norm", ins, out,
                [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
                  if (!out.has_grad()) return;
                  const auto g = out.grad();
                  const auto gv = gamma.data();
                  if (gamma.requires_grad()) {
                    auto dg = gamma.grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
                  }
                  if (beta.requires_grad()) {
                    auto db = beta.grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
                  }
                  if (x.requires_grad()) {
                    auto dx = x.grad_buffer();
                    const T inv_d = T(1) / static_cast<T>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_dh = T(0), mean_dh_h = T(0);
                      for (std::size_t j = 0; j < d; ++j) {
                        const T dh = g[r * d + j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const T dh = g[r * d + j] * gv[j];
                        dx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                      }
                    }
                  }
                });
  }
  return out;
}

namespace {

// Rational minimax erf for single precision (max abs error ~3e-7), which
// vectorizes where libm's erff does not. Double precision uses std::erf.
inline float erf_value(float x) {
  x = x < -4.0f ? -4.0f : x;
  x = x > 4.0f ? 4.0f : x;
  const float x2 = x * x;
  float p = -2.72614225801306e-10f;
  p = p * x2 + 2.77068142495902e-08f;
  p = p * x2 - 2.10102402082508e-06f;
  p = p * x2 - 5.69250639462346e-05f;
  p = p * x2 - 7.34990630326855e-04f;
  p = p * x2 - 2.95459980854025e-03f;
  p = p * x2 - 1.60960333262415e-02f;
  float q = -1.45660718464996e-05f;
  q = q * x2 - 2.13374055278905e-04f;
  q = q * x2 - 1.68282697438203e-03f;
  q = q * x2 - 7.37332916720468e-03f;
  q = q * x2 - 1.42647390514189e-02f;
  return x * p / q;
}

inline double erf_value(double x) { return std::erf(x); }

}  // namespace

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  std::vector<T> cdf(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) cdf[i] = T(0.5) * (T(1) + erf_value(xv[i] * inv_sqrt2));
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * cdf[i];
  if (!tape.needs_grad({&x})) return out;
  // d/dx = Phi(x) + x * phi(x)
  for (std::size_t i = 0; i < o.size(); ++i) cdf[i] += xv[i] * inv_sqrt_2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
  const std::array<Tensor<T>, 1> ins{x};
  tape.record("gelu", ins, out, [x, out, slope = std::move(cdf)]() mutable {
    if (!out.has_grad()) return;
    const auto g = out.grad();
    auto dx = x.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * slope[i];
  });
  return out;
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy", "logits");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (targets.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(batch) + " rows");
  }
  if (batch == 0) throw InvalidArgument("cross_entropy: empty batch");
  for (std::size_t i = 0; i < batch; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= classes) {
      throw InvalidArgument("cross_entropy: target " + std::to_string(targets[i]) + " at index " +
                            std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  std::vector<T> prob(batch * classes);
  const auto lv = logits.data();
  T total = T(0);
  for (std::size_t i = 0; i < batch; ++i) {
    const T* row = lv.data() + i * classes;
    T mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < classes; ++j) {
      prob[i * classes + j] = std::exp(row[j] - mx);
      z += prob[i * classes + j];
    }
    for (std::size_t j = 0; j < classes; ++j) prob[i * classes + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  auto out = Tensor<T>::from({1}, {total / static_cast<T>(batch)});
  if (tape.needs_grad({&logits})) {
    const std::array<Tensor<T>, 1> ins{logits};
    std::vector<int> tgt(targets.begin(), targets.end());
    tape.record("cross_entropy", ins, out,
                [logits, out, prob = std::move(prob), tgt = std::move(tgt), batch, classes]() mutable {
                  if (!out.has_grad()) return;
                  const T g = out.grad()[0] / static_cast<T>(batch);
                  auto dl = logits.grad_buffer();
                  for (std::size_t i = 0; i < batch; ++i) {
                    for (std::size_t j = 0; j < classes; ++j) {
                      const T onehot = static_cast<int>(j) == tgt[i] ? T(1) : T(0);
                      dl[i * classes + j] += g * (prob[i * classes + j] - onehot);
                    }
                  }
                });
  }
  return out;
}

namespace {

template <typename T>
void check_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  require_matrix(qkv, "self_attention", "qkv");
  if (qkv.shape()[0] != batch * tokens || qkv.shape()[1] % 3 != 0 || heads == 0 ||
      (qkv.shape()[1] / 3) % heads != 0) {
    throw DimensionError("self_attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", tokens " + std::to_string(tokens) + ", heads " +
                         std::to_string(heads));
  }
}

// Row-wise softmax of scaled Q.K^T for one (sample, head); writes tokens x tokens.
template <typename T>
void attention_probs(const T* qkv, std::size_t tokens, std::size_t width, std::size_t qoff, std::size_t koff,
                     std::size_t dh, T scale, T* p) {
  for (std::size_t i = 0; i < tokens; ++i) {
    const T* q = qkv + i * width + qoff;
    T* pi = p + i * tokens;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < tokens; ++j) {
      const T* kj = qkv + j * width + koff;
      T s = T(0);
      for (std::size_t c = 0; c < dh; ++c) s += q[c] * kj[c];
      pi[j] = s * scale;
      mx = std::max(mx, pi[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < tokens; ++j) {
      pi[j] = std::exp(pi[j] - mx);
      z += pi[j];
    }
    for (std::size_t j = 0; j < tokens; ++j) pi[j] /= z;
  }
}

}  // namespace

template <typename T>
std::vector<T> attention_weights(const Tensor<T>& qkv, std::size_t batch, std::size_t tokens,
                                 std::size_t heads) {
  check_attention(qkv, batch, tokens, heads);
  const std::size_t width = qkv.shape()[1], d = width / 3, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(batch * heads * tokens * tokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      attention_probs(qkv.data().data() + b * tokens * width, tokens, width, h * dh, d + h * dh, dh, scale,
                      probs.data() + (b * heads + h) * tokens * tokens);
  return probs;
}

template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& qkv, std::size_t batch, std::size_t tokens,
                         std::size_t heads) {
  check_attention(qkv, batch, tokens, heads);
  const std::size_t width = qkv.shape()[1], d = width / 3, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs = attention_weights(qkv, batch, tokens, heads);
  auto out = Tensor<T>::zeros({batch * tokens, d});
  auto o = out.data();
  const T* src = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = src + b * tokens * width;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* p = probs.data() + (b * heads + h) * tokens * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        T* oi = o.data() + (b * tokens + i) * d + h * dh;
        for (std::size_t j = 0; j < tokens; ++j) {
          const T pij = p[i * tokens + j];
          const T* vj = base + j * width + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  if (tape.needs_grad({&qkv})) {
    const std::array<Tensor<T>, 1> ins{qkv};
    tape.record("self_attention", ins, out,
                [qkv, out, probs = std::move(probs), batch, tokens, heads, width, d, dh, scale]() mutable {
                  if (!out.has_grad()) return;
                  const T* g = out.grad().data();
                  const T* src = qkv.data().data();
                  T* dsrc = qkv.grad_buffer().data();
                  std::vector<T> dp(tokens * tokens);
                  for (std::size_t b = 0; b < batch; ++b) {
                    const T* base = src + b * tokens * width;
                    T* dbase = dsrc + b * tokens * width;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const T* p = probs.data() + (b * heads + h) * tokens * tokens;
                      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
                      // dP and dV
                      for (std::size_t i = 0; i < tokens; ++i) {
                        const T* gi = g + (b * tokens + i) * d + h * dh;
                        for (std::size_t j = 0; j < tokens; ++j) {
                          const T* vj = base + j * width + vo;
                          T* dvj = dbase + j * width + vo;
                          const T pij = p[i * tokens + j];
                          T acc = T(0);
                          for (std::size_t c = 0; c < dh; ++c) {
                            acc += gi[c] * vj[c];
                            dvj[c] += pij * gi[c];
                          }
                          dp[i * tokens + j] = acc;
                        }
                      }
                      // softmax backward in place: dS = P * (dP - rowsum(P * dP))
                      for (std::size_t i = 0; i < tokens; ++i) {
                        T dot = T(0);
                        for (std::size_t j = 0; j < tokens; ++j) dot += p[i * tokens + j] * dp[i * tokens + j];
                        for (std::size_t j = 0; j < tokens; ++j)
                          dp[i * tokens + j] = p[i * tokens + j] * (dp[i * tokens + j] - dot) * scale;
                      }
                      for (std::size_t i = 0; i < tokens; ++i) {
                        const T* qi = base + i * width + qo;
                        T* dqi = dbase + i * width + qo;
                        for (std::size_t j = 0; j < tokens; ++j) {
                          const T s = dp[i * tokens + j];
                          const T* kj = base + j * width + ko;
                          T* dkj = dbase + j * width + ko;
                          for (std::size_t c = 0; c < dh; ++c) {
                            dqi[c] += s * kj[c];
                            dkj[c] += s * qi[c];
                          }
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> assemble_tokens(Tape<T>& tape, std::size_t batch, std::span<const TokenSegment<T>> segments) {
  if (segments.empty()) throw InvalidArgument("assemble_tokens: no segments");
  if (batch == 0) throw InvalidArgument("assemble_tokens: batch must be positive");
  const std::size_t d = segments.front().rows.cols();
  std::vector<std::size_t> counts, offsets;
  std::size_t tokens = 0;
  for (const auto& s : segments) {
    require_matrix(s.rows, "assemble_tokens", "segment");
    if (s.rows.cols() != d) {
      throw DimensionError("assemble_tokens: segment " + shape_str(s.rows.shape()) + " has width != " +
                           std::to_string(d));
    }
    std::size_t count = s.rows.rows();
    if (!s.shared) {
      if (count % batch != 0) {
        throw DimensionError("assemble_tokens: per-sample segment " + shape_str(s.rows.shape()) +
                             " not divisible by batch " + std::to_string(batch));
      }
      count /= batch;
    }
    offsets.push_back(tokens);
    counts.push_back(count);
    tokens += count;
  }
  auto out = Tensor<T>::zeros({batch * tokens, d});
  auto o = out.data();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto src = segments[s].rows.data();
    const bool shared = segments[s].shared;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* from = src.data() + (shared ? 0 : b * counts[s] * d);
      std::copy(from, from + counts[s] * d, o.data() + (b * tokens + offsets[s]) * d);
    }
  }
  std::vector<Tensor<T>> ins;
  std::vector<bool> shared_flags;
  for (const auto& s : segments) {
    ins.push_back(s.rows);
    shared_flags.push_back(s.shared);
  }
  if (tape.needs_grad(std::span<const Tensor<T>>(ins))) {
    tape.record("assemble_tokens", ins, out,
                [ins, shared_flags, counts, offsets, out, batch, tokens, d]() mutable {
                  if (!out.has_grad()) return;
                  const auto g = out.grad();
                  for (std::size_t s = 0; s < ins.size(); ++s) {
                    if (!ins[s].requires_grad()) continue;
                    auto dst = ins[s].grad_buffer();
                    for (std::size_t b = 0; b < batch; ++b) {
                      const T* from = g.data() + (b * tokens + offsets[s]) * d;
                      T* to = dst.data() + (shared_flags[s] ? 0 : b * counts[s] * d);
                      for (std::size_t i = 0; i < counts[s] * d; ++i) to[i] += from[i];
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> take_tokens(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t tokens,
                      std::size_t begin, std::size_t count) {
  require_matrix(x, "take_tokens", "input");
  if (x.shape()[0] != batch * tokens || begin + count > tokens) {
    throw DimensionError("take_tokens: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") of " + std::to_string(tokens) + " tokens x batch " + std::to_string(batch) +
                         " from " + shape_str(x.shape()));
  }
  const std::size_t d = x.cols();
  auto out = Tensor<T>::zeros({batch * count, d});
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* from = xv.data() + (b * tokens + begin) * d;
    std::copy(from, from + count * d, o.data() + b * count * d);
  }
  if (tape.needs_grad({&x})) {
    const std::array<Tensor<T>, 1> ins{x};
    tape.record("take_tokens", ins, out, [x, out, batch, tokens, begin, count, d]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        T* to = dx.data() + (b * tokens + begin) * d;
        const T* from = g.data() + b * count * d;
        for (std::size_t i = 0; i < count * d; ++i) to[i] += from[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_mean(Tape<T>& tape, const Tensor<T>& x, std::size_t group) {
  require_matrix(x, "group_mean", "input");
  if (group == 0 || x.shape()[0] % group != 0) {
    throw DimensionError("group_mean: " + shape_str(x.shape()) + " rows not divisible into groups of " +
                         std::to_string(group));
  }
  const std::size_t n = x.shape()[0] / group, d = x.cols();
  const T inv = T(1) / static_cast<T>(group);
  auto out = Tensor<T>::zeros({n, d});
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t j = 0; j < d; ++j) o[i * d + j] += xv[(i * group + r) * d + j];
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] *= inv;
  }
  if (tape.needs_grad({&x})) {
    const std::array<Tensor<T>, 1> ins{x};
    tape.record("group_mean", ins, out, [x, out, n, d, group, inv]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < group; ++r)
          for (std::size_t j = 0; j < d; ++j) dx[(i * group + r) * d + j] += g[i * d + j] * inv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t width = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols", "part");
    if (p.rows() != n) {
      throw DimensionError("concat_cols: part " + shape_str(p.shape()) + " has " + std::to_string(p.rows()) +
                           " rows, expected " + std::to_string(n));
    }
    offsets.push_back(width);
    width += p.cols();
  }
  auto out = Tensor<T>::zeros({n, width});
  auto o = out.data();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy(pv.begin() + i * w, pv.begin() + (i + 1) * w, o.begin() + i * width + offsets[k]);
  }
  std::vector<Tensor<T>> ins(parts.begin(), parts.end());
  if (tape.needs_grad(std::span<const Tensor<T>>(ins))) {
    tape.record("concat_cols", ins, out, [ins, offsets, out, n, width]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k].requires_grad()) continue;
        const std::size_t w = ins[k].cols();
        auto dst = ins[k].grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) dst[i * w + j] += g[i * width + offsets[k] + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> elementwise_max(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw InvalidArgument("elementwise_max: no inputs");
  const Shape& shape = parts.front().shape();
  for (const auto& p : parts) {
    if (p.shape() != shape) {
      throw DimensionError("elementwise_max: shapes differ " + shape_str(shape) + " vs " +
                           shape_str(p.shape()));
    }
  }
  auto out = Tensor<T>::zeros(shape);
  auto o = out.data();
  std::vector<std::uint32_t> arg(o.size(), 0);
  const auto first = parts.front().data();
  std::copy(first.begin(), first.end(), o.begin());
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t i = 0; i < o.size(); ++i) {
      if (pv[i] > o[i]) {
        o[i] = pv[i];
        arg[i] = static_cast<std::uint32_t>(k);
      }
    }
  }
  std::vector<Tensor<T>> ins(parts.begin(), parts.end());
  if (tape.needs_grad(std::span<const Tensor<T>>(ins))) {
    tape.record("elementwise_max", ins, out, [ins, arg = std::move(arg), out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        auto& src = ins[arg[i]];
        if (src.requires_grad()) src.grad_buffer()[i] += g[i];
      }
    });
  }
  return out;
}

#define POP_INSTANTIATE_OPS(T)                                                                             \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                 \
  template Tensor<T> add_blockwise(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> weighted_sum(Tape<T>&, std::span<const Tensor<T>>, std::span<const T>);               \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> self_attention(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);    \
  template std::vector<T> attention_weights(const Tensor<T>&, std::size_t, std::size_t, std::size_t);      \
  template Tensor<T> assemble_tokens(Tape<T>&, std::size_t, std::span<const TokenSegment<T>>);             \
  template Tensor<T> take_tokens(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t,        \
                                 std::size_t);                                                             \
  template Tensor<T> group_mean(Tape<T>&, const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> concat_cols(Tape<T>&, std::span<const Tensor<T>>);                                    \
  template Tensor<T> elementwise_max(Tape<T>&, std::span<const Tensor<T>>);

POP_INSTANTIATE_OPS(float)
POP_INSTANTIATE_OPS(double)

#undef POP_INSTANTIATE_OPS

}  // namespace pop::ops
