#include "modrank/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "modrank/error.hpp"

namespace modrank::ops {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using BlockMap = Eigen::Map<RowMat, 0, Strided>;
using ConstBlockMap = Eigen::Map<const RowMat, 0, Strided>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void record(Tensor& out, std::vector<NodePtr> inputs, std::function<void()> backward) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(inputs), out.node(), std::move(backward));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_finite(std::span<const double> xs, const char* op) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

template <class F, class G>
Tensor unary(const Tensor& x, F forward, G derivative) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = forward(xs[i]);
  Tensor result(x.shape(), std::move(out));
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    record(result, {xn}, [xn, on, derivative] {
      double* gx = xn->grad.data();
      for (std::size_t i = 0; i < xn->data.size(); ++i) {
        gx[i] += on->grad[i] * derivative(xn->data[i], on->data[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Tensor result({m, n}, std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    record(result, {an, bn}, [an, bn, on, m, k, n] {
      ConstMatMap dc(on->grad.data(), m, n);
      if (an->requires_grad) {
        MatMap(an->grad.data(), m, k).noalias() += dc * ConstMatMap(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        MatMap(bn->grad.data(), k, n).noalias() += ConstMatMap(an->data.data(), m, k).transpose() * dc;
      }
    });
  }
  return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + "ᵀ");
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), n, k).transpose();
  Tensor result({m, n}, std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    record(result, {an, bn}, [an, bn, on, m, k, n] {
      ConstMatMap dc(on->grad.data(), m, n);
      if (an->requires_grad) {
        MatMap(an->grad.data(), m, k).noalias() += dc * ConstMatMap(bn->data.data(), n, k);
      }
      if (bn->requires_grad) {
        MatMap(bn->grad.data(), n, k).noalias() += dc.transpose() * ConstMatMap(an->data.data(), m, k);
      }
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row_bias(matmul(x, w), b);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  Tensor result(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    record(result, {an, bn}, [an, bn, on] {
      for (auto* in : {an.get(), bn.get()}) {
        if (!in->requires_grad) continue;
        for (std::size_t i = 0; i < on->grad.size(); ++i) in->grad[i] += on->grad[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  Tensor result(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    record(result, {an, bn}, [an, bn, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) an->grad[i] += on->grad[i] * bn->data[i];
        if (bn->requires_grad) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row_bias");
  const auto m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(x.shape()));
  }
  const auto xs = x.data(), bs = bias.data();
  std::vector<double> out(xs.begin(), xs.end());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bs[c];
  }
  Tensor result(x.shape(), std::move(out));
  if (tracking({&x, &bias})) {
    NodePtr xn = x.node(), bn = bias.node();
    auto* on = result.node().get();
    record(result, {xn, bn}, [xn, bn, on, m, n] {
      if (xn->requires_grad) {
        for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < n; ++c) bn->grad[c] += on->grad[r * n + c];
        }
      }
    });
  }
  return result;
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  // 0.5·v·(1 + tanh(u)) == v·σ(2u) with u = √(2/π)(v + 0.044715v³).
  static constexpr double c2 = 2.0 * 0.7978845608028654;
  static constexpr double a = 0.044715;
  using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Arr> v(x.data().data(), n);
  Arr sig = (1.0 + (-c2 * (v + a * v.cube())).exp()).inverse();
  std::vector<double> out(x.numel());
  Eigen::Map<Arr>(out.data(), n) = v * sig;
  Tensor result(x.shape(), std::move(out));
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    record(result, {xn}, [xn, on, n, sig = std::move(sig)] {
      Eigen::Map<const Arr> vv(xn->data.data(), n);
      Eigen::Map<const Arr> go(on->grad.data(), n);
      Eigen::Map<Arr> gx(xn->grad.data(), n);
      gx += go * (sig + vv * sig * (1.0 - sig) * c2 * (1.0 + 3.0 * a * vv.square()));
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  require_finite(x.data(), "sigmoid");
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor result = Tensor::scalar(total);
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    record(result, {xn}, [xn, on] {
      const double g = on->grad[0];
      for (auto& gx : xn->grad) gx += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (!(axis == -1 || axis == rank - 1) || rank == 0) {
    throw DimensionError("softmax supports only the last axis; got axis " + std::to_string(axis) +
                         " for " + shape_str(x.shape()));
  }
  require_finite(x.data(), "softmax");
  const auto n = last_dim(x);
  const auto rows = x.numel() / n;
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xs.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    record(result, {xn}, [xn, on, rows, n] {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = on->data.data() + r * n;
        const double* gy = on->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
        double* gx = xn->grad.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) gx[c] += y[c] * (gy[c] - dot);
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps >= 0.0)) throw ContractError("layer_norm: eps must be non-negative");
  const auto n = last_dim(x);
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / n;
  const auto xs = x.data(), gs = gain.data(), bs = bias.data();
  std::vector<double> out(xs.size());
  std::vector<double> xhat(xs.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xs.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += in[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (in[c] - mu) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = gs[c] * h + bs[c];
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (tracking({&x, &gain, &bias})) {
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    auto* on = result.node().get();
    record(result, {xn, gn, bn},
           [xn, gn, bn, on, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
             const double inv_n = 1.0 / static_cast<double>(n);
             for (std::size_t r = 0; r < rows; ++r) {
               const double* gy = on->grad.data() + r * n;
               const double* h = xhat.data() + r * n;
               if (gn->requires_grad || bn->requires_grad) {
                 for (std::size_t c = 0; c < n; ++c) {
                   if (gn->requires_grad) gn->grad[c] += gy[c] * h[c];
                   if (bn->requires_grad) bn->grad[c] += gy[c];
                 }
               }
               if (!xn->requires_grad) continue;
               double sum_d = 0.0, sum_dh = 0.0;
               for (std::size_t c = 0; c < n; ++c) {
                 const double d = gy[c] * gn->data[c];
                 sum_d += d;
                 sum_dh += d * h[c];
               }
               double* gx = xn->grad.data() + r * n;
               for (std::size_t c = 0; c < n; ++c) {
                 const double d = gy[c] * gn->data[c];
                 gx[c] += inv_std[r] * (d - inv_n * sum_d - h[c] * inv_n * sum_dh);
               }
             }
           });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const auto m = logits.dim(0), v = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  if (m == 0) throw DimensionError("cross_entropy over zero rows");
  require_finite(logits.data(), "cross_entropy");
  const auto xs = logits.data();
  std::vector<double> probs(xs.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ContractError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                          std::to_string(v) + ")");
    }
    const double* in = xs.data() + r * v;
    double* p = probs.data() + r * v;
    const double mx = *std::max_element(in, in + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += (p[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < v; ++c) p[c] /= z;
    loss += std::log(z) + mx - in[t];
  }
  Tensor result = Tensor::scalar(loss / static_cast<double>(m));
  if (tracking({&logits})) {
    NodePtr xn = logits.node();
    auto* on = result.node().get();
    std::vector<int> tgt(targets.begin(), targets.end());
    record(result, {xn}, [xn, on, m, v, probs = std::move(probs), tgt = std::move(tgt)] {
      const double g = on->grad[0] / static_cast<double>(m);
      for (std::size_t r = 0; r < m; ++r) {
        double* gx = xn->grad.data() + r * v;
        const double* p = probs.data() + r * v;
        for (std::size_t c = 0; c < v; ++c) gx[c] += g * p[c];
        gx[tgt[r]] -= g;
      }
    });
  }
  return result;
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  const auto m = logits.numel();
  if (labels.size() != m) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  if (m == 0) throw DimensionError("bce_with_logits over zero rows");
  require_finite(logits.data(), "bce_with_logits");
  const auto xs = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double x = xs[i], y = labels[i];
    if (y != 0.0 && y != 1.0) throw ContractError("bce_with_logits: labels must be 0 or 1");
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor result = Tensor::scalar(loss / static_cast<double>(m));
  if (tracking({&logits})) {
    NodePtr xn = logits.node();
    auto* on = result.node().get();
    std::vector<double> ys(labels.begin(), labels.end());
    record(result, {xn}, [xn, on, m, ys = std::move(ys)] {
      const double g = on->grad[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double x = xn->data[i];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        xn->grad[i] += g * (s - ys[i]);
      }
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const auto v = table.dim(0), h = table.dim(1);
  const auto ts = table.data();
  std::vector<double> out(ids.size() * h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw ContractError("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                          std::to_string(v) + " rows");
    }
    std::copy_n(ts.data() + static_cast<std::size_t>(ids[r]) * h, h, out.data() + r * h);
  }
  Tensor result({ids.size(), h}, std::move(out));
  if (tracking({&table})) {
    NodePtr tn = table.node();
    auto* on = result.node().get();
    std::vector<int> idv(ids.begin(), ids.end());
    record(result, {tn}, [tn, on, h, idv = std::move(idv)] {
      for (std::size_t r = 0; r < idv.size(); ++r) {
        double* g = tn->grad.data() + static_cast<std::size_t>(idv[r]) * h;
        const double* go = on->grad.data() + r * h;
        for (std::size_t c = 0; c < h; ++c) g[c] += go[c];
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const auto m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " outside " +
                           shape_str(x.shape()));
    }
    std::copy_n(xs.data() + rows[r] * n, n, out.data() + r * n);
  }
  Tensor result({rows.size(), n}, std::move(out));
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record(result, {xn}, [xn, on, n, idx = std::move(idx)] {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* g = xn->grad.data() + idx[r] * n;
        const double* go = on->grad.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) g[c] += go[c];
      }
    });
  }
  return result;
}

Tensor row_blend(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_a) {
  require_matrix(a, "row_blend");
  require_same_shape(a, b, "row_blend");
  const auto m = a.dim(0), n = a.dim(1);
  if (take_a.size() != m) {
    throw DimensionError("row_blend: selector length " + std::to_string(take_a.size()) + " vs " +
                         shape_str(a.shape()));
  }
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* src = (take_a[r] ? as.data() : bs.data()) + r * n;
    std::copy_n(src, n, out.data() + r * n);
  }
  Tensor result(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    std::vector<std::uint8_t> sel(take_a.begin(), take_a.end());
    record(result, {an, bn}, [an, bn, on, m, n, sel = std::move(sel)] {
      for (std::size_t r = 0; r < m; ++r) {
        auto* dst = sel[r] ? an.get() : bn.get();
        if (!dst->requires_grad) continue;
        for (std::size_t c = 0; c < n; ++c) dst->grad[r * n + c] += on->grad[r * n + c];
      }
    });
  }
  return result;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  const auto m = a.dim(0), na = a.dim(1), nb = b.dim(1);
  if (b.dim(0) != m) {
    throw DimensionError("concat_cols: row counts differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto n = na + nb;
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a.data().data() + r * na, na, out.data() + r * n);
    std::copy_n(b.data().data() + r * nb, nb, out.data() + r * n + na);
  }
  Tensor result({m, n}, std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    auto* on = result.node().get();
    record(result, {an, bn}, [an, bn, on, m, na, nb, n] {
      for (std::size_t r = 0; r < m; ++r) {
        const double* go = on->grad.data() + r * n;
        if (an->requires_grad) {
          for (std::size_t c = 0; c < na; ++c) an->grad[r * na + c] += go[c];
        }
        if (bn->requires_grad) {
          for (std::size_t c = 0; c < nb; ++c) bn->grad[r * nb + c] += go[na + c];
        }
      }
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const auto m = x.dim(0), n = x.dim(1);
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  }
  const auto w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(x.data().data() + r * n + begin, w, out.data() + r * w);
  }
  Tensor result({m, w}, std::move(out));
  if (tracking({&x})) {
    NodePtr xn = x.node();
    auto* on = result.node().get();
    record(result, {xn}, [xn, on, m, n, w, begin] {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < w; ++c) xn->grad[r * n + begin + c] += on->grad[r * w + c];
      }
    });
  }
  return result;
}

namespace {

void check_attention_inputs(const Tensor& q, const Tensor& k, const BatchLayout& layout,
                            std::size_t heads) {
  require_matrix(q, "attention");
  require_same_shape(q, k, "attention");
  const auto rows = layout.batch * layout.seq_len;
  if (q.dim(0) != rows || layout.valid.size() != rows) {
    throw DimensionError("attention: layout " + std::to_string(layout.batch) + "×" +
                         std::to_string(layout.seq_len) + " does not match " +
                         shape_str(q.shape()));
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw DimensionError("attention: hidden size " + std::to_string(q.dim(1)) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
}

// Fills probs (batch*heads blocks of seq×seq) from q, k.
void compute_probs(const double* q, const double* k, const BatchLayout& layout, std::size_t h,
                   std::size_t heads, std::vector<double>& probs) {
  const auto T = layout.seq_len, dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  probs.assign(layout.batch * heads * T * T, 0.0);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    const std::uint8_t* valid = layout.valid.data() + b * T;
    for (std::size_t a = 0; a < heads; ++a) {
      ConstBlockMap qh(q + b * T * h + a * dh, T, dh, Strided(h));
      ConstBlockMap kh(k + b * T * h + a * dh, T, dh, Strided(h));
      MatMap p(probs.data() + (b * heads + a) * T * T, T, T);
      p.noalias() = (qh * kh.transpose()) * scale;
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          if (valid[j]) mx = std::max(mx, p(t, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const double e = valid[j] ? std::exp(p(t, j) - mx) : 0.0;
          p(t, j) = e;
          z += e;
        }
        if (z > 0.0) p.row(t) /= z;
      }
    }
  }
}

}  // namespace

std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k,
                                            const BatchLayout& layout, std::size_t heads) {
  check_attention_inputs(q, k, layout, heads);
  std::vector<double> probs;
  compute_probs(q.data().data(), k.data().data(), layout, q.dim(1), heads, probs);
  return probs;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const BatchLayout& layout,
                 std::size_t heads) {
  check_attention_inputs(q, k, layout, heads);
  require_same_shape(q, v, "attention");
  require_finite(q.data(), "attention");
  require_finite(k.data(), "attention");
  const auto h = q.dim(1), T = layout.seq_len, dh = h / heads;
  std::vector<double> probs;
  compute_probs(q.data().data(), k.data().data(), layout, h, heads, probs);

  std::vector<double> out(q.numel());
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t a = 0; a < heads; ++a) {
      ConstMatMap p(probs.data() + (b * heads + a) * T * T, T, T);
      ConstBlockMap vh(v.data().data() + b * T * h + a * dh, T, dh, Strided(h));
      BlockMap oh(out.data() + b * T * h + a * dh, T, dh, Strided(h));
      oh.noalias() = p * vh;
    }
  }
  Tensor result(q.shape(), std::move(out));
  if (tracking({&q, &k, &v})) {
    NodePtr qn = q.node(), kn = k.node(), vn = v.node();
    auto* on = result.node().get();
    record(result, {qn, kn, vn},
           [qn, kn, vn, on, batch = layout.batch, T, h, heads, dh, probs = std::move(probs)] {
             const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
             RowMat dp(T, T), ds(T, T);
             for (std::size_t b = 0; b < batch; ++b) {
               for (std::size_t a = 0; a < heads; ++a) {
                 const std::size_t off = b * T * h + a * dh;
                 ConstMatMap p(probs.data() + (b * heads + a) * T * T, T, T);
                 ConstBlockMap go(on->grad.data() + off, T, dh, Strided(h));
                 ConstBlockMap qh(qn->data.data() + off, T, dh, Strided(h));
                 ConstBlockMap kh(kn->data.data() + off, T, dh, Strided(h));
                 ConstBlockMap vh(vn->data.data() + off, T, dh, Strided(h));
                 if (vn->requires_grad) {
                   BlockMap gv(vn->grad.data() + off, T, dh, Strided(h));
                   gv.noalias() += p.transpose() * go;
                 }
                 if (!qn->requires_grad && !kn->requires_grad) continue;
                 dp.noalias() = go * vh.transpose();
                 for (std::size_t t = 0; t < T; ++t) {
                   const double dot = p.row(t).dot(dp.row(t));
                   ds.row(t) = p.row(t).cwiseProduct((dp.row(t).array() - dot).matrix());
                 }
                 ds *= scale;
                 if (qn->requires_grad) {
                   BlockMap gq(qn->grad.data() + off, T, dh, Strided(h));
                   gq.noalias() += ds * kh;
                 }
                 if (kn->requires_grad) {
                   BlockMap gk(kn->grad.data() + off, T, dh, Strided(h));
                   gk.noalias() += ds.transpose() * qh;
                 }
               }
             }
           });
  }
  return result;
}

}  // namespace modrank::ops
