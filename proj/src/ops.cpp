#include "vea/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace vea {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::shared_ptr<std::vector<double>> alloc(int64_t n) {
  return std::make_shared<std::vector<double>>(static_cast<size_t>(n));
}

// Right-aligned broadcast of two shapes; strides are in output space with 0
// on broadcast dimensions.
struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> a_strides;
  std::vector<int64_t> b_strides;
  int64_t numel = 0;
  bool same_shape = false;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    st[static_cast<size_t>(d)] = acc;
    acc *= s[static_cast<size_t>(d)];
  }
  return st;
}

BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  p.same_shape = (a == b);
  size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  p.out.resize(rank);
  for (size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pa[d] == 1 || pb[d] == 1) {
      p.out[d] = std::max(pa[d], pb[d]);
    } else {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    }
  }
  p.numel = shape_numel(p.out);
  auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  p.a_strides.resize(rank);
  p.b_strides.resize(rank);
  for (size_t d = 0; d < rank; ++d) {
    p.a_strides[d] = (pa[d] == 1 && p.out[d] > 1) ? 0 : sa[d];
    p.b_strides[d] = (pb[d] == 1 && p.out[d] > 1) ? 0 : sb[d];
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  int rank = static_cast<int>(p.out.size());
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t r = 0; r < p.numel; ++r) {
    f(r, ao, bo);
    for (int d = rank - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      ao += p.a_strides[static_cast<size_t>(d)];
      bo += p.b_strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < p.out[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      ao -= p.out[static_cast<size_t>(d)] * p.a_strides[static_cast<size_t>(d)];
      bo -= p.out[static_cast<size_t>(d)] * p.b_strides[static_cast<size_t>(d)];
    }
  }
}

using NodePtr = std::shared_ptr<autograd::Node>;

template <class Fwd, class BwdA, class BwdB>
Tensor binary_broadcast_op(const Tensor& a, const Tensor& b, const char* name,
                           Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape(), name);
  auto out = alloc(plan.numel);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out->data();
  if (plan.same_shape) {
    for (int64_t i = 0; i < plan.numel; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(plan, [&](int64_t r, int64_t ao, int64_t bo) {
      po[r] = fwd(pa[ao], pb[bo]);
    });
  }
  NodePtr an = a.node(), bn = b.node();
  auto backprop = [an, bn, plan, bwd_a, bwd_b](const double* g) {
    double* ga = an->requires_grad ? an->grad_buffer() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
    const double* pa = an->value->data();
    const double* pb = bn->value->data();
    if (plan.same_shape) {
      for (int64_t i = 0; i < plan.numel; ++i) {
        if (ga) ga[i] += bwd_a(g[i], pa[i], pb[i]);
        if (gb) gb[i] += bwd_b(g[i], pa[i], pb[i]);
      }
    } else {
      for_each_broadcast(plan, [&](int64_t r, int64_t ao, int64_t bo) {
        if (ga) ga[ao] += bwd_a(g[r], pa[ao], pb[bo]);
        if (gb) gb[bo] += bwd_b(g[r], pa[ao], pb[bo]);
      });
    }
  };
  return detail::make_op_result(plan.out, std::move(out), {an, bn},
                                std::move(backprop), name);
}

// Decomposes a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis, const char* op) {
  int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
  }
  AxisSplit sp;
  for (int d = 0; d < axis; ++d) sp.outer *= s[static_cast<size_t>(d)];
  sp.extent = s[static_cast<size_t>(axis)];
  for (int d = axis + 1; d < rank; ++d) sp.inner *= s[static_cast<size_t>(d)];
  return sp;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor add_scalar(const Tensor& a, double c) {
  int64_t n = a.numel();
  auto out = alloc(n);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = pa[i] + c;
  NodePtr an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an, n](const double* g) {
        if (!an->requires_grad) return;
        double* ga = an->grad_buffer();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      },
      "add_scalar");
}

Tensor scale(const Tensor& a, double c) {
  int64_t n = a.numel();
  auto out = alloc(n);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = pa[i] * c;
  NodePtr an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an, n, c](const double* g) {
        if (!an->requires_grad) return;
        double* ga = an->grad_buffer();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
      },
      "scale");
}

namespace {

struct MatmulDims {
  int64_t batch = 1;  // number of [m,k] slices in a
  int64_t m = 0, k = 0, n = 0;
  bool b_is_matrix = false;  // b shared across slices
};

MatmulDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a) +
                     " x " + shape_str(b));
  }
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  int64_t bk = transpose_b ? b[b.size() - 1] : b[b.size() - 2];
  d.n = transpose_b ? b[b.size() - 2] : b[b.size() - 1];
  if (bk != d.k) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a) +
                     (transpose_b ? " x T" : " x ") + shape_str(b));
  }
  for (size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
  if (b.size() == 2) {
    d.b_is_matrix = true;
  } else {
    if (a.size() != b.size() ||
        !std::equal(a.begin(), a.end() - 2, b.begin())) {
      throw ShapeError("matmul: leading dims must match or b must be a matrix: " +
                       shape_str(a) + " x " + shape_str(b));
    }
  }
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  MatmulDims d = matmul_dims(a.shape(), b.shape(), transpose_b);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  auto out = alloc(d.batch * d.m * d.n);

  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out->data();
  if (d.b_is_matrix) {
    // One gemm over all slices of a.
    ConstMap A(pa, d.batch * d.m, d.k);
    MutMap C(po, d.batch * d.m, d.n);
    if (transpose_b) {
      ConstMap B(pb, d.n, d.k);
      C.noalias() = A * B.transpose();
    } else {
      ConstMap B(pb, d.k, d.n);
      C.noalias() = A * B;
    }
  } else {
    int64_t bs = transpose_b ? d.n * d.k : d.k * d.n;
    for (int64_t p = 0; p < d.batch; ++p) {
      ConstMap A(pa + p * d.m * d.k, d.m, d.k);
      MutMap C(po + p * d.m * d.n, d.m, d.n);
      if (transpose_b) {
        ConstMap B(pb + p * bs, d.n, d.k);
        C.noalias() = A * B.transpose();
      } else {
        ConstMap B(pb + p * bs, d.k, d.n);
        C.noalias() = A * B;
      }
    }
  }

  NodePtr an = a.node(), bn = b.node();
  auto backprop = [an, bn, d, transpose_b](const double* g) {
    const double* pa = an->value->data();
    const double* pb = bn->value->data();
    double* ga = an->requires_grad ? an->grad_buffer() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
    if (d.b_is_matrix) {
      ConstMap A(pa, d.batch * d.m, d.k);
      ConstMap G(g, d.batch * d.m, d.n);
      if (transpose_b) {
        ConstMap B(pb, d.n, d.k);
        if (ga) MutMap(ga, d.batch * d.m, d.k).noalias() += G * B;
        if (gb) MutMap(gb, d.n, d.k).noalias() += G.transpose() * A;
      } else {
        ConstMap B(pb, d.k, d.n);
        if (ga) MutMap(ga, d.batch * d.m, d.k).noalias() += G * B.transpose();
        if (gb) MutMap(gb, d.k, d.n).noalias() += A.transpose() * G;
      }
    } else {
      int64_t bs = transpose_b ? d.n * d.k : d.k * d.n;
      for (int64_t p = 0; p < d.batch; ++p) {
        ConstMap A(pa + p * d.m * d.k, d.m, d.k);
        ConstMap G(g + p * d.m * d.n, d.m, d.n);
        if (transpose_b) {
          ConstMap B(pb + p * bs, d.n, d.k);
          if (ga) MutMap(ga + p * d.m * d.k, d.m, d.k).noalias() += G * B;
          if (gb) MutMap(gb + p * bs, d.n, d.k).noalias() += G.transpose() * A;
        } else {
          ConstMap B(pb + p * bs, d.k, d.n);
          if (ga) MutMap(ga + p * d.m * d.k, d.m, d.k).noalias() += G * B.transpose();
          if (gb) MutMap(gb + p * bs, d.k, d.n).noalias() += A.transpose() * G;
        }
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {an, bn},
                                std::move(backprop), "matmul");
}

Tensor softmax(const Tensor& x, int axis) {
  AxisSplit sp = split_axis(x.shape(), axis, "softmax");
  int64_t n = x.numel();
  auto out = alloc(n);
  const double* px = x.data();
  double* po = out->data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t e = 0; e < sp.extent; ++e) mx = std::max(mx, px[base + e * sp.inner]);
      double total = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) {
        double v = std::exp(px[base + e * sp.inner] - mx);
        po[base + e * sp.inner] = v;
        total += v;
      }
      double inv = 1.0 / total;
      for (int64_t e = 0; e < sp.extent; ++e) po[base + e * sp.inner] *= inv;
    }
  }
  NodePtr xn = x.node();
  auto yv = out;  // softmax output reused in backward
  auto backprop = [xn, yv, sp](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    const double* y = yv->data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (int64_t e = 0; e < sp.extent; ++e) {
          int64_t idx = base + e * sp.inner;
          dot += g[idx] * y[idx];
        }
        for (int64_t e = 0; e < sp.extent; ++e) {
          int64_t idx = base + e * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {xn},
                                std::move(backprop), "softmax");
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layernorm: rank-0 input");
  int64_t dim = xs.back();
  if (gamma.numel() != dim || beta.numel() != dim) {
    throw ShapeError("layernorm: gamma/beta must have the last-axis extent " +
                     std::to_string(dim));
  }
  int64_t rows = x.numel() / dim;
  auto out = alloc(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out->data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * dim;
    double mean = 0.0;
    for (int64_t j = 0; j < dim; ++j) mean += row[j];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(dim);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < dim; ++j) {
      double xh = (row[j] - mean) * inv;
      (*xhat)[static_cast<size_t>(r * dim + j)] = xh;
      po[r * dim + j] = xh * pg[j] + pb[j];
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto backprop = [xn, gn, bn, xhat, inv_std, rows, dim](const double* g) {
    double* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
    double* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
    const double* pg = gn->value->data();
    const double* xh = xhat->data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* grow = g + r * dim;
      const double* xrow = xh + r * dim;
      if (gg || gb) {
        for (int64_t j = 0; j < dim; ++j) {
          if (gg) gg[j] += grow[j] * xrow[j];
          if (gb) gb[j] += grow[j];
        }
      }
      if (gx) {
        double sum_gy = 0.0, sum_gyx = 0.0;
        for (int64_t j = 0; j < dim; ++j) {
          double gy = grow[j] * pg[j];
          sum_gy += gy;
          sum_gyx += gy * xrow[j];
        }
        double inv = (*inv_std)[static_cast<size_t>(r)];
        double nd = static_cast<double>(dim);
        for (int64_t j = 0; j < dim; ++j) {
          double gy = grow[j] * pg[j];
          gx[r * dim + j] += inv * (gy - sum_gy / nd - xrow[j] * sum_gyx / nd);
        }
      }
    }
  };
  return detail::make_op_result(xs, std::move(out), {xn, gn, bn},
                                std::move(backprop), "layernorm");
}

Tensor cross_entropy_per_example(const Tensor& logits, std::span<const int64_t> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy: logits must be [B, K]");
  int64_t bsz = s[0], k = s[1];
  if (static_cast<int64_t>(labels.size()) != bsz) {
    throw ShapeError("cross_entropy: label count mismatch");
  }
  for (int64_t b = 0; b < bsz; ++b) {
    if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= k) {
      throw ShapeError("cross_entropy: label " +
                       std::to_string(labels[static_cast<size_t>(b)]) +
                       " out of range [0," + std::to_string(k) + ")");
    }
  }
  auto out = alloc(bsz);
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(bsz * k));
  const double* pl = logits.data();
  for (int64_t b = 0; b < bsz; ++b) {
    const double* row = pl + b * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      double e = std::exp(row[j] - mx);
      (*probs)[static_cast<size_t>(b * k + j)] = e;
      total += e;
    }
    double inv = 1.0 / total;
    for (int64_t j = 0; j < k; ++j) (*probs)[static_cast<size_t>(b * k + j)] *= inv;
    (*out)[static_cast<size_t>(b)] =
        (mx + std::log(total)) - row[labels[static_cast<size_t>(b)]];
  }
  NodePtr ln = logits.node();
  std::vector<int64_t> ycopy(labels.begin(), labels.end());
  auto backprop = [ln, probs, ycopy, bsz, k](const double* g) {
    if (!ln->requires_grad) return;
    double* gl = ln->grad_buffer();
    const double* p = probs->data();
    for (int64_t b = 0; b < bsz; ++b) {
      double gb = g[b];
      for (int64_t j = 0; j < k; ++j) gl[b * k + j] += gb * p[b * k + j];
      gl[b * k + ycopy[static_cast<size_t>(b)]] -= gb;
    }
  };
  return detail::make_op_result({bsz}, std::move(out), {ln}, std::move(backprop),
                                "cross_entropy");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> labels) {
  return mean(cross_entropy_per_example(logits, labels));
}

Tensor cross_entropy(const Tensor& logits, int64_t label) {
  Tensor l2 = logits;
  if (logits.ndim() == 1) l2 = reshape(logits, {1, logits.dim(0)});
  if (l2.ndim() != 2 || l2.dim(0) != 1) {
    throw ShapeError("cross_entropy: single-label form expects [K] or [1, K]");
  }
  int64_t labels[1] = {label};
  return cross_entropy(l2, std::span<const int64_t>(labels, 1));
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  int64_t n = x.numel();
  auto out = alloc(n);
  const double* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    (*out)[static_cast<size_t>(i)] =
        0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
  }
  NodePtr xn = x.node();
  auto backprop = [xn, n](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    const double* px = xn->value->data();
    for (int64_t i = 0; i < n; ++i) {
      double cdf = 0.5 * (1.0 + std::erf(px[i] * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * px[i] * px[i]);
      gx[i] += g[i] * (cdf + px[i] * pdf);
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {xn},
                                std::move(backprop), "gelu");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  NodePtr xn = x.node();
  int64_t n = x.numel();
  auto backprop = [xn, n](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
  };
  // Shares the value buffer: reshape is a view.
  return detail::make_op_result(std::move(shape), xn->value, {xn},
                                std::move(backprop), "reshape");
}

Tensor transpose_dims(const Tensor& x, std::vector<int> perm) {
  const Shape& xs = x.shape();
  int rank = static_cast<int>(xs.size());
  if (static_cast<int>(perm.size()) != rank) {
    throw ShapeError("transpose_dims: perm rank mismatch");
  }
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)]) {
      throw ShapeError("transpose_dims: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d) out_shape[static_cast<size_t>(d)] = xs[static_cast<size_t>(perm[static_cast<size_t>(d)])];
  auto src_strides = contiguous_strides(xs);
  std::vector<int64_t> strides(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d) strides[static_cast<size_t>(d)] = src_strides[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  int64_t n = x.numel();
  auto out = alloc(n);
  const double* px = x.data();
  double* po = out->data();
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t so = 0;
  for (int64_t r = 0; r < n; ++r) {
    po[r] = px[so];
    for (int d = rank - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      so += strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      so -= out_shape[static_cast<size_t>(d)] * strides[static_cast<size_t>(d)];
    }
  }
  NodePtr xn = x.node();
  auto backprop = [xn, out_shape, strides, n, rank](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t so = 0;
    for (int64_t r = 0; r < n; ++r) {
      gx[so] += g[r];
      for (int d = rank - 1; d >= 0; --d) {
        idx[static_cast<size_t>(d)]++;
        so += strides[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
        idx[static_cast<size_t>(d)] = 0;
        so -= out_shape[static_cast<size_t>(d)] * strides[static_cast<size_t>(d)];
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {xn},
                                std::move(backprop), "transpose_dims");
}

Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len) {
  AxisSplit sp = split_axis(x.shape(), axis, "slice_axis");
  if (start < 0 || len <= 0 || start + len > sp.extent) {
    throw ShapeError("slice_axis: range out of bounds");
  }
  Shape out_shape = x.shape();
  int ax = axis < 0 ? axis + static_cast<int>(out_shape.size()) : axis;
  out_shape[static_cast<size_t>(ax)] = len;
  auto out = alloc(sp.outer * len * sp.inner);
  const double* px = x.data();
  double* po = out->data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::memcpy(po + o * len * sp.inner,
                px + (o * sp.extent + start) * sp.inner,
                static_cast<size_t>(len * sp.inner) * sizeof(double));
  }
  NodePtr xn = x.node();
  auto backprop = [xn, sp, start, len](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* gsrc = g + o * len * sp.inner;
      double* gdst = gx + (o * sp.extent + start) * sp.inner;
      for (int64_t i = 0; i < len * sp.inner; ++i) gdst[i] += gsrc[i];
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {xn},
                                std::move(backprop), "slice_axis");
}

Tensor concat_axis(const Tensor& a, const Tensor& b, int axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError("concat_axis: rank mismatch");
  int rank = static_cast<int>(sa.size());
  int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw ShapeError("concat_axis: axis out of range");
  for (int d = 0; d < rank; ++d) {
    if (d != ax && sa[static_cast<size_t>(d)] != sb[static_cast<size_t>(d)]) {
      throw ShapeError("concat_axis: shapes " + shape_str(sa) + " and " +
                       shape_str(sb) + " differ off-axis");
    }
  }
  AxisSplit spa = split_axis(sa, ax, "concat_axis");
  int64_t alen = sa[static_cast<size_t>(ax)], blen = sb[static_cast<size_t>(ax)];
  Shape out_shape = sa;
  out_shape[static_cast<size_t>(ax)] = alen + blen;
  auto out = alloc(spa.outer * (alen + blen) * spa.inner);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out->data();
  for (int64_t o = 0; o < spa.outer; ++o) {
    std::memcpy(po + o * (alen + blen) * spa.inner, pa + o * alen * spa.inner,
                static_cast<size_t>(alen * spa.inner) * sizeof(double));
    std::memcpy(po + (o * (alen + blen) + alen) * spa.inner,
                pb + o * blen * spa.inner,
                static_cast<size_t>(blen * spa.inner) * sizeof(double));
  }
  NodePtr an = a.node(), bn = b.node();
  int64_t inner = spa.inner, outer = spa.outer;
  auto backprop = [an, bn, outer, inner, alen, blen](const double* g) {
    double* ga = an->requires_grad ? an->grad_buffer() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
    for (int64_t o = 0; o < outer; ++o) {
      const double* gs = g + o * (alen + blen) * inner;
      if (ga) {
        double* d = ga + o * alen * inner;
        for (int64_t i = 0; i < alen * inner; ++i) d[i] += gs[i];
      }
      if (gb) {
        double* d = gb + o * blen * inner;
        const double* gsb = gs + alen * inner;
        for (int64_t i = 0; i < blen * inner; ++i) d[i] += gsb[i];
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {an, bn},
                                std::move(backprop), "concat_axis");
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  BroadcastPlan plan = make_broadcast_plan(x.shape(), shape, "broadcast_to");
  if (plan.out != shape) {
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " cannot expand to " +
                     shape_str(shape));
  }
  auto out = alloc(plan.numel);
  const double* px = x.data();
  double* po = out->data();
  for_each_broadcast(plan, [&](int64_t r, int64_t ao, int64_t) { po[r] = px[ao]; });
  NodePtr xn = x.node();
  auto backprop = [xn, plan](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for_each_broadcast(plan, [&](int64_t r, int64_t ao, int64_t) { gx[ao] += g[r]; });
  };
  return detail::make_op_result(std::move(shape), std::move(out), {xn},
                                std::move(backprop), "broadcast_to");
}

Tensor permute_rows(const Tensor& x, std::span<const int64_t> perm, int axis) {
  AxisSplit sp = split_axis(x.shape(), axis, "permute_rows");
  if (static_cast<int64_t>(perm.size()) != sp.extent) {
    throw ShapeError("permute_rows: permutation length mismatch");
  }
  std::vector<bool> seen(static_cast<size_t>(sp.extent), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= sp.extent || seen[static_cast<size_t>(p)]) {
      throw ShapeError("permute_rows: not a permutation");
    }
    seen[static_cast<size_t>(p)] = true;
  }
  auto out = alloc(x.numel());
  const double* px = x.data();
  double* po = out->data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t e = 0; e < sp.extent; ++e) {
      std::memcpy(po + (o * sp.extent + e) * sp.inner,
                  px + (o * sp.extent + perm[static_cast<size_t>(e)]) * sp.inner,
                  static_cast<size_t>(sp.inner) * sizeof(double));
    }
  }
  NodePtr xn = x.node();
  std::vector<int64_t> pcopy(perm.begin(), perm.end());
  auto backprop = [xn, sp, pcopy](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t e = 0; e < sp.extent; ++e) {
        const double* gs = g + (o * sp.extent + e) * sp.inner;
        double* gd = gx + (o * sp.extent + pcopy[static_cast<size_t>(e)]) * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) gd[i] += gs[i];
      }
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {xn},
                                std::move(backprop), "permute_rows");
}

Tensor sum(const Tensor& x) {
  int64_t n = x.numel();
  const double* px = x.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  auto out = std::make_shared<std::vector<double>>(1, acc);
  NodePtr xn = x.node();
  auto backprop = [xn, n](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
  };
  return detail::make_op_result({1}, std::move(out), {xn}, std::move(backprop), "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor conv2d_fixed_kernel(const Tensor& x, const Tensor& kernel) {
  Shape xs = x.shape();
  bool batched = true;
  if (xs.size() == 3) {
    batched = false;
    xs.insert(xs.begin(), 1);
  }
  if (xs.size() != 4) throw ShapeError("conv2d_fixed_kernel: input must be [B,C,H,W] or [C,H,W]");
  if (kernel.ndim() != 2) throw ShapeError("conv2d_fixed_kernel: kernel must be [kh,kw]");
  int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d_fixed_kernel: kernel extents must be odd");
  int64_t bsz = xs[0], ch = xs[1], h = xs[2], w = xs[3];
  int64_t ph = kh / 2, pw = kw / 2;
  auto out = alloc(x.numel());
  const double* px = x.data();
  const double* pk = kernel.data();
  double* po = out->data();
  for (int64_t bc = 0; bc < bsz * ch; ++bc) {
    const double* plane = px + bc * h * w;
    double* oplane = po + bc * h * w;
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int64_t u = 0; u < kh; ++u) {
          int64_t si = i + u - ph;
          if (si < 0 || si >= h) continue;
          for (int64_t v = 0; v < kw; ++v) {
            int64_t sj = j + v - pw;
            if (sj < 0 || sj >= w) continue;
            acc += plane[si * w + sj] * pk[u * kw + v];
          }
        }
        oplane[i * w + j] = acc;
      }
    }
  }
  NodePtr xn = x.node();
  auto kv = kernel.node()->value;
  auto backprop = [xn, kv, bsz, ch, h, w, kh, kw, ph, pw](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    const double* pk = kv->data();
    for (int64_t bc = 0; bc < bsz * ch; ++bc) {
      const double* gplane = g + bc * h * w;
      double* gxplane = gx + bc * h * w;
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          double gv = gplane[i * w + j];
          if (gv == 0.0) continue;
          for (int64_t u = 0; u < kh; ++u) {
            int64_t si = i + u - ph;
            if (si < 0 || si >= h) continue;
            for (int64_t v = 0; v < kw; ++v) {
              int64_t sj = j + v - pw;
              if (sj < 0 || sj >= w) continue;
              gxplane[si * w + sj] += gv * pk[u * kw + v];
            }
          }
        }
      }
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {xn},
                                std::move(backprop), "conv2d_fixed_kernel");
}

namespace {

struct ResizeTaps {
  std::vector<int64_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

ResizeTaps make_taps(int64_t src, int64_t dst) {
  ResizeTaps t;
  t.lo.resize(static_cast<size_t>(dst));
  t.hi.resize(static_cast<size_t>(dst));
  t.w_lo.resize(static_cast<size_t>(dst));
  t.w_hi.resize(static_cast<size_t>(dst));
  double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (int64_t i = 0; i < dst; ++i) {
    double s = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (s < 0.0) s = 0.0;
    if (s > static_cast<double>(src - 1)) s = static_cast<double>(src - 1);
    int64_t lo = static_cast<int64_t>(std::floor(s));
    int64_t hi = std::min(lo + 1, src - 1);
    double frac = s - static_cast<double>(lo);
    t.lo[static_cast<size_t>(i)] = lo;
    t.hi[static_cast<size_t>(i)] = hi;
    t.w_lo[static_cast<size_t>(i)] = 1.0 - frac;
    t.w_hi[static_cast<size_t>(i)] = frac;
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("bilinear_resize: input must be [B,C,H,W]");
  int64_t bsz = xs[0], ch = xs[1], h = xs[2], w = xs[3];
  if (out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_resize: bad target size");
  ResizeTaps rt = make_taps(h, out_h);
  ResizeTaps ct = make_taps(w, out_w);
  Shape out_shape{bsz, ch, out_h, out_w};
  auto out = alloc(bsz * ch * out_h * out_w);
  const double* px = x.data();
  double* po = out->data();
  for (int64_t bc = 0; bc < bsz * ch; ++bc) {
    const double* plane = px + bc * h * w;
    double* oplane = po + bc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i) {
      const double* r0 = plane + rt.lo[static_cast<size_t>(i)] * w;
      const double* r1 = plane + rt.hi[static_cast<size_t>(i)] * w;
      double wi0 = rt.w_lo[static_cast<size_t>(i)], wi1 = rt.w_hi[static_cast<size_t>(i)];
      for (int64_t j = 0; j < out_w; ++j) {
        int64_t c0 = ct.lo[static_cast<size_t>(j)], c1 = ct.hi[static_cast<size_t>(j)];
        double wj0 = ct.w_lo[static_cast<size_t>(j)], wj1 = ct.w_hi[static_cast<size_t>(j)];
        oplane[i * out_w + j] = wi0 * (wj0 * r0[c0] + wj1 * r0[c1]) +
                                wi1 * (wj0 * r1[c0] + wj1 * r1[c1]);
      }
    }
  }
  NodePtr xn = x.node();
  auto backprop = [xn, rt, ct, bsz, ch, h, w, out_h, out_w](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t bc = 0; bc < bsz * ch; ++bc) {
      const double* gplane = g + bc * out_h * out_w;
      double* gxplane = gx + bc * h * w;
      for (int64_t i = 0; i < out_h; ++i) {
        int64_t r0 = rt.lo[static_cast<size_t>(i)], r1 = rt.hi[static_cast<size_t>(i)];
        double wi0 = rt.w_lo[static_cast<size_t>(i)], wi1 = rt.w_hi[static_cast<size_t>(i)];
        for (int64_t j = 0; j < out_w; ++j) {
          int64_t c0 = ct.lo[static_cast<size_t>(j)], c1 = ct.hi[static_cast<size_t>(j)];
          double wj0 = ct.w_lo[static_cast<size_t>(j)], wj1 = ct.w_hi[static_cast<size_t>(j)];
          double gv = gplane[i * out_w + j];
          gxplane[r0 * w + c0] += gv * wi0 * wj0;
          gxplane[r0 * w + c1] += gv * wi0 * wj1;
          gxplane[r1 * w + c0] += gv * wi1 * wj0;
          gxplane[r1 * w + c1] += gv * wi1 * wj1;
        }
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {xn},
                                std::move(backprop), "bilinear_resize");
}

Tensor pad2d(const Tensor& x, int64_t top, int64_t left, int64_t out_h, int64_t out_w) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("pad2d: input must be [B,C,H,W]");
  int64_t bsz = xs[0], ch = xs[1], h = xs[2], w = xs[3];
  if (top < 0 || left < 0 || top + h > out_h || left + w > out_w) {
    throw ShapeError("pad2d: placement out of bounds");
  }
  Shape out_shape{bsz, ch, out_h, out_w};
  auto out = std::make_shared<std::vector<double>>(
      static_cast<size_t>(bsz * ch * out_h * out_w), 0.0);
  const double* px = x.data();
  double* po = out->data();
  for (int64_t bc = 0; bc < bsz * ch; ++bc) {
    const double* plane = px + bc * h * w;
    double* oplane = po + bc * out_h * out_w;
    for (int64_t i = 0; i < h; ++i) {
      std::memcpy(oplane + (top + i) * out_w + left, plane + i * w,
                  static_cast<size_t>(w) * sizeof(double));
    }
  }
  NodePtr xn = x.node();
  auto backprop = [xn, bsz, ch, h, w, out_h, out_w, top, left](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t bc = 0; bc < bsz * ch; ++bc) {
      const double* gplane = g + bc * out_h * out_w;
      double* gxplane = gx + bc * h * w;
      for (int64_t i = 0; i < h; ++i) {
        const double* gs = gplane + (top + i) * out_w + left;
        double* gd = gxplane + i * w;
        for (int64_t j = 0; j < w; ++j) gd[j] += gs[j];
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {xn},
                                std::move(backprop), "pad2d");
}

Tensor extract_patches(const Tensor& x, int64_t patch) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("extract_patches: input must be [B,C,H,W]");
  int64_t bsz = xs[0], ch = xs[1], h = xs[2], w = xs[3];
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("extract_patches: spatial extents must be divisible by patch size");
  }
  int64_t gh = h / patch, gw = w / patch;
  int64_t tokens = gh * gw;
  int64_t dim = ch * patch * patch;
  Shape out_shape{bsz, tokens, dim};
  auto out = alloc(bsz * tokens * dim);
  const double* px = x.data();
  double* po = out->data();
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t t = 0; t < tokens; ++t) {
      int64_t pi = (t / gw) * patch, pj = (t % gw) * patch;
      double* dst = po + (b * tokens + t) * dim;
      for (int64_t c = 0; c < ch; ++c) {
        const double* plane = px + (b * ch + c) * h * w;
        for (int64_t u = 0; u < patch; ++u) {
          for (int64_t v = 0; v < patch; ++v) {
            dst[(c * patch + u) * patch + v] = plane[(pi + u) * w + (pj + v)];
          }
        }
      }
    }
  }
  NodePtr xn = x.node();
  auto backprop = [xn, bsz, ch, h, w, patch, gh, gw, tokens, dim](const double* g) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad_buffer();
    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t t = 0; t < tokens; ++t) {
        int64_t pi = (t / gw) * patch, pj = (t % gw) * patch;
        const double* gs = g + (b * tokens + t) * dim;
        for (int64_t c = 0; c < ch; ++c) {
          double* gplane = gx + (b * ch + c) * h * w;
          for (int64_t u = 0; u < patch; ++u) {
            for (int64_t v = 0; v < patch; ++v) {
              gplane[(pi + u) * w + (pj + v)] += gs[(c * patch + u) * patch + v];
            }
          }
        }
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {xn},
                                std::move(backprop), "extract_patches");
}

Tensor sign(const Tensor& x) {
  int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = px[i] > 0.0 ? 1.0 : (px[i] < 0.0 ? -1.0 : 0.0);
  }
  return Tensor::from_vector(x.shape(), std::move(out));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = std::min(std::max(px[i], lo), hi);
  }
  return Tensor::from_vector(x.shape(), std::move(out));
}

Tensor clamp_to(const Tensor& x, const Tensor& lo, const Tensor& hi) {
  if (x.shape() != lo.shape() || x.shape() != hi.shape()) {
    throw ShapeError("clamp_to: bound shapes must match");
  }
  int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.data();
  const double* pl = lo.data();
  const double* ph = hi.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = std::min(std::max(px[i], pl[i]), ph[i]);
  }
  return Tensor::from_vector(x.shape(), std::move(out));
}

std::vector<int64_t> argmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("argmax_rows: expects [B, K]");
  int64_t bsz = logits.dim(0), k = logits.dim(1);
  std::vector<int64_t> out(static_cast<size_t>(bsz));
  const double* p = logits.data();
  for (int64_t b = 0; b < bsz; ++b) {
    const double* row = p + b * k;
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("linf_distance: shape mismatch");
  int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double mx = 0.0;
  for (int64_t i = 0; i < n; ++i) mx = std::max(mx, std::fabs(pa[i] - pb[i]));
  return mx;
}

double max_abs(const Tensor& a) {
  int64_t n = a.numel();
  const double* pa = a.data();
  double mx = 0.0;
  for (int64_t i = 0; i < n; ++i) mx = std::max(mx, std::fabs(pa[i]));
  return mx;
}

}  // namespace vea
