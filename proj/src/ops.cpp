#include "mivhead/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "mivhead/error.hpp"

namespace mivhead::ops {
namespace {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  AxisSplit a;
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  a.n = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out.push_back(s[d]);
  return out;
}

Tape* tape_of(Var v) {
  if (!v.tape) throw Error("operation on a detached variable");
  return v.tape;
}

// Output shape and per-operand strides (0 on broadcast dims) for a binary op.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t din = in[in.size() - 1 - k];
    const std::size_t dout = r - 1 - k;
    st[dout] = (din == 1 && out[dout] != 1) ? 0 : stride;
    stride *= din;
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  p.same = (a == b);
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    p.out[r - 1 - k] = da == 1 ? db : da;
  }
  p.sa = aligned_strides(a, p.out);
  p.sb = aligned_strides(b, p.out);
  return p;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = shape_size(out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  // The last axis runs as a flat inner loop; outer axes step an index odometer.
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < total; k += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(k + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class DA, class DB>
Var binary(const char* op, Var a, Var b, Fwd fwd, DA da, DB db) {
  Tape* t = tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  auto p = std::make_shared<Broadcast>(plan_broadcast(x.shape(), y.shape(), op));
  Tensor out(p->out);
  if (p->same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  } else {
    for_each_broadcast(p->out, p->sa, p->sb, [&](std::size_t k, std::size_t ia, std::size_t ib) { out[k] = fwd(x[ia], y[ib]); });
  }
  return t->record(op, std::move(out), {a, b}, [p, da, db](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad;
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.input(1);
    Tensor* gx = ctx.grad(0);
    Tensor* gy = ctx.grad(1);
    if (p->same) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (gx) (*gx)[i] += da(g[i], x[i], y[i]);
        if (gy) (*gy)[i] += db(g[i], x[i], y[i]);
      }
      return;
    }
    for_each_broadcast(p->out, p->sa, p->sb, [&](std::size_t k, std::size_t ia, std::size_t ib) {
      if (gx) (*gx)[ia] += da(g[k], x[ia], y[ib]);
      if (gy) (*gy)[ib] += db(g[k], x[ia], y[ib]);
    });
  });
}

template <class Fwd, class Deriv>
Var unary(const char* op, Var x, Fwd fwd, Deriv deriv) {
  Tape* t = tape_of(x);
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return t->record(op, std::move(out), {x}, [deriv](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& in = ctx.input(0);
    const Tensor& y = ctx.out_value;
    for (std::size_t i = 0; i < in.size(); ++i) (*gx)[i] += ctx.out_grad[i] * deriv(in[i], y[i]);
  });
}

double sequential_sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var scale(Var x, double s) {
  return unary(
      "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var x, double s) {
  return unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var abs(Var x) {
  return unary(
      "abs", x, [](double v) { return std::abs(v); }, [](double v, double) { return sign_of(v); });
}

Var exp(Var x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sigmoid(Var x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += x[i * k + p] * y[p];
      out[i] = acc;
    }
  } else {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yr = &y[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yr[j];
    }
  }
  return tape_of(a)->record("matmul", std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad;
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.input(1);
    if (Tensor* gx = ctx.grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[p * n + j];
          (*gx)[i * k + p] += s;
        }
    }
    if (Tensor* gy = ctx.grad(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gy)[p * n + j] += xv * g[i * n + j];
        }
    }
  });
}

Var bmm(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 3 || y.rank() != 3 || x.dim(0) != y.dim(0) || x.dim(2) != y.dim(1)) {
    throw ShapeError("bmm: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  }
  const std::size_t B = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(2);
  Tensor out({B, m, n});
  for (std::size_t bi = 0; bi < B; ++bi) {
    const double* xb = &x[bi * m * k];
    const double* yb = &y[bi * k * n];
    double* ob = &out[bi * m * n];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double xv = xb[i * k + p];
        for (std::size_t j = 0; j < n; ++j) ob[i * n + j] += xv * yb[p * n + j];
      }
  }
  return tape_of(a)->record("bmm", std::move(out), {a, b}, [B, m, k, n](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad;
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.input(1);
    Tensor* gx = ctx.grad(0);
    Tensor* gy = ctx.grad(1);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const double* gb = &g[bi * m * n];
      const double* xb = &x[bi * m * k];
      const double* yb = &y[bi * k * n];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          if (gx) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += gb[i * n + j] * yb[p * n + j];
            (*gx)[bi * m * k + i * k + p] += s;
          }
          if (gy) {
            const double xv = xb[i * k + p];
            for (std::size_t j = 0; j < n; ++j) (*gy)[bi * k * n + p * n + j] += xv * gb[i * n + j];
          }
        }
    }
  });
}

Var transpose(Var x) {
  const Tensor& in = x.value();
  if (in.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_string(in.shape()));
  const std::size_t r = in.dim(0), c = in.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return tape_of(x)->record("transpose", std::move(out), {x}, [r, c](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += ctx.out_grad[j * r + i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return tape_of(x)->record("reshape", std::move(out), {x}, [](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += ctx.out_grad[i];
  });
}

Var broadcast_to(Var x, Shape shape) {
  const Tensor& in = x.value();
  auto p = std::make_shared<Broadcast>(plan_broadcast(in.shape(), shape, "broadcast_to"));
  if (p->out != shape) {
    throw ShapeError("broadcast_to: " + shape_string(in.shape()) + " does not expand to " + shape_string(shape));
  }
  Tensor out(p->out);
  for_each_broadcast(p->out, p->sa, p->sb, [&](std::size_t k, std::size_t ia, std::size_t) { out[k] = in[ia]; });
  return tape_of(x)->record("broadcast_to", std::move(out), {x}, [p](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    for_each_broadcast(p->out, p->sa, p->sb,
                       [&](std::size_t k, std::size_t ia, std::size_t) { (*gx)[ia] += ctx.out_grad[k]; });
  });
}

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = (d == axis) || s[d] == first[d];
    if (!ok) throw ShapeError("concat: " + shape_string(s) + " incompatible with " + shape_string(first));
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  const auto split = split_at(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t q = 0; q < xs.size(); ++q) {
    const Tensor& in = xs[q].value();
    const std::size_t w = widths[q] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(&in[o * w], w, &out[o * split.n * split.inner + offset * split.inner]);
    offset += widths[q];
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return tape_of(xs[0])->record("concat", std::move(out), std::move(inputs), [split, widths](BackwardContext& ctx) {
    std::size_t offset = 0;
    for (std::size_t q = 0; q < widths.size(); ++q) {
      const std::size_t w = widths[q] * split.inner;
      if (Tensor* gx = ctx.grad(q)) {
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = &ctx.out_grad[o * split.n * split.inner + offset * split.inner];
          double* dst = &(*gx)[o * w];
          for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
        }
      }
      offset += widths[q];
    }
  });
}

Var stack(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("stack of nothing");
  std::vector<Var> lifted;
  lifted.reserve(xs.size());
  for (const auto& v : xs) {
    if (v.shape() != xs[0].shape()) {
      throw ShapeError("stack: " + shape_string(v.shape()) + " vs " + shape_string(xs[0].shape()));
    }
    Shape s = v.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(v, s));
  }
  return concat(lifted, 0);
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "slice");
  if (begin > end || end > split.n) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_string(in.shape()));
  }
  Shape s = in.shape();
  s[axis] = end - begin;
  Tensor out(s);
  const std::size_t w = (end - begin) * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(&in[(o * split.n + begin) * split.inner], w, &out[o * w]);
  return tape_of(x)->record("slice", std::move(out), {x}, [split, begin, w](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = &(*gx)[(o * split.n + begin) * split.inner];
      const double* src = &ctx.out_grad[o * w];
      for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
    }
  });
}

Var take(Var x, std::size_t axis, std::vector<std::size_t> indices) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "take");
  for (auto i : indices)
    if (i >= split.n) throw ShapeError("take: index " + std::to_string(i) + " out of range for " + shape_string(in.shape()));
  Shape s = in.shape();
  s[axis] = indices.size();
  Tensor out(s);
  const std::size_t m = indices.size();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t q = 0; q < m; ++q)
      std::copy_n(&in[(o * split.n + indices[q]) * split.inner], split.inner, &out[(o * m + q) * split.inner]);
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return tape_of(x)->record("take", std::move(out), {x}, [split, idx](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const std::size_t m = idx->size();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t q = 0; q < m; ++q) {
        double* dst = &(*gx)[(o * split.n + (*idx)[q]) * split.inner];
        const double* src = &ctx.out_grad[(o * m + q) * split.inner];
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
      }
  });
}

namespace {

Var reduce_sum(const char* op, Var x, std::size_t axis, double factor, SumOrder order) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, op);
  Tensor out(drop_axis(in.shape(), axis));
  std::vector<double> scratch(split.n);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t k = 0; k < split.inner; ++k) {
      for (std::size_t i = 0; i < split.n; ++i) scratch[i] = in[(o * split.n + i) * split.inner + k];
      const double s = order == SumOrder::canonical ? canonical_sum(scratch) : sequential_sum(scratch);
      out[o * split.inner + k] = factor == 1.0 ? s : s / static_cast<double>(split.n);
    }
  return tape_of(x)->record(op, std::move(out), {x}, [split, factor](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const double f = factor == 1.0 ? 1.0 : 1.0 / static_cast<double>(split.n);
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t i = 0; i < split.n; ++i)
        for (std::size_t k = 0; k < split.inner; ++k)
          (*gx)[(o * split.n + i) * split.inner + k] += ctx.out_grad[o * split.inner + k] * f;
  });
}

}  // namespace

Var sum(Var x, std::size_t axis, SumOrder order) { return reduce_sum("sum", x, axis, 1.0, order); }
Var mean(Var x, std::size_t axis, SumOrder order) { return reduce_sum("mean", x, axis, 0.0, order); }

Var softmax(Var x, std::size_t axis) {
  const Tensor& in = x.value();
  const std::size_t n = split_at(in.shape(), axis, "softmax").n;
  const Segment whole{0, n};
  return segment_softmax(x, axis, std::span<const Segment>(&whole, 1));
}

Var logsumexp(Var x, std::size_t axis) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "logsumexp");
  if (split.n == 0) throw ShapeError("logsumexp over an empty axis");
  Tensor out(drop_axis(in.shape(), axis));
  std::vector<double> scratch(split.n);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t k = 0; k < split.inner; ++k) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < split.n; ++i) m = std::max(m, in[(o * split.n + i) * split.inner + k]);
      for (std::size_t i = 0; i < split.n; ++i) scratch[i] = std::exp(in[(o * split.n + i) * split.inner + k] - m);
      out[o * split.inner + k] = m + std::log(canonical_sum(scratch));
    }
  return tape_of(x)->record("logsumexp", std::move(out), {x}, [split](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const Tensor& in = ctx.input(0);
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t k = 0; k < split.inner; ++k) {
        const double lse = ctx.out_value[o * split.inner + k];
        const double g = ctx.out_grad[o * split.inner + k];
        for (std::size_t i = 0; i < split.n; ++i) {
          const std::size_t at = (o * split.n + i) * split.inner + k;
          (*gx)[at] += g * std::exp(in[at] - lse);
        }
      }
  });
}

Var l2_normalize(Var x, std::size_t axis, double eps) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "l2_normalize");
  Tensor out(in.shape());
  auto norms = std::make_shared<std::vector<double>>(split.outer * split.inner);
  std::vector<double> scratch(split.n);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t k = 0; k < split.inner; ++k) {
      for (std::size_t i = 0; i < split.n; ++i) {
        const double v = in[(o * split.n + i) * split.inner + k];
        scratch[i] = v * v;
      }
      const double nrm = std::sqrt(sequential_sum(scratch));
      (*norms)[o * split.inner + k] = nrm;
      for (std::size_t i = 0; i < split.n; ++i) {
        const std::size_t at = (o * split.n + i) * split.inner + k;
        out[at] = in[at] / (nrm + eps);
      }
    }
  return tape_of(x)->record("l2_normalize", std::move(out), {x}, [split, norms, eps](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const Tensor& in = ctx.input(0);
    const Tensor& g = ctx.out_grad;
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t k = 0; k < split.inner; ++k) {
        const double nrm = (*norms)[o * split.inner + k];
        const double d = nrm + eps;
        double gdotx = 0.0;
        for (std::size_t i = 0; i < split.n; ++i) {
          const std::size_t at = (o * split.n + i) * split.inner + k;
          gdotx += g[at] * in[at];
        }
        const double coef = nrm > 0.0 ? gdotx / (nrm * d * d) : 0.0;
        for (std::size_t i = 0; i < split.n; ++i) {
          const std::size_t at = (o * split.n + i) * split.inner + k;
          (*gx)[at] += g[at] / d - in[at] * coef;
        }
      }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& in = x.value();
  if (in.rank() == 0) throw ShapeError("layer_norm on a scalar");
  const std::size_t c = in.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine shapes " + shape_string(gamma.shape()) + "/" + shape_string(beta.shape()) +
                     " for channel extent " + std::to_string(c));
  }
  const std::size_t rows = in.size() / c;
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  Tensor out(in.shape());
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> scratch(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &in[r * c];
    std::copy_n(row, c, scratch.begin());
    const double mu = sequential_sum(scratch) / static_cast<double>(c);
    for (std::size_t i = 0; i < c; ++i) scratch[i] = (row[i] - mu) * (row[i] - mu);
    const double var = sequential_sum(scratch) / static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const double xh = (row[i] - mu) * rs;
      (*xhat)[r * c + i] = xh;
      out[r * c + i] = xh * g[i] + b[i];
    }
  }
  return tape_of(x)->record("layer_norm", std::move(out), {x, gamma, beta}, [c, rows, xhat, rstd](BackwardContext& ctx) {
    const Tensor& go = ctx.out_grad;
    const Tensor& g = ctx.input(1);
    Tensor* gx = ctx.grad(0);
    Tensor* gg = ctx.grad(1);
    Tensor* gb = ctx.grad(2);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xh = &(*xhat)[r * c];
      const double* gr = &go[r * c];
      if (gg)
        for (std::size_t i = 0; i < c; ++i) (*gg)[i] += gr[i] * xh[i];
      if (gb)
        for (std::size_t i = 0; i < c; ++i) (*gb)[i] += gr[i];
      if (gx) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
          const double d = gr[i] * g[i];
          mean_d += d;
          mean_dx += d * xh[i];
        }
        mean_d /= static_cast<double>(c);
        mean_dx /= static_cast<double>(c);
        for (std::size_t i = 0; i < c; ++i)
          (*gx)[r * c + i] += (*rstd)[r] * (gr[i] * g[i] - mean_d - xh[i] * mean_dx);
      }
    }
  });
}

Var segment_softmax(Var x, std::size_t axis, std::span<const Segment> segments, const Tensor* mask) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "segment_softmax");
  std::size_t expect = 0;
  for (const auto& s : segments) {
    if (s.begin != expect || s.end <= s.begin) throw ShapeError("segment_softmax: segments must tile the axis");
    expect = s.end;
  }
  if (expect != split.n) throw ShapeError("segment_softmax: segments must tile the axis");
  std::shared_ptr<Tensor> keep;
  if (mask) {
    if (mask->size() != split.outer * split.n) {
      throw ShapeError("segment_softmax: mask " + shape_string(mask->shape()) + " does not match leading dims of " +
                       shape_string(in.shape()));
    }
    keep = std::make_shared<Tensor>(*mask);
  }
  auto segs = std::make_shared<std::vector<Segment>>(segments.begin(), segments.end());
  Tensor out(in.shape(), 0.0);
  std::vector<double> scratch;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (const auto& s : *segs)
      for (std::size_t k = 0; k < split.inner; ++k) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = s.begin; i < s.end; ++i) {
          if (keep && (*keep)[o * split.n + i] == 0.0) continue;
          m = std::max(m, in[(o * split.n + i) * split.inner + k]);
        }
        if (!std::isfinite(m)) throw ShapeError("segment_softmax: every entry of a segment is masked");
        scratch.clear();
        for (std::size_t i = s.begin; i < s.end; ++i) {
          if (keep && (*keep)[o * split.n + i] == 0.0) continue;
          const std::size_t at = (o * split.n + i) * split.inner + k;
          out[at] = std::exp(in[at] - m);
          scratch.push_back(out[at]);
        }
        const double z = canonical_sum(scratch);
        for (std::size_t i = s.begin; i < s.end; ++i) out[(o * split.n + i) * split.inner + k] /= z;
      }
  return tape_of(x)->record("segment_softmax", std::move(out), {x}, [split, segs](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const Tensor& y = ctx.out_value;
    const Tensor& g = ctx.out_grad;
    for (std::size_t o = 0; o < split.outer; ++o)
      for (const auto& s : *segs)
        for (std::size_t k = 0; k < split.inner; ++k) {
          double dot = 0.0;
          for (std::size_t i = s.begin; i < s.end; ++i) {
            const std::size_t at = (o * split.n + i) * split.inner + k;
            dot += g[at] * y[at];
          }
          for (std::size_t i = s.begin; i < s.end; ++i) {
            const std::size_t at = (o * split.n + i) * split.inner + k;
            (*gx)[at] += y[at] * (g[at] - dot);
          }
        }
  });
}

Var segment_sum(Var x, std::size_t axis, std::span<const Segment> segments) {
  const Tensor& in = x.value();
  const auto split = split_at(in.shape(), axis, "segment_sum");
  for (const auto& s : segments)
    if (s.end > split.n || s.end <= s.begin) throw ShapeError("segment_sum: bad segment");
  auto segs = std::make_shared<std::vector<Segment>>(segments.begin(), segments.end());
  const std::size_t ns = segs->size();
  Shape shape = in.shape();
  shape[axis] = ns;
  Tensor out(shape);
  std::vector<double> scratch;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t q = 0; q < ns; ++q)
      for (std::size_t k = 0; k < split.inner; ++k) {
        scratch.clear();
        for (std::size_t i = (*segs)[q].begin; i < (*segs)[q].end; ++i)
          scratch.push_back(in[(o * split.n + i) * split.inner + k]);
        out[(o * ns + q) * split.inner + k] = canonical_sum(scratch);
      }
  return tape_of(x)->record("segment_sum", std::move(out), {x}, [split, segs](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    const std::size_t ns = segs->size();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t q = 0; q < ns; ++q)
        for (std::size_t i = (*segs)[q].begin; i < (*segs)[q].end; ++i)
          for (std::size_t k = 0; k < split.inner; ++k)
            (*gx)[(o * split.n + i) * split.inner + k] += ctx.out_grad[(o * ns + q) * split.inner + k];
  });
}

namespace {

void check_pool_target(const Shape& s, std::size_t oh, std::size_t ow) {
  if (s.size() != 3) throw ShapeError("adaptive_max_pool_2d expects (H,W,C), got " + shape_string(s));
  if (oh < 1 || ow < 1 || oh > s[0] || ow > s[1]) {
    throw ShapeError("adaptive_max_pool_2d: target " + std::to_string(oh) + "x" + std::to_string(ow) +
                     " outside 1.." + std::to_string(s[0]) + "x1.." + std::to_string(s[1]));
  }
}

// Forward pass; `argmax` receives the flat input index chosen per output.
Tensor pool_forward(const Tensor& x, std::size_t oh, std::size_t ow, std::vector<std::size_t>* argmax) {
  check_pool_target(x.shape(), oh, ow);
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  Tensor out({oh, ow, C});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t i = 0; i < oh; ++i) {
    const std::size_t r0 = i * H / oh, r1 = ((i + 1) * H + oh - 1) / oh;
    for (std::size_t j = 0; j < ow; ++j) {
      const std::size_t c0 = j * W / ow, c1 = ((j + 1) * W + ow - 1) / ow;
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t best = (r0 * W + c0) * C + c;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) {
            const std::size_t at = (r * W + q) * C + c;
            if (x[at] > x[best]) best = at;
          }
        const std::size_t o = (i * ow + j) * C + c;
        out[o] = x[best];
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

}  // namespace

Tensor adaptive_max_pool_2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  return pool_forward(x, out_h, out_w, nullptr);
}

Var adaptive_max_pool_2d(Var x, std::size_t out_h, std::size_t out_w) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor out = pool_forward(x.value(), out_h, out_w, argmax.get());
  return tape_of(x)->record("adaptive_max_pool_2d", std::move(out), {x}, [argmax](BackwardContext& ctx) {
    Tensor* gx = ctx.grad(0);
    for (std::size_t o = 0; o < argmax->size(); ++o) (*gx)[(*argmax)[o]] += ctx.out_grad[o];
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  std::size_t B = 0, L = 0;
  if (z.rank() == 1) {
    B = 1;
    L = z.dim(0);
  } else if (z.rank() == 2) {
    B = z.dim(0);
    L = z.dim(1);
  } else {
    throw ShapeError("cross_entropy expects (B,L) logits, got " + shape_string(z.shape()));
  }
  if (labels.size() != B) throw ShapeError("cross_entropy: label count does not match batch");
  for (auto l : labels)
    if (l >= L) throw ShapeError("cross_entropy: label " + std::to_string(l) + " out of range");
  auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(B * L);
  std::vector<double> losses(B), scratch(L);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = &z[b * L];
    const double m = *std::max_element(row, row + L);
    for (std::size_t l = 0; l < L; ++l) scratch[l] = std::exp(row[l] - m);
    const double s = canonical_sum(scratch);
    for (std::size_t l = 0; l < L; ++l) (*probs)[b * L + l] = std::exp(row[l] - m) / s;
    losses[b] = (m - row[(*lab)[b]]) + std::log(s);
  }
  const double loss = canonical_sum(losses) / static_cast<double>(B);
  return tape_of(logits)->record("cross_entropy", Tensor::scalar(loss), {logits}, [B, L, lab, probs](BackwardContext& ctx) {
    Tensor* gz = ctx.grad(0);
    const double g = ctx.out_grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        (*gz)[b * L + l] += g * ((*probs)[b * L + l] - (l == (*lab)[b] ? 1.0 : 0.0));
  });
}

}  // namespace mivhead::ops
