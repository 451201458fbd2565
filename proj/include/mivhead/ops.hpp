#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mivhead/tape.hpp"
#include "mivhead/tensor.hpp"

// The closed operator set of the head. Every op records its forward value on
// the operand's tape and defines a vector-Jacobian product. Binary
// elementwise ops broadcast numpy-style. Every reduction runs in a fixed
// order; segment reductions, softmax and logsumexp use canonical_sum, so
// they are also invariant to the order of the reduced elements.
namespace mivhead::ops {

inline constexpr double kNormEps = 1e-6;

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);

Var abs(Var x);
Var exp(Var x);
Var log(Var x);
Var sigmoid(Var x);

// (m,k) x (k,n) -> (m,n)
Var matmul(Var a, Var b);
// (B,m,k) x (B,k,n) -> (B,m,n)
Var bmm(Var a, Var b);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
Var broadcast_to(Var x, Shape shape);

Var concat(std::span<const Var> xs, std::size_t axis);
// Stacks equally shaped tensors along a new leading axis.
Var stack(std::span<const Var> xs);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var take(Var x, std::size_t axis, std::vector<std::size_t> indices);

// sequential adds left to right; canonical gives a result independent of
// the order of the reduced elements (see canonical_sum).
enum class SumOrder { sequential, canonical };

Var sum(Var x, std::size_t axis, SumOrder order = SumOrder::sequential);
Var mean(Var x, std::size_t axis, SumOrder order = SumOrder::sequential);
Var softmax(Var x, std::size_t axis);
Var logsumexp(Var x, std::size_t axis);

// x / (||x||_2 + eps) along `axis`.
Var l2_normalize(Var x, std::size_t axis, double eps = kNormEps);
// (x - mean) / sqrt(var + eps) * gamma + beta over the last axis; gamma and
// beta are 1-D with the last axis' extent.
Var layer_norm(Var x, Var gamma, Var beta, double eps = kNormEps);

// Half-open index range along an axis.
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Softmax computed independently inside each segment of `axis`. `mask`, when
// given, has the shape of x's leading dims up to and including `axis`;
// entries equal to 0 are excluded (weight exactly 0). A segment with every
// entry masked is a ShapeError.
Var segment_softmax(Var x, std::size_t axis, std::span<const Segment> segments, const Tensor* mask = nullptr);
// Sums each segment of `axis`; that axis' extent becomes segments.size().
Var segment_sum(Var x, std::size_t axis, std::span<const Segment> segments);

// (H,W,C) -> (out_h,out_w,C). Region of output row i is
// [floor(i*H/out_h), ceil((i+1)*H/out_h)), likewise for columns. The
// gradient goes to the first maximal element in row-major order.
Var adaptive_max_pool_2d(Var x, std::size_t out_h, std::size_t out_w);
Tensor adaptive_max_pool_2d(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Mean cross-entropy of a (B,L) logit matrix (or a length-L vector with a
// single label) against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace mivhead::ops
