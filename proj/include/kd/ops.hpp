#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kd/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when the graph is recording and some input requires a
// gradient, registers a backward closure on the graph.
namespace kd::ops {

// Additive mask value for blocked attention positions. exp() of it underflows
// to exactly zero in both float32 and float64.
inline constexpr double kMaskValue = -1e9;
// Probability floor applied inside every log of a probability.
inline constexpr double kLogFloor = 1e-9;

// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are flattened.
template <class T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor);
template <class T>
Tensor<T> add_scalar(Graph<T>& g, const Tensor<T>& a, T value);

template <class T>
Tensor<T> exp(Graph<T>& g, const Tensor<T>& a);
// log(max(a, floor)); the gradient is zero where the floor is active.
template <class T>
Tensor<T> log(Graph<T>& g, const Tensor<T>& a, T floor = T(kLogFloor));
template <class T>
Tensor<T> silu(Graph<T>& g, const Tensor<T>& a);

template <class T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& a, Shape shape);
// 2-D transpose.
template <class T>
Tensor<T> transpose(Graph<T>& g, const Tensor<T>& a);
template <class T>
Tensor<T> slice(Graph<T>& g, const Tensor<T>& a, int axis, std::int64_t begin, std::int64_t end);
template <class T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& parts, int axis);

// Full reduction to a one-element tensor.
template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a);
template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a);
// Reduction over one axis; the axis is removed from the result shape.
template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a, int axis);
template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a, int axis);
// sum(a * b) without materializing the product.
template <class T>
Tensor<T> dot(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

// Gathers rows of table[V, d]; gradient scatter-adds into the table.
template <class T>
Tensor<T> embedding(Graph<T>& g, const Tensor<T>& table, std::span<const std::int32_t> ids);

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <class T>
Tensor<T> rms_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain, double eps);

// Rotary position rotation of x[N, d] viewed as n_heads heads of d/n_heads
// channels. Channel pairs (2i, 2i+1) of a head at position p are rotated by
// p * base^(-2i / head_dim). positions has one entry per row of x.
template <class T>
Tensor<T> rope(Graph<T>& g, const Tensor<T>& x, int n_heads, std::span<const std::int32_t> positions,
               double base);

// Softmax over the last axis after adding `mask`. The mask covers the
// trailing mask.ndim() axes of scores and is broadcast over the leading ones.
// Entries with mask <= kMaskValue / 2 are blocked and come out exactly 0.
template <class T>
Tensor<T> masked_softmax(Graph<T>& g, const Tensor<T>& scores, const Tensor<T>& mask);
template <class T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x);
template <class T>
Tensor<T> log_softmax(Graph<T>& g, const Tensor<T>& x);

// Lower-triangular additive causal mask of extent [t, t].
template <class T>
Tensor<T> causal_mask(std::int64_t t);

// q, k: [batch * t, n_heads * head_dim] -> scores [batch, n_heads, t, t],
// scores[b][h][i][j] = factor * <q_(b,i,h), k_(b,j,h)>.
template <class T>
Tensor<T> attention_scores(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, std::int64_t batch,
                           int n_heads, T factor);
// p: [batch, n_heads, t, t], v: [batch * t, n_heads * head_dim] -> [batch * t, n_heads * head_dim].
template <class T>
Tensor<T> attention_apply(Graph<T>& g, const Tensor<T>& p, const Tensor<T>& v, std::int64_t batch,
                          int n_heads);

// Keeps the k largest entries of each row of probs[N, E] (ties go to the
// lower index), zeroes the rest and renormalizes the kept entries to sum 1.
template <class T>
Tensor<T> topk_renormalize(Graph<T>& g, const Tensor<T>& probs, int k);
// out[n] = sum_e weights[n, e] * outs[e][n]; all outs share shape [N, d].
template <class T>
Tensor<T> mix_experts(Graph<T>& g, const Tensor<T>& weights, const std::vector<Tensor<T>>& outs);

}  // namespace kd::ops
