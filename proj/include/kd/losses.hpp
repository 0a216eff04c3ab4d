#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kd/grid.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

namespace kd {

// Scalar losses of one step, in nats. Members are absent when the loss mode
// does not produce them.
struct LossBundle {
  std::optional<double> l_ce;
  std::optional<double> l_pred;
  std::optional<double> l_attn;
  std::optional<double> l_kd;
  std::optional<double> l_d;
  std::optional<double> l_nd;
  std::optional<double> l_dae;
  std::int64_t tokens_counted = 0;
  std::int64_t rows_counted = 0;

  // Sums two partial bundles (e.g. micro-batches sharing a normalizer).
  LossBundle& operator+=(const LossBundle& other);
};

// One differentiable loss term: value is a one-element graph tensor equal to
// (sum of contributions) / denominator. count is the number of contributing
// positions or attention rows.
template <class T>
struct LossTerm {
  Tensor<T> value;
  std::int64_t count = 0;

  double scalar() const { return value.defined() ? static_cast<double>(value.item()) : 0.0; }
};

enum class HeadPolicy { identity, average_heads };

struct LayerHeadMap {
  std::vector<int> layer_map;  // student layer -> teacher layer
  HeadPolicy head_policy = HeadPolicy::identity;
};

std::string to_string(HeadPolicy policy);

// Student layer i maps to teacher layer floor((i + 1) * Lt / Ls) - 1; heads
// are averaged within a layer when head counts differ. Throws MappingError
// when the student is deeper than the teacher.
LayerHeadMap build_layer_map(int student_layers, int teacher_layers, int student_heads, int teacher_heads);

// Next-token targets: targets[b][t] = tokens[b][t + 1] and the loss mask is
// shifted the same way, so position t is scored when token t + 1 is a
// response token. The last position is never scored.
struct ShiftedTargets {
  TargetGrid targets;
  Mask loss_mask;
};
ShiftedTargets shift_targets(const TokenBatch& tokens, const Mask& response_mask);

std::int64_t count_active(const Mask& mask);

// Each loss averages over its own active count unless `denominator` is given,
// in which case the sum is divided by it instead (used to normalize
// micro-batches by a global-batch count). With no denominator and no active
// positions, EmptyLossError is thrown; with a denominator, an empty term is 0.

// Mean over active positions of -log softmax(logits)[target].
template <class T>
LossTerm<T> ce_loss(Graph<T>& g, const Tensor<T>& logits, const TargetGrid& targets, const Mask& loss_mask,
                    std::optional<double> denominator = std::nullopt);

// Mean over active positions of sum_i p_i log(p_i / q_i), p = softmax(teacher /
// tau), q = softmax(student / tau). The teacher side is constant.
template <class T>
LossTerm<T> pred_kld(Graph<T>& g, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                     const Mask& loss_mask, double temperature = 1.0,
                     std::optional<double> denominator = std::nullopt);

// Mean over (batch, mapped layer, head, active row) of the KL divergence
// between teacher and student attention rows. The teacher side is constant.
template <class T>
LossTerm<T> attn_kld(Graph<T>& g, const std::vector<AttentionTrace<T>>& student_traces,
                     const std::vector<AttentionTrace<T>>& teacher_traces, const LayerHeadMap& map,
                     const Mask& row_mask, std::optional<double> denominator = std::nullopt);

// Number of (batch, layer, head, row) contributions attn_kld would average over.
std::int64_t attn_row_count(const LayerHeadMap& map, int student_heads, const Mask& row_mask);

struct KdWeights {
  double pred = 1.0;
  double attn = 1.0;
};

template <class T>
struct KdLoss {
  LossTerm<T> pred;
  LossTerm<T> attn;
  Tensor<T> total;  // weights.pred * pred + weights.attn * attn
  LossBundle bundle;
};

struct KdNormalizers {
  std::optional<double> tokens;
  std::optional<double> rows;
};

// Combined distillation. A term whose weight is zero is still measured (for
// the bundle) but does not enter the differentiated total. Terms whose inputs
// are missing (no traces) are skipped.
template <class T>
KdLoss<T> kd_loss(Graph<T>& g, const ForwardOutput<T>& student, const ForwardOutput<T>& teacher,
                  const Mask& loss_mask, const Mask& row_mask, const LayerHeadMap& map, KdWeights weights,
                  double temperature = 1.0, KdNormalizers norm = {});

template <class T>
struct DaeLoss {
  LossTerm<T> domain;      // L_d: student vs expert on domain rows
  LossTerm<T> non_domain;  // L_nd: student vs reference on the others
  Tensor<T> total;
  LossBundle bundle;
};

struct DaeNormalizers {
  std::optional<double> domain_tokens;
  std::optional<double> non_domain_tokens;
};

// Domain alignment: rows flagged as domain are distilled from the expert,
// the rest from the reference model. Each side is normalized by its own
// active token count; an empty side contributes 0.
template <class T>
DaeLoss<T> dae_loss(Graph<T>& g, const Tensor<T>& student_logits, const Tensor<T>& expert_logits,
                    const Tensor<T>& ref_logits, const std::vector<bool>& domain_flags, const Mask& loss_mask,
                    double temperature = 1.0, DaeNormalizers norm = {});

// Restricts a mask to the rows whose flag equals `keep`.
Mask rows_where(const Mask& mask, const std::vector<bool>& flags, bool keep);

}  // namespace kd
