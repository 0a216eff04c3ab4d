#include "kd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "kd/ops.hpp"

namespace kd {
namespace {

void add_opt(std::optional<double>& dst, const std::optional<double>& src) {
  if (src) dst = dst.value_or(0.0) + *src;
}

// sum_i w_i * (c_i - x_i) accumulated in double, differentiable in x. An
// undefined `c` is treated as zeros. Equal c and x give exactly 0.
template <class T>
Tensor<T> weighted_gap(Graph<T>& g, const Tensor<T>& w, const Tensor<T>& c, const Tensor<T>& x) {
  const T* wp = w.ptr();
  const T* cp = c.defined() ? c.ptr() : nullptr;
  const T* xp = x.ptr();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (wp[i] == T(0)) continue;
    const T ci = cp ? cp[i] : T(0);
    acc += static_cast<double>(wp[i]) * (static_cast<double>(ci) - static_cast<double>(xp[i]));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (g.wants_grad({&x})) {
    g.record("weighted_gap", {&x}, out, [w = w, x = x, out]() mutable {
      const T gy = out.grad()[0];
      auto gx = x.grad();
      const T* wp = w.ptr();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gy * wp[i];
    });
  }
  return out;
}

template <class T>
void check_positions(const char* what, const Tensor<T>& logits, const Mask& mask) {
  if (logits.ndim() != 3 || logits.dim(0) != mask.rows || logits.dim(1) != mask.cols) {
    throw DimensionError(std::string(what) + ": logits " + shape_str(logits.shape()) + " do not match mask [" +
                         std::to_string(mask.rows) + "x" + std::to_string(mask.cols) + "]");
  }
}

double resolve_denominator(const char* what, std::int64_t count, std::optional<double> denominator) {
  if (denominator) {
    if (!(*denominator > 0.0)) throw EmptyLossError(std::string(what) + ": denominator must be positive");
    return *denominator;
  }
  if (count == 0) throw EmptyLossError(std::string(what) + ": loss mask selects no positions");
  return static_cast<double>(count);
}

template <class T>
LossTerm<T> zero_term() {
  return {Tensor<T>::scalar(T(0)), 0};
}

template <class T>
Tensor<T> tempered(Graph<T>& g, const Tensor<T>& logits, double temperature) {
  if (temperature == 1.0) return logits;
  return ops::scale(g, logits, static_cast<T>(1.0 / temperature));
}

}  // namespace

LossBundle& LossBundle::operator+=(const LossBundle& o) {
  add_opt(l_ce, o.l_ce);
  add_opt(l_pred, o.l_pred);
  add_opt(l_attn, o.l_attn);
  add_opt(l_kd, o.l_kd);
  add_opt(l_d, o.l_d);
  add_opt(l_nd, o.l_nd);
  add_opt(l_dae, o.l_dae);
  tokens_counted += o.tokens_counted;
  rows_counted += o.rows_counted;
  return *this;
}

std::string to_string(HeadPolicy policy) {
  return policy == HeadPolicy::identity ? "identity" : "average_heads";
}

LayerHeadMap build_layer_map(int student_layers, int teacher_layers, int student_heads, int teacher_heads) {
  if (student_layers <= 0 || teacher_layers <= 0 || student_heads <= 0 || teacher_heads <= 0) {
    throw MappingError("build_layer_map: layer and head counts must be positive");
  }
  if (student_layers > teacher_layers) {
    throw MappingError("build_layer_map: unsupported mapping, student has " + std::to_string(student_layers) +
                       " layers but teacher only " + std::to_string(teacher_layers));
  }
  LayerHeadMap map;
  for (int i = 0; i < student_layers; ++i) map.layer_map.push_back((i + 1) * teacher_layers / student_layers - 1);
  map.head_policy = student_heads == teacher_heads ? HeadPolicy::identity : HeadPolicy::average_heads;
  return map;
}

ShiftedTargets shift_targets(const TokenBatch& tokens, const Mask& response_mask) {
  if (response_mask.rows != tokens.batch || response_mask.cols != tokens.seq) {
    throw DimensionError("shift_targets: mask does not match token batch");
  }
  ShiftedTargets out{TargetGrid(tokens.batch, tokens.seq, 0), Mask(tokens.batch, tokens.seq, 0)};
  for (std::int64_t b = 0; b < tokens.batch; ++b) {
    for (std::int64_t t = 0; t + 1 < tokens.seq; ++t) {
      out.targets.at(b, t) = tokens.at(b, t + 1);
      out.loss_mask.at(b, t) = response_mask.at(b, t + 1);
    }
  }
  return out;
}

std::int64_t count_active(const Mask& mask) {
  return std::count_if(mask.values.begin(), mask.values.end(), [](std::uint8_t v) { return v != 0; });
}

Mask rows_where(const Mask& mask, const std::vector<bool>& flags, bool keep) {
  if (static_cast<std::int64_t>(flags.size()) != mask.rows) {
    throw DimensionError("rows_where: " + std::to_string(flags.size()) + " flags for " + std::to_string(mask.rows) +
                         " rows");
  }
  Mask out = mask;
  for (std::int64_t r = 0; r < mask.rows; ++r) {
    if (flags[static_cast<std::size_t>(r)] != keep) {
      for (std::int64_t c = 0; c < mask.cols; ++c) out.at(r, c) = 0;
    }
  }
  return out;
}

template <class T>
LossTerm<T> ce_loss(Graph<T>& g, const Tensor<T>& logits, const TargetGrid& targets, const Mask& loss_mask,
                    std::optional<double> denominator) {
  check_positions("ce_loss", logits, loss_mask);
  if (targets.rows != loss_mask.rows || targets.cols != loss_mask.cols) {
    throw DimensionError("ce_loss: targets do not match mask");
  }
  const std::int64_t count = count_active(loss_mask);
  const double denom = resolve_denominator("ce_loss", count, denominator);
  if (count == 0) return zero_term<T>();
  const auto vocab = logits.dim(2);
  Tensor<T> weights(logits.shape());
  T* w = weights.ptr();
  const T inv = static_cast<T>(1.0 / denom);
  for (std::int64_t r = 0; r < loss_mask.rows; ++r) {
    for (std::int64_t c = 0; c < loss_mask.cols; ++c) {
      if (!loss_mask.at(r, c)) continue;
      const auto y = targets.at(r, c);
      if (y < 0 || y >= vocab) {
        throw VocabularyError("ce_loss: target " + std::to_string(y) + " at (" + std::to_string(r) + ", " +
                              std::to_string(c) + ") outside vocabulary of size " + std::to_string(vocab));
      }
      w[(r * loss_mask.cols + c) * vocab + y] = inv;
    }
  }
  auto log_probs = ops::log_softmax(g, logits);
  return {weighted_gap(g, weights, Tensor<T>{}, log_probs), count};
}

template <class T>
LossTerm<T> pred_kld(Graph<T>& g, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                     const Mask& loss_mask, double temperature, std::optional<double> denominator) {
  if (!(temperature > 0.0)) throw ConfigError("pred_kld: temperature must be positive");
  check_positions("pred_kld", student_logits, loss_mask);
  if (teacher_logits.ndim() != 3 || teacher_logits.dim(2) != student_logits.dim(2)) {
    throw TokenizerError("pred_kld: vocabulary mismatch between student " + shape_str(student_logits.shape()) +
                         " and teacher " + shape_str(teacher_logits.shape()));
  }
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("pred_kld: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
  }
  const std::int64_t count = count_active(loss_mask);
  const double denom = resolve_denominator("pred_kld", count, denominator);
  if (count == 0) return zero_term<T>();

  Graph<T> constant(false);
  const Tensor<T> teacher_log = ops::log_softmax(constant, tempered(constant, teacher_logits, temperature));
  const auto vocab = static_cast<std::size_t>(student_logits.dim(2));
  Tensor<T> weights(student_logits.shape());
  const T inv = static_cast<T>(1.0 / denom);
  const T* lp = teacher_log.ptr();
  T* w = weights.ptr();
  for (std::size_t pos = 0; pos < loss_mask.values.size(); ++pos) {
    if (!loss_mask.values[pos]) continue;
    for (std::size_t i = 0; i < vocab; ++i) w[pos * vocab + i] = std::exp(lp[pos * vocab + i]) * inv;
  }
  auto student_log = ops::log_softmax(g, tempered(g, student_logits, temperature));
  return {weighted_gap(g, weights, teacher_log, student_log), count};
}

std::int64_t attn_row_count(const LayerHeadMap& map, int student_heads, const Mask& row_mask) {
  const std::int64_t heads = map.head_policy == HeadPolicy::identity ? student_heads : 1;
  return static_cast<std::int64_t>(map.layer_map.size()) * heads * count_active(row_mask);
}

template <class T>
LossTerm<T> attn_kld(Graph<T>& g, const std::vector<AttentionTrace<T>>& student_traces,
                     const std::vector<AttentionTrace<T>>& teacher_traces, const LayerHeadMap& map,
                     const Mask& row_mask, std::optional<double> denominator) {
  if (map.layer_map.size() != student_traces.size()) {
    throw MappingError("attn_kld: layer map covers " + std::to_string(map.layer_map.size()) +
                       " student layers, traces have " + std::to_string(student_traces.size()));
  }
  for (std::size_t i = 0; i + 1 < map.layer_map.size(); ++i) {
    if (map.layer_map[i] > map.layer_map[i + 1]) throw MappingError("attn_kld: layer map is not monotone");
  }
  if (student_traces.empty()) throw MappingError("attn_kld: no student traces");
  const int student_heads = static_cast<int>(student_traces.front().heads());
  const std::int64_t count = attn_row_count(map, student_heads, row_mask);
  const double denom = resolve_denominator("attn_kld", count, denominator);
  if (count == 0) return zero_term<T>();
  const T inv = static_cast<T>(1.0 / denom);
  const T floor = static_cast<T>(ops::kLogFloor);

  Graph<T> constant(false);
  Tensor<T> total;
  for (std::size_t l = 0; l < student_traces.size(); ++l) {
    const int tl = map.layer_map[l];
    if (tl < 0 || static_cast<std::size_t>(tl) >= teacher_traces.size()) {
      throw MappingError("attn_kld: student layer " + std::to_string(l) + " maps to missing teacher layer " +
                         std::to_string(tl));
    }
    Tensor<T> sp = student_traces[l].probs;
    Tensor<T> tp = teacher_traces[static_cast<std::size_t>(tl)].probs;
    if (sp.dim(0) != row_mask.rows || sp.dim(2) != row_mask.cols || tp.dim(0) != sp.dim(0) ||
        tp.dim(2) != sp.dim(2)) {
      throw DimensionError("attn_kld: traces " + shape_str(sp.shape()) + " / " + shape_str(tp.shape()) +
                           " do not match row mask");
    }
    if (map.head_policy == HeadPolicy::identity) {
      if (sp.dim(1) != tp.dim(1)) {
        throw MappingError("attn_kld: identity head policy with " + std::to_string(sp.dim(1)) + " student vs " +
                           std::to_string(tp.dim(1)) + " teacher heads");
      }
    } else {
      sp = ops::mean(g, sp, 1);
      tp = ops::mean(constant, tp, 1);
      sp = ops::reshape(g, sp, {sp.dim(0), 1, sp.dim(1), sp.dim(2)});
      tp = ops::reshape(constant, tp, {tp.dim(0), 1, tp.dim(1), tp.dim(2)});
    }
    const std::int64_t batch = sp.dim(0), heads = sp.dim(1), seq = sp.dim(2);
    Tensor<T> weights(tp.shape());
    Tensor<T> teacher_log(tp.shape());
    const T* tpp = tp.ptr();
    T* w = weights.ptr();
    T* lt = teacher_log.ptr();
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t t = 0; t < seq; ++t) {
          if (!row_mask.at(b, t)) continue;
          const std::int64_t base = ((b * heads + h) * seq + t) * seq;
          for (std::int64_t i = 0; i <= t; ++i) {
            w[base + i] = tpp[base + i] * inv;
            lt[base + i] = std::log(std::max(tpp[base + i], floor));
          }
        }
      }
    }
    auto student_log = ops::log(g, sp, floor);
    auto term = weighted_gap(g, weights, teacher_log, student_log);
    total = total.defined() ? ops::add(g, total, term) : term;
  }
  return {total, count};
}

template <class T>
KdLoss<T> kd_loss(Graph<T>& g, const ForwardOutput<T>& student, const ForwardOutput<T>& teacher,
                  const Mask& loss_mask, const Mask& row_mask, const LayerHeadMap& map, KdWeights weights,
                  double temperature, KdNormalizers norm) {
  KdLoss<T> out;
  Graph<T> measure(false);
  std::vector<Tensor<T>> parts;
  double l_kd = 0.0;
  if (student.logits.defined() && teacher.logits.defined()) {
    auto& graph = weights.pred != 0.0 ? g : measure;
    out.pred = pred_kld(graph, student.logits, teacher.logits, loss_mask, temperature, norm.tokens);
    out.bundle.l_pred = out.pred.scalar();
    out.bundle.tokens_counted = out.pred.count;
    l_kd += weights.pred * *out.bundle.l_pred;
    if (weights.pred != 0.0) parts.push_back(ops::scale(g, out.pred.value, static_cast<T>(weights.pred)));
  }
  if (!student.traces.empty() && !teacher.traces.empty()) {
    auto& graph = weights.attn != 0.0 ? g : measure;
    out.attn = attn_kld(graph, student.traces, teacher.traces, map, row_mask, norm.rows);
    out.bundle.l_attn = out.attn.scalar();
    out.bundle.rows_counted = out.attn.count;
    l_kd += weights.attn * *out.bundle.l_attn;
    if (weights.attn != 0.0) parts.push_back(ops::scale(g, out.attn.value, static_cast<T>(weights.attn)));
  }
  if (!out.bundle.l_pred && !out.bundle.l_attn) throw EmptyLossError("kd_loss: neither logits nor traces supplied");
  out.bundle.l_kd = l_kd;
  if (parts.empty()) {
    out.total = Tensor<T>::scalar(T(0));
  } else {
    out.total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out.total = ops::add(g, out.total, parts[i]);
  }
  return out;
}

template <class T>
DaeLoss<T> dae_loss(Graph<T>& g, const Tensor<T>& student_logits, const Tensor<T>& expert_logits,
                    const Tensor<T>& ref_logits, const std::vector<bool>& domain_flags, const Mask& loss_mask,
                    double temperature, DaeNormalizers norm) {
  DaeLoss<T> out;
  const Mask domain_mask = rows_where(loss_mask, domain_flags, true);
  const Mask general_mask = rows_where(loss_mask, domain_flags, false);
  auto side = [&](const Tensor<T>& teacher, const Mask& mask, std::optional<double> denom) {
    if (count_active(mask) == 0) return zero_term<T>();
    if (!teacher.defined()) throw DimensionError("dae_loss: missing teacher logits for populated side");
    return pred_kld(g, student_logits, teacher, mask, temperature, denom);
  };
  out.domain = side(expert_logits, domain_mask, norm.domain_tokens);
  out.non_domain = side(ref_logits, general_mask, norm.non_domain_tokens);
  out.bundle.l_d = out.domain.scalar();
  out.bundle.l_nd = out.non_domain.scalar();
  out.bundle.l_dae = *out.bundle.l_d + *out.bundle.l_nd;
  out.bundle.tokens_counted = out.domain.count + out.non_domain.count;
  const bool d = out.domain.count > 0, nd = out.non_domain.count > 0;
  if (d && nd) out.total = ops::add(g, out.domain.value, out.non_domain.value);
  else if (d) out.total = out.domain.value;
  else if (nd) out.total = out.non_domain.value;
  else out.total = Tensor<T>::scalar(T(0));
  return out;
}

#define KD_INSTANTIATE_LOSSES(T)                                                                                \
  template LossTerm<T> ce_loss(Graph<T>&, const Tensor<T>&, const TargetGrid&, const Mask&,                   \
                               std::optional<double>);                                                        \
  template LossTerm<T> pred_kld(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Mask&, double,           \
                                std::optional<double>);                                                       \
  template LossTerm<T> attn_kld(Graph<T>&, const std::vector<AttentionTrace<T>>&,                             \
                                const std::vector<AttentionTrace<T>>&, const LayerHeadMap&, const Mask&,      \
                                std::optional<double>);                                                       \
  template KdLoss<T> kd_loss(Graph<T>&, const ForwardOutput<T>&, const ForwardOutput<T>&, const Mask&,        \
                             const Mask&, const LayerHeadMap&, KdWeights, double, KdNormalizers);             \
  template DaeLoss<T> dae_loss(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                               const std::vector<bool>&, const Mask&, double, DaeNormalizers);

KD_INSTANTIATE_LOSSES(float)
KD_INSTANTIATE_LOSSES(double)

#undef KD_INSTANTIATE_LOSSES

}  // namespace kd
