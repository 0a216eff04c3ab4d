#include "kd/diagnostics.hpp"

#include <random>

#include "kd/losses.hpp"
#include "kd/model.hpp"

namespace kd {

std::vector<LossGradCheck> run_loss_gradchecks(std::uint64_t seed, double eps) {
  ModelConfig small;
  small.n_layers = 2;
  small.n_heads = 2;
  small.d_model = 8;
  small.d_ff = 16;
  small.vocab_size = 16;
  small.max_seq_len = 16;
  ModelConfig deep = small;
  deep.n_layers = 4;
  deep.n_heads = 4;

  // A wide init keeps attention rows and gradients far from uniform/zero.
  constexpr double kInitStd = 0.5;
  auto student = init_model<double>(small, seed, kInitStd);
  const auto twin = init_model<double>(small, seed + 1, kInitStd);
  const auto teacher = init_model<double>(deep, seed + 2, kInitStd);
  const auto expert = init_model<double>(small, seed + 3, kInitStd);
  const auto reference = init_model<double>(small, seed + 4, kInitStd);

  std::mt19937_64 rng(seed);
  TokenBatch tokens;
  tokens.batch = 2;
  tokens.seq = 6;
  for (int i = 0; i < 12; ++i) tokens.ids.push_back(std::uniform_int_distribution<int>(0, 15)(rng));
  Mask loss_mask(2, 6, 0), row_mask(2, 6, 1);
  for (int t = 2; t < 6; ++t) loss_mask.at(0, t) = 1;
  for (int t = 1; t < 4; ++t) loss_mask.at(1, t) = 1;
  row_mask.at(1, 4) = row_mask.at(1, 5) = 0;
  TargetGrid targets(2, 6, 0);
  for (int b = 0; b < 2; ++b) {
    for (int t = 0; t < 6; ++t) targets.at(b, t) = std::uniform_int_distribution<int>(0, 15)(rng);
  }
  const std::vector<bool> domain_flags{true, false};

  Graph<double> constant(false);
  const auto twin_out = forward(constant, twin, tokens, true);
  const auto teacher_out = forward(constant, teacher, tokens, true);
  const auto expert_logits = forward(constant, expert, tokens).logits;
  const auto ref_logits = forward(constant, reference, tokens).logits;
  const auto identity_map = build_layer_map(2, 2, 2, 2);
  const auto deep_map = build_layer_map(2, 4, 2, 4);

  std::vector<std::pair<std::string, GradCheckFn>> cases = {
      {"ce_loss",
       [&](Graph<double>& g) {
         return ce_loss(g, forward(g, student, tokens).logits, targets, loss_mask).value;
       }},
      {"pred_kld",
       [&](Graph<double>& g) {
         return pred_kld(g, forward(g, student, tokens).logits, twin_out.logits, loss_mask, 2.0).value;
       }},
      {"attn_kld",
       [&](Graph<double>& g) {
         return attn_kld(g, forward(g, student, tokens, true).traces, twin_out.traces, identity_map, row_mask).value;
       }},
      {"kd_loss",
       [&](Graph<double>& g) {
         const auto out = forward(g, student, tokens, true);
         return kd_loss(g, out, teacher_out, loss_mask, row_mask, deep_map, KdWeights{0.7, 1.3}).total;
       }},
      {"dae_loss",
       [&](Graph<double>& g) {
         return dae_loss(g, forward(g, student, tokens).logits, expert_logits, ref_logits, domain_flags, loss_mask)
             .total;
       }},
  };
  std::vector<LossGradCheck> out;
  for (const auto& [name, fn] : cases) out.push_back({name, grad_check(fn, student.parameters(), eps)});
  return out;
}

}  // namespace kd
