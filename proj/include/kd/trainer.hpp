#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kd/data.hpp"
#include "kd/losses.hpp"
#include "kd/model.hpp"

namespace kd {

enum class LossMode { sft, kd_pred, kd_attn, kd_full, dae };
std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& name);

struct TrainConfig {
  std::string loss_mode = "sft";
  // Weight of the cross-entropy term; negative selects the mode default
  // (1 for sft and kd_attn, 0 otherwise).
  double ce_weight = -1.0;
  double peak_lr = 1e-3;
  std::string schedule = "cosine_to_zero";  // or "constant"
  double warmup_frac = 0.1;
  double epochs = 1.0;
  int micro_batch = 16;
  int global_batch = 256;  // packed sequences per optimizer step
  double grad_clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double temperature = 1.0;
  double lambda_pred = 1.0;
  double lambda_attn = 1.0;
  std::uint64_t seed = 0;
  double init_std = 0.02;  // fresh students only
  std::string teacher;
  std::string expert;
  std::string reference;
  std::string student_init;
  std::vector<std::string> train_corpus;
  std::string domain_corpus;
  double domain_fraction = 0.1;
  int seq_len = 128;
  bool one_per_row = false;
  std::string loss_positions = "response";  // or "all"
  std::string eval_suite;
  int eval_every = 200;
  int eval_max_new = 16;
  bool track_attn_kld = true;
  std::int64_t max_steps = 0;  // 0 = no cap
  ModelConfig model;

  LossMode mode() const { return parse_loss_mode(loss_mode); }
  double resolved_ce_weight() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Flat JSON with trainer and model keys side by side.
nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Resolves a config: defaults < file values < `key=value` overrides. Unknown
// keys and type mismatches throw ConfigError naming the key.
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);
TrainConfig load_config(const nlohmann::json& file_values, const std::vector<std::string>& overrides);

// Learning rate for optimizer step `step` in [0, total_steps]: linear warmup
// over floor(warmup_frac * total_steps) steps, then cosine decay to 0 or flat.
double lr_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps);

double global_grad_norm(const std::vector<Tensor<float>>& params);
// Scales all gradients by max_norm / norm when the global norm exceeds
// max_norm; returns the applied scale.
double clip_gradients(const std::vector<Tensor<float>>& params, double max_norm);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Decoupled weight decay applies to parameters with two or more axes only.
class AdamW {
 public:
  AdamW(std::vector<Tensor<float>> params, AdamWConfig config);
  void step(double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor<float>> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig config_;
  std::int64_t t_ = 0;
};

struct StepMetrics {
  std::int64_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double l_total = 0.0;
  LossBundle losses;
  double grad_norm = 0.0;
  double wall_ms = 0.0;  // written to timing.jsonl only, keeping metrics.jsonl reproducible
};

nlohmann::ordered_json to_json(const StepMetrics& m);
StepMetrics step_metrics_from_json(const nlohmann::json& j);
std::vector<StepMetrics> read_metrics(const std::filesystem::path& path);

// Frozen models and loss settings for one run.
struct Objective {
  LossMode mode = LossMode::sft;
  double ce_weight = 1.0;
  KdWeights weights;
  double temperature = 1.0;
  bool all_positions = false;
  bool track_attn = false;
  LayerHeadMap map;
  const TransformerModel<float>* teacher = nullptr;
  const TransformerModel<float>* expert = nullptr;
  const TransformerModel<float>* reference = nullptr;
};

Objective make_objective(const TrainConfig& config, const ModelConfig& student, const TransformerModel<float>* teacher,
                         const TransformerModel<float>* expert, const TransformerModel<float>* reference);

struct StepLosses {
  LossBundle bundle;
  double l_total = 0.0;
};

// Accumulates student gradients of the global-batch mean loss over `rows`,
// processed `micro_batch` rows at a time. Gradients are added to whatever the
// student already holds.
StepLosses accumulate_gradients(const Objective& objective, TransformerModel<float>& student,
                                std::span<const PackedRow> rows, int micro_batch);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::int64_t steps = 0;
  std::vector<StepMetrics> metrics;
  std::optional<double> best_general_score;
  ModelConfig student_config;
};

// Runs one training job and writes config.json, metrics.jsonl, timing.jsonl,
// final.ckpt and best.ckpt into out_dir.
TrainResult train(const TrainConfig& config, const std::filesystem::path& out_dir);

}  // namespace kd
