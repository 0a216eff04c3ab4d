#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kd/eval.hpp"
#include "kd/trainer.hpp"

namespace kd {

// Data and budget knobs shared by the ablation and domain-alignment
// experiments.
struct ExperimentData {
  std::int64_t n_train = 12000;         // general training samples
  std::int64_t n_domain_train = 6000;   // catalog samples for the expert and the mix
  std::int64_t suite_items = 100;       // per family
  double noise_rate = 0.2;
  std::uint64_t data_seed = 7;
};

struct AblationConfig {
  std::filesystem::path out_dir;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> conditions;  // empty = the six defaults
  ExperimentData data;
  ModelConfig large_teacher;
  ModelConfig small_teacher;
  TrainConfig teacher_train;  // used for both teachers
  TrainConfig student_train;  // base for every student run
  std::string large_teacher_ckpt;  // trained when empty
  std::string small_teacher_ckpt;  // trained when empty
  bool parallel = false;
};

// Defaults sized for a single CPU core.
AblationConfig default_ablation_config();
const std::vector<std::string>& default_conditions();

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct AblationResult {
  std::map<std::string, std::vector<EvalReport>> reports;
  std::map<std::string, std::vector<std::filesystem::path>> run_dirs;
  Comparison comparison;
  std::vector<Verdict> verdicts;
  std::optional<EvalReport> large_teacher_report;
  std::optional<EvalReport> small_teacher_report;
  std::filesystem::path large_teacher_ckpt;
  std::filesystem::path small_teacher_ckpt;
  std::filesystem::path general_suite;
  std::filesystem::path domain_suite;
  std::filesystem::path domain_train;
};

using ProgressFn = std::function<void(const std::string&)>;

// Generates the corpora, trains (or loads) both teachers, runs every
// condition for every seed and compares the resulting reports.
AblationResult run_ablation(const AblationConfig& config, const ProgressFn& progress = {});

// Orderings checked on an ablation: kd_full >= kd_pred >= sft, kd_attn >= sft,
// kd_full - sft >= 1.0, std(kd_full) <= std(sft), and the bigger-teacher row.
std::vector<Verdict> ablation_verdicts(const Comparison& comparison);

struct DaeExperimentConfig {
  std::filesystem::path out_dir;
  std::vector<std::filesystem::path> students;  // one starting checkpoint per seed
  std::vector<std::uint64_t> seeds;
  std::filesystem::path general_train;
  std::filesystem::path domain_train;
  std::filesystem::path general_suite;
  std::filesystem::path domain_suite;
  ModelConfig expert_model;
  TrainConfig expert_train;
  TrainConfig dae_train;
  std::string expert_ckpt;  // trained when empty
};

struct DaeExperimentResult {
  std::vector<EvalReport> before;
  std::vector<EvalReport> after;
  std::optional<EvalReport> expert_report;
  std::vector<Verdict> verdicts;
};

// Student-sized expert and a 10% domain mix; students, seeds and paths are
// left for the caller.
DaeExperimentConfig default_dae_experiment_config();

DaeExperimentResult run_dae_experiment(const DaeExperimentConfig& config, const ProgressFn& progress = {});

// Evaluates a checkpoint on the general suite and, if given, the domain suite,
// merged into one report.
EvalReport evaluate_checkpoint(const std::filesystem::path& ckpt, const std::vector<Sample>& general_suite,
                               const std::vector<Sample>& domain_suite, std::uint64_t seed, int max_new = 16);

}  // namespace kd
