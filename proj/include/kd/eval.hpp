#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kd/data.hpp"
#include "kd/model.hpp"

namespace kd {

struct FamilyResult {
  std::int64_t n_items = 0;
  std::int64_t correct = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::map<std::string, FamilyResult> families;
  std::optional<double> general_score;  // mean general-family accuracy x 10
  std::optional<double> domain_score;   // mean domain-family accuracy x 10
  double perplexity = 0.0;              // exp(mean response-token cross-entropy)
  std::string checkpoint_id;
  std::uint64_t seed = 0;
  std::string suite_digest;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

struct EvalOptions {
  int max_new = 16;
  std::string checkpoint_id;
  std::uint64_t seed = 0;
};

// Greedy-decodes every suite prompt and scores exact matches of the decoded
// text (EOS stripped) against the reference responses.
EvalReport evaluate(const TransformerModel<float>& model, const std::vector<Sample>& suite, const EvalOptions& options);

// Scores decoded continuations (one per suite item, a trailing EOS is
// ignored) without perplexity or checkpoint id.
EvalReport score_outputs(const std::vector<Sample>& suite, const std::vector<std::vector<std::int32_t>>& outputs);

// Order-sensitive digest of a suite's prompts and responses.
std::string suite_digest(const std::vector<Sample>& suite);

// Expected exact-match accuracy of uniform guessing over a family's closed
// answer set, 0 for open-ended families.
double chance_accuracy(const std::string& family);

struct ConditionStats {
  std::size_t n_runs = 0;
  double general_mean = 0.0;
  double general_std = 0.0;  // population standard deviation
  std::optional<double> domain_mean;
  std::optional<double> domain_std;
};

struct PairVerdict {
  std::string a;
  std::string b;
  double general_diff = 0.0;  // mean(a) - mean(b)
  bool a_ge_b = false;
};

struct Comparison {
  std::map<std::string, ConditionStats> conditions;
  std::vector<PairVerdict> pairs;  // every ordered pair of distinct conditions
};

nlohmann::json to_json(const Comparison& comparison);

// Mean and population standard deviation of general/domain scores per
// condition. Throws ComparabilityError when reports come from different
// suites and ConfigError when a condition has fewer than `min_seeds` runs.
Comparison compare_runs(const std::map<std::string, std::vector<EvalReport>>& runs, std::size_t min_seeds = 3);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);

}  // namespace kd
