#include "kd/ablation.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <sstream>

#include "kd/errors.hpp"

namespace kd {
namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(3);
  s << v;
  return s.str();
}

void say(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

std::vector<Sample> suite_for(const std::vector<std::string>& families, std::int64_t per_family, std::uint64_t seed) {
  return generate_corpus({families, per_family * static_cast<std::int64_t>(families.size()), seed, 0.0, Split::eval});
}

struct Corpora {
  fs::path clean, noisy, domain, general_suite, domain_suite;
};

Corpora make_corpora(const fs::path& dir, const ExperimentData& d) {
  Corpora c{dir / "train.clean.general.jsonl", dir / "train.noisy.general.jsonl", dir / "train.domain.jsonl",
            dir / "suite.general.jsonl", dir / "suite.domain.jsonl"};
  const auto& general = general_families();
  const auto& domain = domain_families();
  write_corpus(c.clean, generate_corpus({general, d.n_train, d.data_seed, 0.0, Split::train}));
  write_corpus(c.noisy, generate_corpus({general, d.n_train, d.data_seed, d.noise_rate, Split::train}));
  write_corpus(c.domain, generate_corpus({domain, d.n_domain_train, d.data_seed + 1, 0.0, Split::train}));
  write_corpus(c.general_suite, suite_for(general, d.suite_items, d.data_seed + 1000));
  write_corpus(c.domain_suite, suite_for(domain, d.suite_items, d.data_seed + 1001));
  return c;
}

const MeanStd* find_general(const Comparison& c, const std::string& name, MeanStd& storage) {
  const auto it = c.conditions.find(name);
  if (it == c.conditions.end()) return nullptr;
  storage = {it->second.general_mean, it->second.general_std};
  return &storage;
}

fs::path train_and_report(const TrainConfig& config, const fs::path& dir, const std::vector<Sample>& general_suite,
                          const std::vector<Sample>& domain_suite, EvalReport* report) {
  const auto result = train(config, dir);
  if (report) {
    *report = evaluate_checkpoint(result.best_checkpoint, general_suite, domain_suite, config.seed,
                                  config.eval_max_new);
    write_json(dir / "report.json", to_json(*report));
  }
  return result.best_checkpoint;
}

}  // namespace

const std::vector<std::string>& default_conditions() {
  static const std::vector<std::string> c = {"sft-clean", "sft-noisy",     "kd_attn",
                                             "kd_pred",   "kd_full-small", "kd_full-large"};
  return c;
}

AblationConfig default_ablation_config() {
  AblationConfig c;
  c.large_teacher.n_layers = 8;
  c.large_teacher.n_heads = 8;
  c.large_teacher.d_model = 256;
  c.large_teacher.d_ff = 512;
  c.small_teacher = ModelConfig{};  // student-sized

  c.teacher_train.loss_mode = "sft";
  c.teacher_train.peak_lr = 1e-3;
  c.teacher_train.epochs = 10.0;
  c.teacher_train.max_steps = 450;
  c.teacher_train.micro_batch = 16;
  c.teacher_train.global_batch = 16;
  c.teacher_train.eval_every = 0;

  c.student_train.peak_lr = 2e-3;
  c.student_train.epochs = 10.0;
  c.student_train.max_steps = 300;
  c.student_train.micro_batch = 16;
  c.student_train.global_batch = 16;
  c.student_train.eval_every = 0;
  return c;
}

DaeExperimentConfig default_dae_experiment_config() {
  DaeExperimentConfig c;
  c.expert_model = ModelConfig{};
  c.expert_train.peak_lr = 1e-3;
  c.expert_train.epochs = 10.0;
  c.expert_train.max_steps = 1000;
  c.expert_train.micro_batch = 16;
  c.expert_train.global_batch = 16;
  c.expert_train.eval_every = 0;

  c.dae_train.peak_lr = 1e-4;
  c.dae_train.schedule = "constant";
  c.dae_train.epochs = 10.0;
  c.dae_train.max_steps = 600;
  c.dae_train.micro_batch = 16;
  c.dae_train.global_batch = 16;
  c.dae_train.domain_fraction = 0.1;
  c.dae_train.eval_every = 0;
  return c;
}

EvalReport evaluate_checkpoint(const fs::path& ckpt, const std::vector<Sample>& general_suite,
                               const std::vector<Sample>& domain_suite, std::uint64_t seed, int max_new) {
  const auto model = load_checkpoint(ckpt);
  std::vector<Sample> suite = general_suite;
  suite.insert(suite.end(), domain_suite.begin(), domain_suite.end());
  return evaluate(model, suite, {max_new, ckpt.string(), seed});
}

std::vector<Verdict> ablation_verdicts(const Comparison& c) {
  std::vector<Verdict> out;
  MeanStd full_s, pred_s, attn_s, sft_s, small_s;
  const auto* full = find_general(c, "kd_full-large", full_s);
  const auto* pred = find_general(c, "kd_pred", pred_s);
  const auto* attn = find_general(c, "kd_attn", attn_s);
  const auto* sft = find_general(c, "sft-noisy", sft_s);
  const auto* small = find_general(c, "kd_full-small", small_s);
  auto check = [&](const std::string& name, const MeanStd* a, const MeanStd* b, auto&& pred_fn, auto&& detail_fn) {
    if (!a || !b) {
      out.push_back({name, false, "condition missing"});
      return;
    }
    out.push_back({name, pred_fn(*a, *b), detail_fn(*a, *b)});
  };
  auto ge = [](const MeanStd& a, const MeanStd& b) { return a.mean >= b.mean; };
  auto means = [](const MeanStd& a, const MeanStd& b) { return fmt(a.mean) + " vs " + fmt(b.mean); };
  check("kd_full >= kd_pred", full, pred, ge, means);
  check("kd_pred >= sft", pred, sft, ge, means);
  check("kd_attn >= sft", attn, sft, ge, means);
  check("kd_full - sft >= 1.0", full, sft, [](const MeanStd& a, const MeanStd& b) { return a.mean - b.mean >= 1.0; },
        [](const MeanStd& a, const MeanStd& b) { return "gap " + fmt(a.mean - b.mean); });
  check("std(kd_full) <= std(sft)", full, sft, [](const MeanStd& a, const MeanStd& b) { return a.std <= b.std; },
        [](const MeanStd& a, const MeanStd& b) { return fmt(a.std) + " vs " + fmt(b.std); });
  check("kd_full large >= small - 0.3", full, small,
        [](const MeanStd& a, const MeanStd& b) { return a.mean >= b.mean - 0.3; }, means);
  return out;
}

AblationResult run_ablation(const AblationConfig& config, const ProgressFn& progress) {
  if (config.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  const auto conditions = config.conditions.empty() ? default_conditions() : config.conditions;
  for (const auto& c : conditions) {
    if (std::find(default_conditions().begin(), default_conditions().end(), c) == default_conditions().end()) {
      throw ConfigError("conditions: unknown condition '" + c + "'");
    }
  }
  AblationResult result;
  const auto data_dir = config.out_dir / "data";
  say(progress, "generating corpora in " + data_dir.string());
  const auto corpora = make_corpora(data_dir, config.data);
  result.general_suite = corpora.general_suite;
  result.domain_suite = corpora.domain_suite;
  result.domain_train = corpora.domain;
  const auto general_suite = read_corpus(corpora.general_suite);
  const auto domain_suite = read_corpus(corpora.domain_suite);

  auto need = [&](const std::string& teacher_size) {
    return std::any_of(conditions.begin(), conditions.end(), [&](const std::string& c) {
      return teacher_size == "small" ? c == "kd_full-small" : c.rfind("kd_", 0) == 0 && c != "kd_full-small";
    });
  };
  auto teacher = [&](const std::string& given, const ModelConfig& model, const char* name,
                     std::optional<EvalReport>& report) -> fs::path {
    if (!given.empty()) {
      report = evaluate_checkpoint(given, general_suite, {}, 0, config.student_train.eval_max_new);
      return given;
    }
    say(progress, std::string("training ") + name);
    auto tc = config.teacher_train;
    tc.loss_mode = "sft";
    tc.model = model;
    tc.train_corpus = {corpora.clean.string()};
    EvalReport r;
    const auto ckpt = train_and_report(tc, config.out_dir / name, general_suite, {}, &r);
    report = r;
    say(progress, std::string(name) + " general_score " + fmt(*r.general_score));
    return ckpt;
  };
  if (need("large")) {
    result.large_teacher_ckpt = teacher(config.large_teacher_ckpt, config.large_teacher, "teacher-large",
                                        result.large_teacher_report);
  }
  if (need("small")) {
    result.small_teacher_ckpt = teacher(config.small_teacher_ckpt, config.small_teacher, "teacher-small",
                                        result.small_teacher_report);
  }

  for (const auto& cond : conditions) {
    auto base = config.student_train;
    base.train_corpus = {(cond == "sft-clean" ? corpora.clean : corpora.noisy).string()};
    if (cond == "sft-clean" || cond == "sft-noisy") {
      base.loss_mode = "sft";
    } else {
      base.loss_mode = cond.substr(0, cond.find('-'));
      base.teacher = (cond == "kd_full-small" ? result.small_teacher_ckpt : result.large_teacher_ckpt).string();
    }
    auto run_one = [&, base](std::uint64_t seed) {
      auto tc = base;
      tc.seed = seed;
      const auto dir = config.out_dir / cond / ("seed-" + std::to_string(seed));
      EvalReport report;
      train_and_report(tc, dir, general_suite, domain_suite, &report);
      return std::pair{dir, report};
    };
    std::vector<std::pair<fs::path, EvalReport>> runs;
    if (config.parallel) {
      std::vector<std::future<std::pair<fs::path, EvalReport>>> jobs;
      for (auto seed : config.seeds) jobs.push_back(std::async(std::launch::async, run_one, seed));
      for (auto& j : jobs) runs.push_back(j.get());
    } else {
      for (auto seed : config.seeds) {
        say(progress, "running " + cond + " seed " + std::to_string(seed));
        runs.push_back(run_one(seed));
      }
    }
    for (auto& [dir, report] : runs) {
      say(progress, cond + " " + dir.filename().string() + " general_score " + fmt(*report.general_score));
      result.run_dirs[cond].push_back(dir);
      result.reports[cond].push_back(report);
    }
  }

  result.comparison = compare_runs(result.reports, std::min<std::size_t>(3, config.seeds.size()));
  result.verdicts = ablation_verdicts(result.comparison);
  nlohmann::ordered_json summary;
  summary["comparison"] = to_json(result.comparison);
  auto verdicts = nlohmann::ordered_json::array();
  for (const auto& v : result.verdicts) verdicts.push_back({{"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
  summary["verdicts"] = verdicts;
  if (result.large_teacher_report) summary["teacher_large"] = to_json(*result.large_teacher_report);
  if (result.small_teacher_report) summary["teacher_small"] = to_json(*result.small_teacher_report);
  write_json(config.out_dir / "comparison.json", nlohmann::json(summary));
  return result;
}

DaeExperimentResult run_dae_experiment(const DaeExperimentConfig& config, const ProgressFn& progress) {
  if (config.students.size() != config.seeds.size() || config.students.empty()) {
    throw ConfigError("dae experiment: need one starting checkpoint per seed");
  }
  const auto general_suite = read_corpus(config.general_suite);
  const auto domain_suite = read_corpus(config.domain_suite);
  DaeExperimentResult result;

  fs::path expert = config.expert_ckpt;
  if (expert.empty()) {
    say(progress, "training domain expert");
    auto tc = config.expert_train;
    tc.loss_mode = "sft";
    tc.model = config.expert_model;
    tc.train_corpus = {config.domain_train.string()};
    EvalReport r;
    expert = train_and_report(tc, config.out_dir / "expert", {}, domain_suite, &r);
    result.expert_report = r;
    say(progress, "expert domain_score " + fmt(*r.domain_score));
  }
  for (std::size_t i = 0; i < config.seeds.size(); ++i) {
    const auto seed = config.seeds[i];
    const auto& student = config.students[i];
    result.before.push_back(evaluate_checkpoint(student, general_suite, domain_suite, seed));
    auto tc = config.dae_train;
    tc.loss_mode = "dae";
    tc.seed = seed;
    tc.expert = expert.string();
    tc.reference = student.string();
    tc.student_init = student.string();
    tc.train_corpus = {config.general_train.string()};
    tc.domain_corpus = config.domain_train.string();
    say(progress, "running dae seed " + std::to_string(seed));
    EvalReport after;
    train_and_report(tc, config.out_dir / ("dae-seed-" + std::to_string(seed)), general_suite, domain_suite, &after);
    result.after.push_back(after);
    say(progress, "dae seed " + std::to_string(seed) + ": domain " + fmt(*result.before.back().domain_score) +
                      " -> " + fmt(*after.domain_score) + ", general " + fmt(*result.before.back().general_score) +
                      " -> " + fmt(*after.general_score));
  }
  auto mean_of = [](const std::vector<EvalReport>& rs, bool domain) {
    std::vector<double> v;
    for (const auto& r : rs) v.push_back(domain ? *r.domain_score : *r.general_score);
    return mean_std(v).mean;
  };
  const double d_gain = mean_of(result.after, true) - mean_of(result.before, true);
  const double g_drop = mean_of(result.before, false) - mean_of(result.after, false);
  result.verdicts.push_back({"domain_score gain >= 1.0", d_gain >= 1.0, "gain " + fmt(d_gain)});
  result.verdicts.push_back({"general_score drop < 0.5", g_drop < 0.5, "drop " + fmt(g_drop)});
  return result;
}

}  // namespace kd
