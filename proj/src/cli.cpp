#include "kd/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "kd/ablation.hpp"
#include "kd/data.hpp"
#include "kd/diagnostics.hpp"
#include "kd/errors.hpp"
#include "kd/eval.hpp"
#include "kd/manifest.hpp"
#include "kd/trainer.hpp"

namespace kd {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

fs::path default_out(const std::string& subcommand) {
  const char* root = std::getenv("KD_OUT_DIR");
  return fs::path(root && *root ? root : "runs") / subcommand;
}

nlohmann::json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError(std::string(what) + " '" + path.string() + "' not found");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + " '" + path.string() + "': " + e.what());
  }
}

void require_file(const std::string& path, const char* what) {
  if (!path.empty() && !fs::exists(path)) throw FileNotFoundError(std::string(what) + " '" + path + "' not found");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << text;
  }
  fs::rename(tmp, path);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Options shared by train, distill and dae. Values given as flags become
// overrides placed before the free-form key=value extras.
struct RunFlags {
  std::string config;
  std::string student_config;
  std::string out;
  std::map<std::string, std::string> named;
};

CLI::App* add_run_command(CLI::App& app, const std::string& name, const std::string& help, RunFlags& flags,
                          const std::vector<std::pair<std::string, std::string>>& keyed) {
  auto* sub = app.add_subcommand(name, help);
  sub->allow_extras();
  sub->add_option("--config", flags.config, "JSON config file (flat trainer and model keys)");
  sub->add_option("--student-config", flags.student_config, "JSON model config for the student");
  sub->add_option("--out", flags.out, "Run directory (default $KD_OUT_DIR/<subcommand>)");
  for (const auto& [flag, key] : keyed) sub->add_option(flag, flags.named[key], "Sets config key '" + key + "'");
  sub->footer("Any config key can be overridden with --key=value.");
  return sub;
}

TrainConfig resolve_run_config(const RunFlags& flags, const std::vector<std::string>& extras, const std::string& mode) {
  nlohmann::json file = flags.config.empty() ? nlohmann::json::object() : read_json_file(flags.config, "config file");
  if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
  if (!flags.student_config.empty()) {
    const auto model = read_json_file(flags.student_config, "student config");
    model_config_from_json(model);
    for (auto it = model.begin(); it != model.end(); ++it) file[it.key()] = it.value();
  }
  std::vector<std::string> overrides;
  for (const auto& [key, value] : flags.named) {
    if (!value.empty()) overrides.push_back(key + "=" + value);
  }
  for (const auto& e : extras) {
    if (e.rfind("--", 0) != 0 || e.find('=') == std::string::npos) {
      throw ConfigError("unexpected argument '" + e + "' (overrides take the form --key=value)");
    }
    overrides.push_back(e);
  }
  if (!mode.empty()) overrides.push_back("loss_mode=" + mode);
  return load_config(file, overrides);
}

void print_step_summary(std::ostream& out, const TrainResult& r) {
  if (r.metrics.empty()) return;
  const auto& first = r.metrics.front();
  const auto& last = r.metrics.back();
  out << "steps " << r.steps << ", l_total " << first.l_total << " -> " << last.l_total << "\n";
  if (r.best_general_score) out << "best held-out score " << *r.best_general_score << "\n";
  out << "final checkpoint " << r.final_checkpoint.string() << "\n";
}

int run_training(const RunFlags& flags, const std::vector<std::string>& extras, const std::string& subcommand,
                 const std::string& forced_mode, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto config = resolve_run_config(flags, extras, forced_mode);
  if (subcommand == "train" && config.mode() != LossMode::sft) {
    throw ConfigError("loss_mode: 'train' runs sft only; use distill or dae for '" + config.loss_mode + "'");
  }
  if (subcommand == "distill" && config.mode() != LossMode::kd_pred && config.mode() != LossMode::kd_attn &&
      config.mode() != LossMode::kd_full) {
    throw ConfigError("--mode: distill expects kd_pred, kd_attn or kd_full, got '" + config.loss_mode + "'");
  }
  for (const auto& p : config.train_corpus) require_file(p, "corpus");
  require_file(config.domain_corpus, "domain corpus");
  require_file(config.eval_suite, "eval suite");
  require_file(config.teacher, "teacher checkpoint");
  require_file(config.expert, "expert checkpoint");
  require_file(config.reference, "reference checkpoint");
  require_file(config.student_init, "student checkpoint");
  const fs::path dir = flags.out.empty() ? default_out(subcommand) : fs::path(flags.out);
  const auto result = train(config, dir);
  print_step_summary(out, result);

  RunManifest m;
  m.subcommand = subcommand;
  m.config = nlohmann::ordered_json::parse(std::ifstream(dir / "config.json"));
  for (const auto& p : config.train_corpus) m.inputs.emplace_back(p);
  for (const std::string* p : {&config.domain_corpus, &config.eval_suite, &config.teacher, &config.expert,
                        &config.reference, &config.student_init, &flags.config, &flags.student_config}) {
    if (!p->empty()) m.inputs.emplace_back(*p);
  }
  m.outputs = {dir / "config.json", dir / "metrics.jsonl", dir / "timing.jsonl", result.final_checkpoint,
               result.best_checkpoint};
  m.seed = config.seed;
  m.wall_seconds = seconds_since(t0);
  write_manifest(dir / "manifest.json", m);
  return 0;
}

void print_report(std::ostream& out, const EvalReport& r) {
  out << std::fixed << std::setprecision(3);
  for (const auto& [name, f] : r.families) {
    out << "  " << std::left << std::setw(10) << name << " " << f.correct << "/" << f.n_items << "  acc "
        << f.accuracy << "\n";
  }
  if (r.general_score) out << "general_score " << *r.general_score << "\n";
  if (r.domain_score) out << "domain_score " << *r.domain_score << "\n";
  out << "perplexity " << r.perplexity << "\n";
  out.unsetf(std::ios::floatfield);
}

void print_comparison(std::ostream& out, const Comparison& c, const std::vector<Verdict>& verdicts) {
  out << std::fixed << std::setprecision(3);
  out << std::left << std::setw(16) << "condition" << " runs  general(mean+-std)  domain(mean+-std)\n";
  for (const auto& [name, s] : c.conditions) {
    out << std::left << std::setw(16) << name << " " << std::setw(4) << s.n_runs << "  " << s.general_mean << " +- "
        << s.general_std;
    if (s.domain_mean) out << "      " << *s.domain_mean << " +- " << *s.domain_std;
    out << "\n";
  }
  for (const auto& v : verdicts) out << (v.pass ? "PASS " : "FAIL ") << v.name << "  " << v.detail << "\n";
  out.unsetf(std::ios::floatfield);
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  tune_allocator();
  CLI::App app{"Knowledge distillation for tiny decoder-only transformers", "kd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  // gen-data
  std::string families = "copy,reverse,sort,add,balance";
  std::int64_t n_samples = 1000;
  std::uint64_t data_seed = 0;
  double noise = 0.0;
  std::string split = "train";
  std::string data_out;
  std::string data_name = "corpus";
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic instruction corpus");
  gen->add_option("--families", families, "Comma-separated family list")->capture_default_str();
  gen->add_option("--n", n_samples, "Number of samples")->capture_default_str();
  gen->add_option("--seed", data_seed, "Generator seed")->capture_default_str();
  gen->add_option("--noise", noise, "Probability of replacing a response with noise")->capture_default_str();
  gen->add_option("--split", split, "train or eval prompt split")->check(CLI::IsMember({"train", "eval"}))
      ->capture_default_str();
  gen->add_option("--out", data_out, "Output .jsonl file, or a directory for <name>.general/.domain.jsonl");
  gen->add_option("--name", data_name, "Corpus name in directory mode")->capture_default_str();

  // train / distill / dae
  RunFlags train_flags, distill_flags, dae_flags;
  auto* train_cmd = add_run_command(app, "train", "Supervised training (students, teachers, experts)", train_flags,
                                    {{"--train-corpus", "train_corpus"}, {"--eval-suite", "eval_suite"},
                                     {"--seed", "seed"}});
  auto* distill_cmd = add_run_command(app, "distill", "Distill a student from a teacher", distill_flags,
                                      {{"--mode", "loss_mode"}, {"--teacher", "teacher"},
                                       {"--train-corpus", "train_corpus"}, {"--eval-suite", "eval_suite"},
                                       {"--student-init", "student_init"}, {"--seed", "seed"}});
  auto* dae_cmd = add_run_command(app, "dae", "Domain alignment from a domain expert", dae_flags,
                                  {{"--expert", "expert"}, {"--reference", "reference"},
                                   {"--student-init", "student_init"}, {"--train-corpus", "train_corpus"},
                                   {"--domain-corpus", "domain_corpus"}, {"--eval-suite", "eval_suite"},
                                   {"--seed", "seed"}});

  // eval
  std::string eval_ckpt, eval_suites, eval_out;
  int eval_max_new = 16;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on held-out suites");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--suite", eval_suites, "Comma-separated suite files")->required();
  eval_cmd->add_option("--max-new", eval_max_new, "Decoding budget per prompt")->capture_default_str();
  eval_cmd->add_option("--seed", eval_seed, "Seed recorded in the report")->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Report JSON path");

  // gradcheck
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  gc_cmd->add_option("--seed", gc_seed, "Model seed")->capture_default_str();
  gc_cmd->add_option("--tol", gc_tol, "Maximum relative error")->capture_default_str();

  // ablation
  std::string abl_out, abl_seeds = "1,2,3", abl_conditions, abl_large, abl_small;
  bool abl_parallel = false;
  std::int64_t abl_n_train = -1;
  double abl_noise = -1.0;
  auto* abl_cmd = app.add_subcommand("ablation", "Run the distillation ablation matrix over several seeds");
  abl_cmd->add_option("--out", abl_out, "Output directory");
  abl_cmd->add_option("--seeds", abl_seeds, "Comma-separated seeds")->capture_default_str();
  abl_cmd->add_option("--conditions", abl_conditions, "Comma-separated subset of conditions");
  abl_cmd->add_option("--teacher-large", abl_large, "Reuse a trained large teacher checkpoint");
  abl_cmd->add_option("--teacher-small", abl_small, "Reuse a trained student-sized teacher checkpoint");
  abl_cmd->add_option("--n-train", abl_n_train, "General training samples");
  abl_cmd->add_option("--noise", abl_noise, "Noise rate of the student training data");
  abl_cmd->add_flag("--parallel", abl_parallel, "Run seeds concurrently (not bitwise reproducible across jobs)");

  // report
  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Summarize an ablation directory");
  report_cmd->add_option("--runs", report_dir, "Ablation output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      const auto t0 = std::chrono::steady_clock::now();
      CorpusSpec spec{split_list(families), n_samples, data_seed, noise,
                      split == "eval" ? Split::eval : Split::train};
      const auto samples = generate_corpus(spec);
      RunManifest m;
      m.subcommand = "gen-data";
      m.config = {{"families", spec.families}, {"n", n_samples}, {"seed", data_seed}, {"noise", noise},
                  {"split", split}};
      m.seed = data_seed;
      fs::path manifest_path;
      const fs::path target = data_out.empty() ? default_out("gen-data") : fs::path(data_out);
      if (target.extension() == ".jsonl") {
        write_corpus(target, samples);
        m.outputs.push_back(target);
        manifest_path = target.parent_path() / (target.stem().string() + ".manifest.json");
      } else {
        std::vector<Sample> general, domain;
        for (const auto& s : samples) (s.domain ? domain : general).push_back(s);
        for (const auto& [part, suffix] : {std::pair{&general, ".general.jsonl"}, std::pair{&domain, ".domain.jsonl"}}) {
          if (part->empty()) continue;
          const auto path = target / (data_name + suffix);
          write_corpus(path, *part);
          m.outputs.push_back(path);
        }
        manifest_path = target / (data_name + ".manifest.json");
      }
      m.wall_seconds = seconds_since(t0);
      write_manifest(manifest_path, m);
      for (const auto& p : m.outputs) out << "wrote " << p.string() << "\n";
      return 0;
    }
    if (train_cmd->parsed()) return run_training(train_flags, train_cmd->remaining(), "train", "", out);
    if (distill_cmd->parsed()) return run_training(distill_flags, distill_cmd->remaining(), "distill", "", out);
    if (dae_cmd->parsed()) return run_training(dae_flags, dae_cmd->remaining(), "dae", "dae", out);
    if (eval_cmd->parsed()) {
      const auto t0 = std::chrono::steady_clock::now();
      require_file(eval_ckpt, "checkpoint");
      std::vector<Sample> suite;
      RunManifest m;
      m.subcommand = "eval";
      m.inputs.emplace_back(eval_ckpt);
      for (const auto& p : split_list(eval_suites)) {
        require_file(p, "suite");
        const auto part = read_corpus(p);
        suite.insert(suite.end(), part.begin(), part.end());
        m.inputs.emplace_back(p);
      }
      const auto model = load_checkpoint(eval_ckpt);
      const auto report = evaluate(model, suite, {eval_max_new, "", eval_seed});
      print_report(out, report);
      const fs::path path = eval_out.empty() ? default_out("eval") / "report.json" : fs::path(eval_out);
      write_text(path, to_json(report).dump(2) + "\n");
      m.config = {{"checkpoint", eval_ckpt}, {"suite", eval_suites}, {"max_new", eval_max_new}};
      m.outputs.push_back(path);
      m.seed = eval_seed;
      m.wall_seconds = seconds_since(t0);
      write_manifest(path.parent_path() / (path.stem().string() + ".manifest.json"), m);
      return 0;
    }
    if (gc_cmd->parsed()) {
      bool ok = true;
      for (const auto& r : run_loss_gradchecks(gc_seed)) {
        const bool pass = r.result.max_rel_error < gc_tol;
        ok = ok && pass;
        out << std::left << std::setw(10) << r.loss << " max_rel_err " << std::scientific << std::setprecision(3)
            << r.result.max_rel_error << " over " << r.result.elements_checked << " elements "
            << (pass ? "ok" : "FAILED") << "\n";
        out.unsetf(std::ios::floatfield);
      }
      return ok ? 0 : 2;
    }
    if (abl_cmd->parsed()) {
      const auto t0 = std::chrono::steady_clock::now();
      auto config = default_ablation_config();
      config.out_dir = abl_out.empty() ? default_out("ablation") : fs::path(abl_out);
      config.seeds.clear();
      for (const auto& s : split_list(abl_seeds)) {
        try {
          config.seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          throw ConfigError("--seeds: '" + s + "' is not a seed");
        }
      }
      config.conditions = split_list(abl_conditions);
      require_file(abl_large, "teacher checkpoint");
      require_file(abl_small, "teacher checkpoint");
      config.large_teacher_ckpt = abl_large;
      config.small_teacher_ckpt = abl_small;
      if (abl_n_train > 0) config.data.n_train = abl_n_train;
      if (abl_noise >= 0.0) config.data.noise_rate = abl_noise;
      config.parallel = abl_parallel;
      const auto result = run_ablation(config, [&](const std::string& msg) { out << msg << std::endl; });
      print_comparison(out, result.comparison, result.verdicts);
      RunManifest m;
      m.subcommand = "ablation";
      m.config = {{"seeds", config.seeds}, {"conditions", config.conditions}, {"parallel", config.parallel},
                  {"n_train", config.data.n_train}, {"noise_rate", config.data.noise_rate}};
      m.outputs = {config.out_dir / "comparison.json"};
      m.wall_seconds = seconds_since(t0);
      write_manifest(config.out_dir / "manifest.json", m);
      return 0;
    }
    if (report_cmd->parsed()) {
      const fs::path dir(report_dir);
      if (!fs::is_directory(dir)) throw FileNotFoundError("ablation directory '" + report_dir + "' not found");
      std::map<std::string, std::vector<EvalReport>> runs;
      for (const auto& cond : fs::directory_iterator(dir)) {
        if (!cond.is_directory()) continue;
        std::vector<fs::path> reports;
        for (const auto& run : fs::directory_iterator(cond.path())) {
          if (fs::exists(run.path() / "report.json")) reports.push_back(run.path() / "report.json");
        }
        std::sort(reports.begin(), reports.end());
        for (const auto& p : reports) runs[cond.path().filename().string()].push_back(
            eval_report_from_json(read_json_file(p, "report")));
      }
      if (runs.empty()) throw FileNotFoundError("no run reports under '" + report_dir + "'");
      const auto comparison = compare_runs(runs);
      print_comparison(out, comparison, ablation_verdicts(comparison));
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace kd
