#include "kd/eval.hpp"

#include <cmath>
#include <cstdio>

#include "kd/errors.hpp"
#include "kd/losses.hpp"

namespace kd {
namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Response-token cross-entropy of the suite, one sample per row.
double suite_perplexity(const TransformerModel<float>& model, const std::vector<Sample>& suite) {
  std::size_t longest = 0;
  for (const auto& s : suite) longest = std::max(longest, s.packed_length());
  PackOptions opts;
  opts.seq_len = static_cast<int>(longest);
  opts.one_per_row = true;
  const auto rows = pack(suite, opts);
  double total = 0.0;
  std::int64_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < rows.size(); begin += kChunk) {
    const auto batch = make_batch(std::span(rows).subspan(begin, std::min(kChunk, rows.size() - begin)));
    Graph<float> g(false);
    const auto out = forward(g, model, batch.tokens);
    const auto shifted = shift_targets(batch.tokens, batch.loss_mask);
    const auto active = count_active(shifted.loss_mask);
    if (active == 0) continue;
    const auto term = ce_loss(g, out.logits, shifted.targets, shifted.loss_mask, 1.0);
    total += term.scalar();
    count += active;
  }
  return count ? std::exp(total / static_cast<double>(count)) : 1.0;
}

}  // namespace

std::string suite_digest(const std::vector<Sample>& suite) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& s : suite) {
    mix(s.family);
    mix(s.prompt_text());
    mix(s.response_text());
  }
  return hex64(h);
}

double chance_accuracy(const std::string& family) {
  const int n = answer_space(family);
  return n > 0 ? 1.0 / n : 0.0;
}

EvalReport score_outputs(const std::vector<Sample>& suite, const std::vector<std::vector<std::int32_t>>& outputs) {
  if (outputs.size() != suite.size()) {
    throw DimensionError("score_outputs: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(suite.size()) + " items");
  }
  EvalReport report;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    auto generated = outputs[i];
    if (!generated.empty() && generated.back() == tok::EOS) generated.pop_back();
    const bool hit = detokenize(generated) == suite[i].response_text();
    auto& fam = report.families[suite[i].family];
    ++fam.n_items;
    fam.correct += hit ? 1 : 0;
  }
  double general = 0.0, domain = 0.0;
  int n_general = 0, n_domain = 0;
  for (auto& [name, fam] : report.families) {
    fam.accuracy = static_cast<double>(fam.correct) / static_cast<double>(fam.n_items);
    if (is_domain_family(name)) {
      domain += fam.accuracy;
      ++n_domain;
    } else {
      general += fam.accuracy;
      ++n_general;
    }
  }
  if (n_general) report.general_score = general / n_general * 10.0;
  if (n_domain) report.domain_score = domain / n_domain * 10.0;
  report.suite_digest = suite_digest(suite);
  return report;
}

EvalReport evaluate(const TransformerModel<float>& model, const std::vector<Sample>& suite, const EvalOptions& options) {
  if (model.config().tokenizer_id != kDefaultTokenizerId || model.config().vocab_size != tok::kVocabSize) {
    throw TokenizerError("model tokenizer '" + model.config().tokenizer_id + "' (vocab " +
                         std::to_string(model.config().vocab_size) + ") does not match suite tokenizer '" +
                         kDefaultTokenizerId + "' (vocab " + std::to_string(tok::kVocabSize) + ")");
  }
  if (suite.empty()) throw ConfigError("evaluation suite is empty");
  std::vector<std::vector<std::int32_t>> prompts;
  prompts.reserve(suite.size());
  for (const auto& s : suite) {
    std::vector<std::int32_t> p{tok::BOS};
    p.insert(p.end(), s.prompt.begin(), s.prompt.end());
    p.push_back(tok::SEP);
    prompts.push_back(std::move(p));
  }
  const auto outputs = greedy_decode_batch(model, prompts, options.max_new, tok::EOS);

  EvalReport report = score_outputs(suite, outputs);
  report.perplexity = suite_perplexity(model, suite);
  report.checkpoint_id = options.checkpoint_id.empty() ? hex64(model.checksum()) : options.checkpoint_id;
  report.seed = options.seed;
  report.suite_digest = suite_digest(suite);
  return report;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json fams = nlohmann::ordered_json::object();
  for (const auto& [name, f] : r.families) {
    fams[name] = {{"n_items", f.n_items}, {"correct", f.correct}, {"accuracy", f.accuracy}};
  }
  j["families"] = fams;
  j["general_score"] = r.general_score ? nlohmann::ordered_json(*r.general_score) : nullptr;
  j["domain_score"] = r.domain_score ? nlohmann::ordered_json(*r.domain_score) : nullptr;
  j["perplexity"] = r.perplexity;
  j["checkpoint_id"] = r.checkpoint_id;
  j["seed"] = r.seed;
  j["suite_digest"] = r.suite_digest;
  return nlohmann::json(j);
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    for (const auto& [name, f] : j.at("families").items()) {
      r.families[name] = {f.at("n_items").get<std::int64_t>(), f.at("correct").get<std::int64_t>(),
                          f.at("accuracy").get<double>()};
    }
    if (!j.at("general_score").is_null()) r.general_score = j.at("general_score").get<double>();
    if (!j.at("domain_score").is_null()) r.domain_score = j.at("domain_score").get<double>();
    r.perplexity = j.at("perplexity").get<double>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.suite_digest = j.at("suite_digest").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed evaluation report: ") + e.what());
  }
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

Comparison compare_runs(const std::map<std::string, std::vector<EvalReport>>& runs, std::size_t min_seeds) {
  Comparison out;
  std::optional<std::string> digest;
  for (const auto& [name, reports] : runs) {
    if (reports.size() < min_seeds) {
      throw ConfigError("condition '" + name + "' has " + std::to_string(reports.size()) + " runs, need at least " +
                        std::to_string(min_seeds));
    }
    std::vector<double> general, domain;
    for (const auto& r : reports) {
      if (!digest) digest = r.suite_digest;
      if (r.suite_digest != *digest) {
        throw ComparabilityError("condition '" + name + "' was evaluated on suite " + r.suite_digest +
                                 ", expected " + *digest);
      }
      if (!r.general_score) throw ComparabilityError("condition '" + name + "' has a report without general_score");
      general.push_back(*r.general_score);
      if (r.domain_score) domain.push_back(*r.domain_score);
    }
    ConditionStats stats;
    stats.n_runs = reports.size();
    const auto g = mean_std(general);
    stats.general_mean = g.mean;
    stats.general_std = g.std;
    if (domain.size() == reports.size()) {
      const auto d = mean_std(domain);
      stats.domain_mean = d.mean;
      stats.domain_std = d.std;
    }
    out.conditions[name] = stats;
  }
  for (const auto& [a, sa] : out.conditions) {
    for (const auto& [b, sb] : out.conditions) {
      if (a == b) continue;
      const double diff = sa.general_mean - sb.general_mean;
      out.pairs.push_back({a, b, diff, diff >= 0.0});
    }
  }
  return out;
}

nlohmann::json to_json(const Comparison& c) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json conds = nlohmann::ordered_json::object();
  for (const auto& [name, s] : c.conditions) {
    nlohmann::ordered_json e;
    e["n_runs"] = s.n_runs;
    e["general_mean"] = s.general_mean;
    e["general_std"] = s.general_std;
    e["domain_mean"] = s.domain_mean ? nlohmann::ordered_json(*s.domain_mean) : nullptr;
    e["domain_std"] = s.domain_std ? nlohmann::ordered_json(*s.domain_std) : nullptr;
    conds[name] = e;
  }
  j["conditions"] = conds;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : c.pairs) {
    pairs.push_back({{"a", p.a}, {"b", p.b}, {"general_diff", p.general_diff}, {"a_ge_b", p.a_ge_b}});
  }
  j["pairs"] = pairs;
  return nlohmann::json(j);
}

}  // namespace kd
