#include "kd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "kd/errors.hpp"
#include "kd/eval.hpp"
#include "kd/ops.hpp"

namespace kd {
namespace {

// Calls v(name, field) for every trainer key in file order.
template <class Config, class Visitor>
void visit_fields(Config& c, Visitor&& v) {
  v("loss_mode", c.loss_mode);
  v("ce_weight", c.ce_weight);
  v("peak_lr", c.peak_lr);
  v("schedule", c.schedule);
  v("warmup_frac", c.warmup_frac);
  v("epochs", c.epochs);
  v("micro_batch", c.micro_batch);
  v("global_batch", c.global_batch);
  v("grad_clip_norm", c.grad_clip_norm);
  v("adam_beta1", c.adam_beta1);
  v("adam_beta2", c.adam_beta2);
  v("adam_eps", c.adam_eps);
  v("weight_decay", c.weight_decay);
  v("temperature", c.temperature);
  v("lambda_pred", c.lambda_pred);
  v("lambda_attn", c.lambda_attn);
  v("seed", c.seed);
  v("init_std", c.init_std);
  v("teacher", c.teacher);
  v("expert", c.expert);
  v("reference", c.reference);
  v("student_init", c.student_init);
  v("train_corpus", c.train_corpus);
  v("domain_corpus", c.domain_corpus);
  v("domain_fraction", c.domain_fraction);
  v("seq_len", c.seq_len);
  v("one_per_row", c.one_per_row);
  v("loss_positions", c.loss_positions);
  v("eval_suite", c.eval_suite);
  v("eval_every", c.eval_every);
  v("eval_max_new", c.eval_max_new);
  v("track_attn_kld", c.track_attn_kld);
  v("max_steps", c.max_steps);
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string unknown_key_message(const std::string& key, const nlohmann::ordered_json& known) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (auto it = known.begin(); it != known.end(); ++it) {
    const auto d = edit_distance(key, it.key());
    if (d < best_d) {
      best_d = d;
      best = it.key();
    }
  }
  std::string msg = "unknown config key '" + key + "'";
  if (best_d <= std::max<std::size_t>(3, key.size() / 3)) msg += " (did you mean '" + best + "'?)";
  return msg;
}

// Checks that `value` may replace `current` (the default) for `key`.
void check_type(const std::string& key, const nlohmann::ordered_json& current, const nlohmann::json& value) {
  bool ok = false;
  if (current.is_boolean()) ok = value.is_boolean();
  else if (current.is_number_integer()) ok = value.is_number_integer();
  else if (current.is_number()) ok = value.is_number();
  else if (current.is_string()) ok = value.is_string();
  else if (current.is_array()) {
    ok = value.is_array() && std::all_of(value.begin(), value.end(), [](const auto& e) { return e.is_string(); });
  }
  if (!ok) {
    throw ConfigError("config key '" + key + "' expects " + std::string(current.type_name()) + ", got " +
                      std::string(value.type_name()));
  }
}

nlohmann::json parse_override(const std::string& key, const std::string& text, const nlohmann::ordered_json& current) {
  auto bad = [&]() {
    return ConfigError("config key '" + key + "' expects " + std::string(current.type_name()) + ", got '" + text + "'");
  };
  if (current.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw bad();
  }
  if (current.is_number_integer()) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (const std::exception&) {
      throw bad();
    }
    if (used != text.size()) throw bad();
    if (current.is_number_unsigned()) {
      if (v < 0) throw bad();
      return static_cast<std::uint64_t>(v);
    }
    return v;
  }
  if (current.is_number()) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(text, &used);
    } catch (const std::exception&) {
      throw bad();
    }
    if (used != text.size()) throw bad();
    return v;
  }
  if (current.is_array()) {
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) arr.push_back(item);
    }
    return arr;
  }
  return text;
}

bool is_kd(LossMode m) { return m == LossMode::kd_pred || m == LossMode::kd_attn || m == LossMode::kd_full; }

// Logits of `model` for the listed rows, scattered into a zero tensor of the
// full batch extent. Undefined when no rows are listed.
Tensor<float> forward_rows(const TransformerModel<float>& model, const TokenBatch& tokens,
                           const std::vector<std::int64_t>& rows) {
  if (rows.empty()) return {};
  const auto V = static_cast<std::int64_t>(model.config().vocab_size);
  Graph<float> g(false);
  if (static_cast<std::int64_t>(rows.size()) == tokens.batch) return forward(g, model, tokens).logits;
  TokenBatch sub;
  sub.batch = static_cast<std::int64_t>(rows.size());
  sub.seq = tokens.seq;
  for (auto r : rows) {
    auto src = tokens.row(r);
    sub.ids.insert(sub.ids.end(), src.begin(), src.end());
  }
  const auto logits = forward(g, model, sub).logits;
  Tensor<float> full({tokens.batch, tokens.seq, V});
  const std::size_t stride = static_cast<std::size_t>(tokens.seq * V);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(logits.ptr() + i * stride, stride, full.ptr() + static_cast<std::size_t>(rows[i]) * stride);
  }
  return full;
}

ShiftedTargets targets_for(const PackedBatch& b, bool all_positions) {
  return shift_targets(b.tokens, all_positions ? b.row_mask : b.loss_mask);
}

void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

TransformerModel<float> load_frozen(const std::string& path, const char* role) {
  if (!std::filesystem::exists(path)) {
    throw FileNotFoundError(std::string(role) + " checkpoint '" + path + "' not found");
  }
  auto m = load_checkpoint(path);
  m.set_trainable(false);
  return m;
}

}  // namespace

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::sft: return "sft";
    case LossMode::kd_pred: return "kd_pred";
    case LossMode::kd_attn: return "kd_attn";
    case LossMode::kd_full: return "kd_full";
    case LossMode::dae: return "dae";
  }
  return "?";
}

LossMode parse_loss_mode(const std::string& name) {
  for (auto m : {LossMode::sft, LossMode::kd_pred, LossMode::kd_attn, LossMode::kd_full, LossMode::dae}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("loss_mode: unknown mode '" + name + "' (expected sft, kd_pred, kd_attn, kd_full or dae)");
}

double TrainConfig::resolved_ce_weight() const {
  if (ce_weight >= 0.0) return ce_weight;
  const auto m = mode();
  return m == LossMode::sft || m == LossMode::kd_attn ? 1.0 : 0.0;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  const auto m = mode();
  if (schedule != "cosine_to_zero" && schedule != "constant") fail("schedule", "must be cosine_to_zero or constant");
  if (!(peak_lr > 0.0)) fail("peak_lr", "must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) fail("warmup_frac", "must be in [0, 1)");
  if (!(epochs > 0.0)) fail("epochs", "must be positive");
  if (micro_batch <= 0) fail("micro_batch", "must be positive");
  if (global_batch <= 0 || global_batch % micro_batch != 0) fail("global_batch", "must be a positive multiple of micro_batch");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm", "must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (!(temperature > 0.0)) fail("temperature", "must be positive");
  if (!(lambda_pred >= 0.0)) fail("lambda_pred", "must be non-negative");
  if (!(lambda_attn >= 0.0)) fail("lambda_attn", "must be non-negative");
  if (is_kd(m) && teacher.empty()) fail("teacher", "required for loss_mode " + loss_mode);
  if (m == LossMode::dae && (expert.empty() || reference.empty())) fail("expert/reference", "both required for loss_mode dae");
  if (train_corpus.empty() && domain_corpus.empty()) fail("train_corpus", "at least one corpus path is required");
  if (!(domain_fraction >= 0.0 && domain_fraction < 1.0)) fail("domain_fraction", "must be in [0, 1)");
  if (seq_len < 4) fail("seq_len", "must be at least 4");
  if (loss_positions != "response" && loss_positions != "all") fail("loss_positions", "must be response or all");
  if (eval_every < 0) fail("eval_every", "must be non-negative");
  if (eval_max_new <= 0) fail("eval_max_new", "must be positive");
  if (max_steps < 0) fail("max_steps", "must be non-negative");
  if (!(init_std > 0.0)) fail("init_std", "must be positive");
  if (seq_len > model.max_seq_len) fail("seq_len", "exceeds model max_seq_len " + std::to_string(model.max_seq_len));
  model.validate();
}

nlohmann::ordered_json to_json(const TrainConfig& config) {
  nlohmann::ordered_json j;
  visit_fields(config, [&](const char* name, const auto& field) { j[name] = field; });
  const nlohmann::json model = to_json(config.model);
  for (const char* key : {"n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len", "rope_base",
                          "rmsnorm_eps", "n_experts", "experts_top_k", "tokenizer_id"}) {
    j[key] = model.at(key);
  }
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  const auto defaults = to_json(c);
  nlohmann::json model = nlohmann::json::object();
  const nlohmann::json model_defaults = to_json(c.model);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (model_defaults.contains(it.key())) {
      model[it.key()] = it.value();
    } else if (!defaults.contains(it.key())) {
      throw ConfigError(unknown_key_message(it.key(), defaults));
    }
  }
  visit_fields(c, [&](const char* name, auto& field) {
    if (!j.contains(name)) return;
    check_type(name, defaults.at(name), j.at(name));
    field = j.at(name).get<std::decay_t<decltype(field)>>();
  });
  c.model = model_config_from_json(model);
  return c;
}

TrainConfig load_config(const nlohmann::json& file_values, const std::vector<std::string>& overrides) {
  if (!file_values.is_object()) throw ConfigError("config file must hold a JSON object");
  auto resolved = to_json(TrainConfig{});
  for (auto it = file_values.begin(); it != file_values.end(); ++it) {
    if (!resolved.contains(it.key())) throw ConfigError(unknown_key_message(it.key(), resolved));
    check_type(it.key(), resolved.at(it.key()), it.value());
    resolved[it.key()] = it.value();
  }
  for (auto item : overrides) {
    if (item.rfind("--", 0) == 0) item = item.substr(2);
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + item + "' is not of the form key=value");
    const auto key = item.substr(0, eq);
    if (!resolved.contains(key)) throw ConfigError(unknown_key_message(key, resolved));
    resolved[key] = parse_override(key, item.substr(eq + 1), resolved.at(key));
  }
  auto config = train_config_from_json(nlohmann::json(resolved));
  config.validate();
  return config;
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json file = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw FileNotFoundError("config file '" + path.string() + "' not found");
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + path.string() + "': " + e.what());
    }
  }
  return load_config(file, overrides);
}

double lr_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps) {
  const auto warmup = static_cast<std::int64_t>(std::floor(config.warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return config.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (config.schedule == "constant" || total_steps == warmup) return config.peak_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return config.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(const std::vector<Tensor<float>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(const std::vector<Tensor<float>>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto p : params) {
    for (auto& g : p.grad()) g = static_cast<float>(g * scale);
  }
  return scale;
}

AdamW::AdamW(std::vector<Tensor<float>> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const bool decay = p.ndim() >= 2 && config_.weight_decay > 0.0;
    auto data = p.data();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad[k];
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      double w = data[k];
      if (decay) w -= lr * config_.weight_decay * w;
      w -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
      data[k] = static_cast<float>(w);
    }
  }
}

nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["l_total"] = m.l_total;
  const auto& b = m.losses;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("l_ce", b.l_ce);
  put("l_pred", b.l_pred);
  put("l_attn", b.l_attn);
  put("l_kd", b.l_kd);
  put("l_d", b.l_d);
  put("l_nd", b.l_nd);
  put("l_dae", b.l_dae);
  j["tokens"] = b.tokens_counted;
  j["attn_rows"] = b.rows_counted;
  j["grad_norm"] = m.grad_norm;
  return j;
}

StepMetrics step_metrics_from_json(const nlohmann::json& j) {
  try {
    StepMetrics m;
    m.step = j.at("step").get<std::int64_t>();
    m.epoch = j.at("epoch").get<double>();
    m.lr = j.at("lr").get<double>();
    m.l_total = j.at("l_total").get<double>();
    auto get = [&](const char* k, std::optional<double>& dst) {
      if (j.contains(k)) dst = j.at(k).get<double>();
    };
    get("l_ce", m.losses.l_ce);
    get("l_pred", m.losses.l_pred);
    get("l_attn", m.losses.l_attn);
    get("l_kd", m.losses.l_kd);
    get("l_d", m.losses.l_d);
    get("l_nd", m.losses.l_nd);
    get("l_dae", m.losses.l_dae);
    m.losses.tokens_counted = j.value("tokens", std::int64_t{0});
    m.losses.rows_counted = j.value("attn_rows", std::int64_t{0});
    m.grad_norm = j.at("grad_norm").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed metrics record: ") + e.what());
  }
}

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("metrics file '" + path.string() + "' not found");
  std::vector<StepMetrics> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(step_metrics_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

Objective make_objective(const TrainConfig& config, const ModelConfig& student, const TransformerModel<float>* teacher,
                         const TransformerModel<float>* expert, const TransformerModel<float>* reference) {
  Objective o;
  o.mode = config.mode();
  o.ce_weight = config.resolved_ce_weight();
  o.temperature = config.temperature;
  o.all_positions = config.loss_positions == "all";
  o.teacher = teacher;
  o.expert = expert;
  o.reference = reference;
  switch (o.mode) {
    case LossMode::kd_pred: o.weights = {config.lambda_pred, 0.0}; break;
    case LossMode::kd_attn: o.weights = {0.0, config.lambda_attn}; break;
    case LossMode::kd_full: o.weights = {config.lambda_pred, config.lambda_attn}; break;
    default: o.weights = {0.0, 0.0}; break;
  }
  if (is_kd(o.mode)) {
    if (!teacher) throw ConfigError("teacher: required for loss_mode " + config.loss_mode);
    require_same_tokenizer(student, teacher->config(), "teacher");
    o.map = build_layer_map(student.n_layers, teacher->config().n_layers, student.n_heads, teacher->config().n_heads);
    o.track_attn = config.track_attn_kld || o.weights.attn != 0.0;
  }
  if (o.mode == LossMode::dae) {
    if (!expert || !reference) throw ConfigError("expert/reference: both required for loss_mode dae");
    require_same_tokenizer(student, expert->config(), "expert");
    require_same_tokenizer(student, reference->config(), "reference");
  }
  return o;
}

StepLosses accumulate_gradients(const Objective& o, TransformerModel<float>& student, std::span<const PackedRow> rows,
                                int micro_batch) {
  if (micro_batch <= 0) throw ConfigError("micro_batch must be positive");
  std::vector<PackedBatch> batches;
  std::vector<ShiftedTargets> targets;
  double tokens = 0.0, attn_rows = 0.0, domain_tokens = 0.0, other_tokens = 0.0;
  const int student_heads = student.config().n_heads;
  for (std::size_t begin = 0; begin < rows.size(); begin += static_cast<std::size_t>(micro_batch)) {
    const auto n = std::min(rows.size() - begin, static_cast<std::size_t>(micro_batch));
    batches.push_back(make_batch(rows.subspan(begin, n)));
    targets.push_back(targets_for(batches.back(), o.all_positions));
    const auto& b = batches.back();
    const auto& mask = targets.back().loss_mask;
    tokens += static_cast<double>(count_active(mask));
    if (o.track_attn) attn_rows += static_cast<double>(attn_row_count(o.map, student_heads, b.row_mask));
    if (o.mode == LossMode::dae) {
      domain_tokens += static_cast<double>(count_active(rows_where(mask, b.domain_flags, true)));
      other_tokens += static_cast<double>(count_active(rows_where(mask, b.domain_flags, false)));
    }
  }
  auto denom = [](double count) { return std::max(count, 1.0); };

  StepLosses out;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto& b = batches[i];
    const auto& sh = targets[i];
    Graph<float> g;
    const auto s_out = forward(g, student, b.tokens, o.track_attn);
    LossBundle bundle;
    double l_total = 0.0;
    std::vector<Tensor<float>> parts;
    if (is_kd(o.mode)) {
      Graph<float> tg(false);
      const auto t_out = forward(tg, *o.teacher, b.tokens, o.track_attn);
      auto kd = kd_loss(g, s_out, t_out, sh.loss_mask, b.row_mask, o.map, o.weights, o.temperature,
                        KdNormalizers{denom(tokens), denom(attn_rows)});
      bundle = kd.bundle;
      l_total += *kd.bundle.l_kd;
      if (kd.total.requires_grad()) parts.push_back(kd.total);
    } else if (o.mode == LossMode::dae) {
      std::vector<std::int64_t> domain_rows, other_rows;
      for (std::size_t r = 0; r < b.domain_flags.size(); ++r) {
        (b.domain_flags[r] ? domain_rows : other_rows).push_back(static_cast<std::int64_t>(r));
      }
      const auto expert_logits = forward_rows(*o.expert, b.tokens, domain_rows);
      const auto ref_logits = forward_rows(*o.reference, b.tokens, other_rows);
      auto dae = dae_loss(g, s_out.logits, expert_logits, ref_logits, b.domain_flags, sh.loss_mask, o.temperature,
                          DaeNormalizers{denom(domain_tokens), denom(other_tokens)});
      bundle = dae.bundle;
      l_total += *dae.bundle.l_dae;
      if (dae.total.requires_grad()) parts.push_back(dae.total);
    }
    if (o.ce_weight != 0.0) {
      auto ce = ce_loss(g, s_out.logits, sh.targets, sh.loss_mask, denom(tokens));
      bundle.l_ce = ce.scalar();
      l_total += o.ce_weight * *bundle.l_ce;
      if (ce.value.requires_grad()) parts.push_back(ops::scale(g, ce.value, static_cast<float>(o.ce_weight)));
    }
    bundle.tokens_counted = count_active(sh.loss_mask);
    if (!parts.empty()) {
      auto total = parts.front();
      for (std::size_t k = 1; k < parts.size(); ++k) total = ops::add(g, total, parts[k]);
      g.backward(total);
    }
    out.bundle += bundle;
    out.l_total += l_total;
  }
  return out;
}

TrainResult train(const TrainConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto mode = config.mode();

  std::optional<TransformerModel<float>> teacher, expert, reference;
  if (is_kd(mode)) teacher = load_frozen(config.teacher, "teacher");
  if (mode == LossMode::dae) {
    expert = load_frozen(config.expert, "expert");
    reference = load_frozen(config.reference, "reference");
  }
  std::string init_path = config.student_init;
  if (init_path.empty() && mode == LossMode::dae) init_path = config.reference;
  TransformerModel<float> student = init_path.empty() ? init_model<float>(config.model, config.seed, config.init_std)
                                                      : load_frozen(init_path, "student_init");
  student.set_trainable(true);
  const auto& scfg = student.config();
  if (scfg.tokenizer_id != kDefaultTokenizerId || scfg.vocab_size != tok::kVocabSize) {
    throw TokenizerError("student tokenizer '" + scfg.tokenizer_id + "' does not match the corpus tokenizer '" +
                         kDefaultTokenizerId + "'");
  }
  for (const auto* m : {&student, teacher ? &*teacher : nullptr, expert ? &*expert : nullptr,
                        reference ? &*reference : nullptr}) {
    if (m && m->config().max_seq_len < config.seq_len) {
      throw ConfigError("seq_len: " + std::to_string(config.seq_len) + " exceeds a model's max_seq_len " +
                        std::to_string(m->config().max_seq_len));
    }
  }
  const auto objective = make_objective(config, scfg, teacher ? &*teacher : nullptr, expert ? &*expert : nullptr,
                                        reference ? &*reference : nullptr);

  std::vector<Sample> samples;
  for (const auto& p : config.train_corpus) {
    auto part = read_corpus(p);
    samples.insert(samples.end(), part.begin(), part.end());
  }
  if (!config.domain_corpus.empty()) {
    samples = mix_domain(samples, read_corpus(config.domain_corpus), config.domain_fraction, config.seed);
  }
  if (samples.empty()) throw ConfigError("train_corpus: no samples");
  auto rows = pack(samples, PackOptions{config.seq_len, config.seed, config.one_per_row});
  const auto n_rows = static_cast<std::int64_t>(rows.size());
  const auto gb = static_cast<std::int64_t>(config.global_batch);
  std::int64_t total_steps =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(config.epochs * static_cast<double>(n_rows) / static_cast<double>(gb))));
  if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

  std::vector<Sample> suite;
  const bool evaluating = !config.eval_suite.empty() && config.eval_every > 0;
  if (evaluating) suite = read_corpus(config.eval_suite);

  std::filesystem::create_directories(out_dir);
  auto resolved = to_json(config);
  {
    const nlohmann::json m = to_json(scfg);
    for (auto it = m.begin(); it != m.end(); ++it) resolved[it.key()] = it.value();
  }
  write_json_file(out_dir / "config.json", resolved);
  std::ofstream metrics_out(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream timing_out(out_dir / "timing.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream eval_out;
  if (evaluating) eval_out.open(out_dir / "eval.jsonl", std::ios::binary | std::ios::trunc);

  TrainResult result;
  result.final_checkpoint = out_dir / "final.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.student_config = scfg;
  const auto params = student.parameters();
  AdamW optimizer(params, {config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay});

  // Epoch e visits rows in a fixed permutation; epoch 0 keeps pack order.
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t cursor = 0, epoch_index = 0;
  std::vector<PackedRow> step_rows;
  auto run_eval = [&](std::int64_t step) {
    const auto report = evaluate(student, suite, {config.eval_max_new, "", config.seed});
    const double score = report.general_score.value_or(report.domain_score.value_or(0.0));
    nlohmann::ordered_json line;
    line["step"] = step;
    line["score"] = score;
    line["report"] = to_json(report);
    eval_out << line.dump() << '\n';
    eval_out.flush();
    if (!result.best_general_score || score > *result.best_general_score) {
      result.best_general_score = score;
      save_checkpoint(student, result.best_checkpoint);
    }
  };

  for (std::int64_t step = 1; step <= total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    step_rows.clear();
    for (std::int64_t k = 0; k < gb; ++k) {
      if (cursor == n_rows) {
        cursor = 0;
        ++epoch_index;
        std::mt19937_64 rng(config.seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch_index));
        std::shuffle(order.begin(), order.end(), rng);
      }
      step_rows.push_back(rows[order[static_cast<std::size_t>(cursor++)]]);
    }
    student.zero_grad();
    const auto losses = accumulate_gradients(objective, student, step_rows, config.micro_batch);
    const double norm = global_grad_norm(params);
    const double lr = lr_at(config, step, total_steps);
    StepMetrics m;
    m.step = step;
    m.epoch = static_cast<double>(epoch_index) + static_cast<double>(cursor) / static_cast<double>(n_rows);
    m.lr = lr;
    m.l_total = losses.l_total;
    m.losses = losses.bundle;
    m.grad_norm = norm;
    if (!std::isfinite(m.l_total) || !std::isfinite(norm)) {
      throw NumericalError("non-finite training state at step " + std::to_string(step) + ": " +
                           to_json(m).dump() + " (lr " + std::to_string(lr) + ")");
    }
    clip_gradients(params, config.grad_clip_norm);
    optimizer.step(lr);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics_out << to_json(m).dump() << '\n';
    metrics_out.flush();
    timing_out << nlohmann::ordered_json{{"step", step}, {"wall_ms", m.wall_ms}}.dump() << '\n';
    timing_out.flush();
    result.metrics.push_back(m);
    if (evaluating && (step % config.eval_every == 0 || step == total_steps)) run_eval(step);
  }
  student.zero_grad();
  save_checkpoint(student, result.final_checkpoint);
  if (!result.best_general_score) {
    std::filesystem::copy_file(result.final_checkpoint, result.best_checkpoint,
                               std::filesystem::copy_options::overwrite_existing);
  }
  result.steps = total_steps;
  timing_out << nlohmann::ordered_json{
                    {"total_wall_ms",
                     std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count()}}
                    .dump()
             << '\n';
  return result;
}

}  // namespace kd
