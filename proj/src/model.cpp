#include "kd/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "kd/ops.hpp"

namespace kd {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (head_dim() % 2 != 0) throw ConfigError("model config: d_model / n_heads must be even for rotary positions");
  if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
  if (!(rmsnorm_eps > 0.0)) throw ConfigError("model config: rmsnorm_eps must be positive");
  if (n_experts < 0) throw ConfigError("model config: n_experts must be >= 0");
  if (n_experts == 1) throw ConfigError("model config: n_experts must be 0 (dense) or >= 2");
  if (n_experts > 0 && (experts_top_k < 1 || experts_top_k > n_experts)) {
    throw ConfigError("model config: experts_top_k must lie in [1, n_experts]");
  }
  if (tokenizer_id.empty()) throw ConfigError("model config: tokenizer_id must not be empty");
}

std::int64_t ModelConfig::param_count() const {
  const std::int64_t d = d_model, f = d_ff, v = vocab_size;
  const std::int64_t mlp = 3 * d * f;
  const std::int64_t experts = n_experts == 0 ? 1 : n_experts;
  const std::int64_t router = n_experts == 0 ? 0 : d * n_experts;
  const std::int64_t block = 2 * d + 4 * d * d + experts * mlp + router;
  return v * d + n_layers * block + d + d * v;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["rope_base"] = c.rope_base;
  j["rmsnorm_eps"] = c.rmsnorm_eps;
  j["n_experts"] = c.n_experts;
  j["experts_top_k"] = c.experts_top_k;
  j["tokenizer_id"] = c.tokenizer_id;
  return nlohmann::json(j);
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    const auto& v = it.value();
    auto as_int = [&](int& dst) {
      if (!v.is_number_integer()) throw ConfigError("model config: '" + key + "' must be an integer");
      dst = v.get<int>();
    };
    auto as_double = [&](double& dst) {
      if (!v.is_number()) throw ConfigError("model config: '" + key + "' must be a number");
      dst = v.get<double>();
    };
    if (key == "n_layers") as_int(c.n_layers);
    else if (key == "n_heads") as_int(c.n_heads);
    else if (key == "d_model") as_int(c.d_model);
    else if (key == "d_ff") as_int(c.d_ff);
    else if (key == "vocab_size") as_int(c.vocab_size);
    else if (key == "max_seq_len") as_int(c.max_seq_len);
    else if (key == "rope_base") as_double(c.rope_base);
    else if (key == "rmsnorm_eps") as_double(c.rmsnorm_eps);
    else if (key == "n_experts") as_int(c.n_experts);
    else if (key == "experts_top_k") as_int(c.experts_top_k);
    else if (key == "tokenizer_id") {
      if (!v.is_string()) throw ConfigError("model config: 'tokenizer_id' must be a string");
      c.tokenizer_id = v.get<std::string>();
    } else {
      throw ConfigError("model config: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

void require_same_tokenizer(const ModelConfig& a, const ModelConfig& b, const std::string& what) {
  if (a.tokenizer_id != b.tokenizer_id || a.vocab_size != b.vocab_size) {
    throw TokenizerError(what + ": tokenizer mismatch ('" + a.tokenizer_id + "', V=" + std::to_string(a.vocab_size) +
                         " vs '" + b.tokenizer_id + "', V=" + std::to_string(b.vocab_size) + ")");
  }
}

template <class T>
TransformerModel<T>::TransformerModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::int64_t d = config_.d_model, f = config_.d_ff, v = config_.vocab_size;
  embed = Tensor<T>({v, d});
  blocks.resize(static_cast<std::size_t>(config_.n_layers));
  for (auto& b : blocks) {
    b.attn_norm = Tensor<T>({d});
    b.wq = Tensor<T>({d, d});
    b.wk = Tensor<T>({d, d});
    b.wv = Tensor<T>({d, d});
    b.wo = Tensor<T>({d, d});
    b.mlp_norm = Tensor<T>({d});
    const int experts = config_.n_experts == 0 ? 1 : config_.n_experts;
    if (config_.n_experts > 0) b.router = Tensor<T>({d, config_.n_experts});
    b.experts.resize(static_cast<std::size_t>(experts));
    for (auto& e : b.experts) {
      e.w_gate = Tensor<T>({d, f});
      e.w_up = Tensor<T>({d, f});
      e.w_down = Tensor<T>({f, d});
    }
  }
  final_norm = Tensor<T>({d});
  lm_head = Tensor<T>({d, v});
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> TransformerModel<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("embed", embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm", b.attn_norm);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "mlp_norm", b.mlp_norm);
    if (b.router.defined()) out.emplace_back(p + "router", b.router);
    for (std::size_t e = 0; e < b.experts.size(); ++e) {
      const std::string q = b.router.defined() ? p + "experts." + std::to_string(e) + "." : p + "mlp.";
      out.emplace_back(q + "w_gate", b.experts[e].w_gate);
      out.emplace_back(q + "w_up", b.experts[e].w_up);
      out.emplace_back(q + "w_down", b.experts[e].w_down);
    }
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("lm_head", lm_head);
  return out;
}

template <class T>
std::vector<Tensor<T>> TransformerModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <class T>
std::int64_t TransformerModel<T>::param_count() const {
  std::int64_t n = 0;
  for (const auto& t : parameters()) n += static_cast<std::int64_t>(t.numel());
  return n;
}

template <class T>
void TransformerModel<T>::set_trainable(bool trainable) {
  for (auto t : parameters()) {
    t.set_requires_grad(trainable);
    if (trainable) t.zero_grad();
    else t.drop_grad();
  }
}

template <class T>
void TransformerModel<T>::zero_grad() {
  for (auto t : parameters()) {
    if (t.requires_grad()) t.zero_grad();
  }
}

template <class T>
std::uint64_t TransformerModel<T>::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : parameters()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
    for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <class T>
TransformerModel<T> TransformerModel<T>::clone() const {
  return cast<T>();
}

template <class T>
template <class U>
TransformerModel<U> TransformerModel<T>::cast() const {
  TransformerModel<U> out(config_);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = src[i].data();
    auto d = dst[i].data();
    for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<U>(s[j]);
  }
  return out;
}

template <class T>
TransformerModel<T> init_model(const ModelConfig& config, std::uint64_t seed, double init_std) {
  TransformerModel<T> model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  for (auto& [name, t] : model.named_parameters()) {
    const bool is_gain = t.ndim() == 1;
    for (auto& v : t.data()) v = is_gain ? T(1) : static_cast<T>(normal(rng));
  }
  return model;
}

template <class T>
Tensor<T> moe_mlp(Graph<T>& g, const Tensor<T>& x, const BlockWeights<T>& block, int top_k) {
  auto expert = [&](const ExpertWeights<T>& e) {
    auto gate = ops::silu(g, ops::matmul(g, x, e.w_gate));
    auto up = ops::matmul(g, x, e.w_up);
    return ops::matmul(g, ops::mul(g, gate, up), e.w_down);
  };
  if (!block.router.defined()) return expert(block.experts.front());
  if (block.experts.size() < 2) throw DimensionError("moe_mlp: needs at least two experts");
  auto probs = ops::softmax(g, ops::matmul(g, x, block.router));
  auto weights = ops::topk_renormalize(g, probs, top_k);
  std::vector<Tensor<T>> outs;
  outs.reserve(block.experts.size());
  for (const auto& e : block.experts) outs.push_back(expert(e));
  return ops::mix_experts(g, weights, outs);
}

template <class T>
ForwardOutput<T> forward(Graph<T>& g, const TransformerModel<T>& model, const TokenBatch& tokens, bool need_traces) {
  const auto& cfg = model.config();
  if (tokens.batch <= 0 || tokens.seq <= 0 || tokens.ids.size() != static_cast<std::size_t>(tokens.batch * tokens.seq)) {
    throw DimensionError("forward: malformed token batch");
  }
  if (tokens.seq > cfg.max_seq_len) {
    throw DimensionError("forward: sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const auto id = tokens.ids[i];
    if (id < 0 || id >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " at (row " +
                            std::to_string(static_cast<std::int64_t>(i) / tokens.seq) + ", position " +
                            std::to_string(static_cast<std::int64_t>(i) % tokens.seq) + ") outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
  }
  const std::int64_t batch = tokens.batch, seq = tokens.seq;
  std::vector<std::int32_t> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(static_cast<std::int64_t>(i) % seq);
  const auto mask = ops::causal_mask<T>(seq);
  const T factor = T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));

  ForwardOutput<T> out;
  Tensor<T> x = ops::embedding(g, model.embed, tokens.ids);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    auto h = ops::rms_norm(g, x, b.attn_norm, cfg.rmsnorm_eps);
    auto q = ops::rope(g, ops::matmul(g, h, b.wq), cfg.n_heads, positions, cfg.rope_base);
    auto k = ops::rope(g, ops::matmul(g, h, b.wk), cfg.n_heads, positions, cfg.rope_base);
    auto v = ops::matmul(g, h, b.wv);
    auto scores = ops::attention_scores(g, q, k, batch, cfg.n_heads, factor);
    auto probs = ops::masked_softmax(g, scores, mask);
    if (need_traces) out.traces.push_back({static_cast<int>(l), probs});
    auto attn = ops::matmul(g, ops::attention_apply(g, probs, v, batch, cfg.n_heads), b.wo);
    x = ops::add(g, x, attn);
    auto m = moe_mlp(g, ops::rms_norm(g, x, b.mlp_norm, cfg.rmsnorm_eps), b, cfg.experts_top_k);
    x = ops::add(g, x, m);
  }
  auto logits = ops::matmul(g, ops::rms_norm(g, x, model.final_norm, cfg.rmsnorm_eps), model.lm_head);
  out.logits = ops::reshape(g, logits, {batch, seq, cfg.vocab_size});
  return out;
}

namespace {

std::int32_t argmax_row(const float* row, std::int64_t n) {
  std::int32_t best = 0;
  for (std::int64_t i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = static_cast<std::int32_t>(i);
  }
  return best;
}

}  // namespace

std::vector<std::vector<std::int32_t>> greedy_decode_batch(const TransformerModel<float>& model,
                                                           const std::vector<std::vector<std::int32_t>>& prompts,
                                                           int max_new, std::int32_t stop_token) {
  std::vector<std::vector<std::int32_t>> results(prompts.size());
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].empty()) throw DimensionError("greedy_decode: prompt " + std::to_string(i) + " is empty");
    by_length[prompts[i].size()].push_back(i);
  }
  const auto vocab = model.config().vocab_size;
  for (const auto& [length, members] : by_length) {
    TokenBatch batch;
    batch.batch = static_cast<std::int64_t>(members.size());
    batch.seq = static_cast<std::int64_t>(length);
    for (auto idx : members) batch.ids.insert(batch.ids.end(), prompts[idx].begin(), prompts[idx].end());
    std::vector<bool> done(members.size(), false);
    for (int step = 0; step < max_new; ++step) {
      if (batch.seq >= model.config().max_seq_len) break;
      Graph<float> g(false);
      auto out = forward(g, model, batch);
      TokenBatch next;
      next.batch = batch.batch;
      next.seq = batch.seq + 1;
      next.ids.reserve(static_cast<std::size_t>(next.batch * next.seq));
      bool all_done = true;
      for (std::size_t r = 0; r < members.size(); ++r) {
        const float* row = out.logits.ptr() + (static_cast<std::int64_t>(r) * batch.seq + batch.seq - 1) * vocab;
        const auto tok = argmax_row(row, vocab);
        auto src = batch.row(static_cast<std::int64_t>(r));
        next.ids.insert(next.ids.end(), src.begin(), src.end());
        next.ids.push_back(tok);
        if (!done[r]) {
          results[members[r]].push_back(tok);
          if (tok == stop_token) done[r] = true;
        }
        all_done = all_done && done[r];
      }
      batch = std::move(next);
      if (all_done) break;
    }
  }
  return results;
}

std::vector<std::int32_t> greedy_decode(const TransformerModel<float>& model, std::span<const std::int32_t> prompt,
                                        int max_new, std::int32_t stop_token) {
  std::vector<std::vector<std::int32_t>> one{{prompt.begin(), prompt.end()}};
  return greedy_decode_batch(model, one, max_new, stop_token).front();
}

namespace {

constexpr char kMagic[8] = {'K', 'D', 'C', 'K', 'P', 'T', '1', '\0'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open checkpoint '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ParsedHeader {
  nlohmann::json header;
  std::size_t payload_begin = 0;
};

ParsedHeader parse_header(const std::string& bytes, const std::filesystem::path& path) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("'" + path.string() + "' is not a KDCKPT1 checkpoint (bad magic or version)");
  }
  if (bytes.size() < sizeof(kMagic) + 4) throw TruncationError("checkpoint '" + path.string() + "' truncated in header");
  const std::uint32_t header_len = get_u32(bytes.data() + sizeof(kMagic));
  const std::size_t begin = sizeof(kMagic) + 4;
  if (bytes.size() < begin + header_len) {
    throw TruncationError("checkpoint '" + path.string() + "' truncated: header declares " +
                          std::to_string(header_len) + " bytes");
  }
  ParsedHeader parsed;
  try {
    parsed.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(begin),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(begin + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "' has a malformed header: " + e.what());
  }
  if (!parsed.header.is_object() || !parsed.header.contains("config") || !parsed.header.contains("tensors") ||
      !parsed.header["tensors"].is_array()) {
    throw FormatError("checkpoint '" + path.string() + "' header lacks config/tensors");
  }
  parsed.payload_begin = begin + header_len;
  return parsed;
}

ModelConfig config_from_header(const nlohmann::json& header, const std::filesystem::path& path) {
  try {
    return model_config_from_json(header["config"]);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint '" + path.string() + "' has an invalid config: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const TransformerModel<float>& model, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["config"] = to_json(model.config());
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  const auto params = model.named_parameters();
  for (const auto& [name, t] : params) {
    nlohmann::ordered_json rec;
    rec["name"] = name;
    rec["shape"] = t.shape();
    rec["offset"] = offset;
    rec["len"] = t.numel();
    header["tensors"].push_back(rec);
    offset += t.numel() * sizeof(float);
  }
  const std::string header_text = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  put_u32(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes += header_text;
  bytes.reserve(bytes.size() + offset);
  for (const auto& [name, t] : params) {
    for (float v : t.data()) put_f32(bytes, v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

ModelConfig peek_checkpoint_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return config_from_header(parse_header(bytes, path).header, path);
}

TransformerModel<float> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto parsed = parse_header(bytes, path);
  TransformerModel<float> model(config_from_header(parsed.header, path));
  const auto params = model.named_parameters();
  const auto& records = parsed.header["tensors"];
  if (records.size() != params.size()) {
    throw ShapeMismatchError("checkpoint '" + path.string() + "' lists " + std::to_string(records.size()) +
                             " tensors, config implies " + std::to_string(params.size()));
  }
  const std::size_t payload = bytes.size() - parsed.payload_begin;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rec = records[i];
    auto [name, t] = params[i];
    Shape shape;
    std::uint64_t offset = 0, len = 0;
    try {
      if (rec.at("name").get<std::string>() != name) {
        throw ShapeMismatchError("checkpoint tensor " + std::to_string(i) + " is '" + rec.at("name").get<std::string>() +
                                 "', expected '" + name + "'");
      }
      shape = rec.at("shape").get<Shape>();
      offset = rec.at("offset").get<std::uint64_t>();
      len = rec.at("len").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint '" + path.string() + "' tensor record " + std::to_string(i) + ": " + e.what());
    }
    if (shape != t.shape() || len != t.numel()) {
      throw ShapeMismatchError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + " (len " +
                               std::to_string(len) + "), config implies " + shape_str(t.shape()));
    }
    if (offset + len * sizeof(float) > payload) {
      throw TruncationError("checkpoint '" + path.string() + "' truncated: tensor '" + name + "' needs " +
                            std::to_string(len) + " floats at byte " + std::to_string(offset) + ", payload has " +
                            std::to_string(payload) + " bytes");
    }
    const char* src = bytes.data() + parsed.payload_begin + offset;
    auto dst = t.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = std::bit_cast<float>(get_u32(src + 4 * j));
  }
  return model;
}

template class TransformerModel<float>;
template class TransformerModel<double>;
template TransformerModel<double> TransformerModel<float>::cast<double>() const;
template TransformerModel<float> TransformerModel<double>::cast<float>() const;
template TransformerModel<float> init_model<float>(const ModelConfig&, std::uint64_t, double);
template TransformerModel<double> init_model<double>(const ModelConfig&, std::uint64_t, double);
template Tensor<float> moe_mlp(Graph<float>&, const Tensor<float>&, const BlockWeights<float>&, int);
template Tensor<double> moe_mlp(Graph<double>&, const Tensor<double>&, const BlockWeights<double>&, int);
template ForwardOutput<float> forward(Graph<float>&, const TransformerModel<float>&, const TokenBatch&, bool);
template ForwardOutput<double> forward(Graph<double>&, const TransformerModel<double>&, const TokenBatch&, bool);

}  // namespace kd
