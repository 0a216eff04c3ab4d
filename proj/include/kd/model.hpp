#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kd/tensor.hpp"

namespace kd {

inline constexpr const char* kDefaultTokenizerId = "kd-char-v1";

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 256;
  int vocab_size = 99;
  int max_seq_len = 128;
  double rope_base = 10000.0;
  double rmsnorm_eps = 1e-5;
  int n_experts = 0;  // 0 = dense MLP
  int experts_top_k = 1;
  std::string tokenizer_id = kDefaultTokenizerId;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Closed-form parameter count.
  std::int64_t param_count() const;
  int head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
// Unknown keys and type mismatches raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Throws TokenizerError unless both models share a tokenizer.
void require_same_tokenizer(const ModelConfig& a, const ModelConfig& b, const std::string& what);

template <class T>
struct ExpertWeights {
  Tensor<T> w_gate;  // [d_model, d_ff]
  Tensor<T> w_up;    // [d_model, d_ff]
  Tensor<T> w_down;  // [d_ff, d_model]
};

template <class T>
struct BlockWeights {
  Tensor<T> attn_norm;  // [d_model]
  Tensor<T> wq, wk, wv, wo;  // [d_model, d_model]
  Tensor<T> mlp_norm;  // [d_model]
  Tensor<T> router;    // [d_model, n_experts]; undefined for dense blocks
  std::vector<ExpertWeights<T>> experts;  // exactly one for dense blocks
};

template <class T>
class TransformerModel {
 public:
  // Allocates zero-filled parameters for a validated config.
  explicit TransformerModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  // Stable, name-ordered view of every parameter (handles, not copies).
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  std::int64_t param_count() const;

  void set_trainable(bool trainable);
  void zero_grad();
  // FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() const;

  TransformerModel clone() const;
  template <class U>
  TransformerModel<U> cast() const;

  Tensor<T> embed;       // [V, d_model]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> final_norm;  // [d_model]
  Tensor<T> lm_head;     // [d_model, V]

 private:
  ModelConfig config_;
};

// Deterministic init: weights ~ N(0, init_std), norm gains = 1.
template <class T>
TransformerModel<T> init_model(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

// Row-major token ids of extent [batch, seq].
struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::int64_t b, std::int64_t t) const { return ids[static_cast<std::size_t>(b * seq + t)]; }
  std::span<const std::int32_t> row(std::int64_t b) const {
    return {ids.data() + b * seq, static_cast<std::size_t>(seq)};
  }
};

// Attention probabilities of one layer: probs[b][h][t][i] is the attention
// paid to token i when producing position t. Row t has t + 1 valid entries.
template <class T>
struct AttentionTrace {
  int layer = 0;
  Tensor<T> probs;  // [batch, heads, seq, seq]

  std::int64_t heads() const { return probs.dim(1); }
  std::int64_t seq() const { return probs.dim(2); }
  std::span<const T> row(std::int64_t b, std::int64_t h, std::int64_t t) const {
    const auto s = seq();
    return {probs.ptr() + ((b * heads() + h) * s + t) * s, static_cast<std::size_t>(t + 1)};
  }
};

template <class T>
struct ForwardOutput {
  Tensor<T> logits;  // [batch, seq, V]
  std::vector<AttentionTrace<T>> traces;  // one per layer when requested
};

template <class T>
ForwardOutput<T> forward(Graph<T>& g, const TransformerModel<T>& model, const TokenBatch& tokens,
                         bool need_traces = false);

// Gated MLP of one block; dense blocks use their single expert, MoE blocks
// route each row through the top-k experts with renormalized gate weights.
template <class T>
Tensor<T> moe_mlp(Graph<T>& g, const Tensor<T>& x, const BlockWeights<T>& block, int top_k);

// Greedy continuation of `prompt`. Each token is the argmax of the last
// position's logits (lowest id on ties). Stops after emitting stop_token
// (which is included) or after max_new tokens, or when the context is full.
std::vector<std::int32_t> greedy_decode(const TransformerModel<float>& model, std::span<const std::int32_t> prompt,
                                        int max_new, std::int32_t stop_token);
// Same result as calling greedy_decode per prompt; prompts of equal length
// are decoded together.
std::vector<std::vector<std::int32_t>> greedy_decode_batch(const TransformerModel<float>& model,
                                                           const std::vector<std::vector<std::int32_t>>& prompts,
                                                           int max_new, std::int32_t stop_token);

// Binary checkpoint: "KDCKPT1\0", u32 little-endian header length, JSON
// header {config, tensors:[{name, shape, offset, len}]}, then float32
// little-endian payloads in header order. offset is in bytes from the start
// of the payload section, len in elements.
void save_checkpoint(const TransformerModel<float>& model, const std::filesystem::path& path);
TransformerModel<float> load_checkpoint(const std::filesystem::path& path);
// Reads only the config from a checkpoint header.
ModelConfig peek_checkpoint_config(const std::filesystem::path& path);

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;

}  // namespace kd
