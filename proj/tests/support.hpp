#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "kd/data.hpp"
#include "kd/model.hpp"
#include "kd/ops.hpp"
#include "kd/tensor.hpp"

namespace kd::test {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(shape, std::move(v), requires_grad);
}

inline Tensor<double> constant_like(const Tensor<double>& t, std::mt19937_64& rng) {
  return random_tensor(t.shape(), rng, -1.0, 1.0, false);
}

// Scalar readout that weights every output element differently, so a wrong
// gradient anywhere shows up.
inline Tensor<double> weighted_readout(Graph<double>& g, const Tensor<double>& y, const Tensor<double>& w) {
  return ops::dot(g, y, w);
}

inline std::vector<double> to_vector(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline ModelConfig tiny_config(int layers = 2, int heads = 2, int d_model = 8, int d_ff = 16, int vocab = 16,
                               int max_seq = 16) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_ff = d_ff;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq;
  return c;
}

// Model config that can read the character tokenizer.
inline ModelConfig char_config(int layers = 2, int heads = 2, int d_model = 16, int d_ff = 32, int max_seq = 64) {
  auto c = tiny_config(layers, heads, d_model, d_ff, tok::kVocabSize, max_seq);
  return c;
}

inline TokenBatch random_tokens(std::int64_t batch, std::int64_t seq, int vocab, std::mt19937_64& rng) {
  TokenBatch tb;
  tb.batch = batch;
  tb.seq = seq;
  std::uniform_int_distribution<int> u(0, vocab - 1);
  tb.ids.resize(static_cast<std::size_t>(batch * seq));
  for (auto& id : tb.ids) id = u(rng);
  return tb;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("kd_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);

}  // namespace kd::test
