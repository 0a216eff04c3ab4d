#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kd/grid.hpp"
#include "kd/model.hpp"

namespace kd {

// Character-level tokenizer: four specials followed by printable ASCII
// 32..126 in code-point order.
namespace tok {
inline constexpr std::int32_t PAD = 0;
inline constexpr std::int32_t BOS = 1;
inline constexpr std::int32_t EOS = 2;
inline constexpr std::int32_t SEP = 3;
inline constexpr std::int32_t kFirstChar = 4;
inline constexpr int kVocabSize = 4 + (126 - 32 + 1);
}  // namespace tok

std::vector<std::int32_t> tokenize(std::string_view text);
// Specials are rendered as nothing; ids outside the vocabulary throw
// VocabularyError.
std::string detokenize(std::span<const std::int32_t> tokens);

struct Sample {
  std::vector<std::int32_t> prompt;
  std::vector<std::int32_t> response;  // ends with EOS
  bool domain = false;
  std::string family;
  bool corrupted = false;

  std::string prompt_text() const;
  std::string response_text() const;  // without the trailing EOS
  // BOS prompt SEP response
  std::size_t packed_length() const { return prompt.size() + response.size() + 2; }

  bool operator==(const Sample&) const = default;
};

Sample make_sample(std::string_view prompt, std::string_view response, bool domain, std::string family,
                   bool corrupted = false);

const std::vector<std::string>& general_families();
const std::vector<std::string>& domain_families();
bool is_domain_family(const std::string& family);

// Reference answer of a family for a prompt; the family's rule applied
// directly to the prompt text. Throws ConfigError on unknown families.
std::string solve(const std::string& family, const std::string& prompt);

// Number of distinct answers a uniform guesser chooses from, for families
// with a small closed answer set; 0 when the answer space is open-ended.
int answer_space(const std::string& family);

// Train and eval prompts are drawn from disjoint halves of prompt space: a
// prompt belongs to the eval split iff its hash falls in one tenth of the
// hash range.
enum class Split { train, eval };
bool prompt_in_split(std::string_view prompt, Split split);

struct CorpusSpec {
  std::vector<std::string> families;
  std::int64_t n_samples = 0;
  std::uint64_t seed = 0;
  double noise_rate = 0.0;
  Split split = Split::train;
};

// Families are assigned round-robin in the given order.
std::vector<Sample> generate_corpus(const CorpusSpec& spec);

struct PackedRow {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 on response tokens (incl. EOS)
  std::vector<std::uint8_t> row_mask;   // 1 on every non-padding token
  bool domain = false;
  std::vector<std::pair<int, int>> boundaries;  // [start, end) per sample
};

struct PackOptions {
  int seq_len = 128;
  std::uint64_t seed = 0;
  bool one_per_row = false;
};

// Greedy first-fit packing within each domain group, in input order. The
// seed only permutes the order of the emitted rows.
std::vector<PackedRow> pack(const std::vector<Sample>& samples, const PackOptions& options);

struct PackedBatch {
  TokenBatch tokens;
  Mask loss_mask;
  Mask row_mask;
  std::vector<bool> domain_flags;
  std::vector<std::vector<std::pair<int, int>>> boundaries;
};

PackedBatch make_batch(std::span<const PackedRow> rows);

// Fraction of padding positions over all rows.
double padding_fraction(const std::vector<PackedRow>& rows);

// General samples plus as many domain samples (taken in order, cycling if
// needed) as make the domain token share reach `domain_fraction`. The result
// is shuffled with `seed`.
std::vector<Sample> mix_domain(const std::vector<Sample>& general, const std::vector<Sample>& domain,
                               double domain_fraction, std::uint64_t seed);

double domain_token_fraction(const std::vector<Sample>& samples);

void write_corpus(const std::filesystem::path& path, const std::vector<Sample>& samples);
std::vector<Sample> read_corpus(const std::filesystem::path& path);

}  // namespace kd
