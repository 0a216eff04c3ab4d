#include "kd/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "kd/errors.hpp"

namespace kd {
namespace {

using Rng = std::mt19937_64;

int uniform(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <class C>
const auto& pick(Rng& rng, const C& options) {
  return options[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(std::size(options)) - 1))];
}

std::string random_string(Rng& rng, std::string_view alphabet, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(pick(rng, alphabet));
  return s;
}

constexpr std::string_view kLower = "abcdefghijklmnopqrstuvwxyz";
constexpr std::string_view kLowerDigits = "abcdefghijklmnopqrstuvwxyz0123456789";

bool balanced(std::string_view s) {
  int depth = 0;
  for (char c : s) {
    depth += c == '(' ? 1 : -1;
    if (depth < 0) return false;
  }
  return depth == 0;
}

// Random walk that never dips below zero and closes every paren.
std::string random_balanced(Rng& rng, int len) {
  std::string s;
  int open = 0;
  for (int i = 0; i < len; ++i) {
    const int left = len - i;
    if (open == left) {
      s.push_back(')');
      --open;
    } else if (open == 0 || uniform(rng, 0, 1) == 0) {
      s.push_back('(');
      ++open;
    } else {
      s.push_back(')');
      --open;
    }
  }
  return s;
}

struct Attribute {
  const char* key;
  std::vector<const char*> values;
};

const std::vector<Attribute>& catalog_attributes() {
  static const std::vector<Attribute> attrs = {
      {"color", {"red", "blue", "green", "black", "white"}},
      {"size", {"xs", "s", "m", "l", "xl"}},
      {"brand", {"acme", "zenit", "nova", "orbit", "pixel"}},
      {"stock", {"yes", "no"}},
      {"ship", {"fast", "slow", "free"}},
  };
  return attrs;
}

constexpr std::array<const char*, 8> kItems = {"hat", "cap", "mug", "pen", "bag", "cup", "fan", "lamp"};
constexpr std::array<const char*, 3> kSkuTemplates = {"order {n} of sku-{c} today", "sku-{c} ships in {n} days",
                                                      "ref {n} sku-{c} ok"};

std::string fill(std::string text, const std::string& n, const std::string& code) {
  text.replace(text.find("{n}"), 3, n);
  text.replace(text.find("{c}"), 3, code);
  return text;
}

std::string make_prompt(const std::string& family, Rng& rng) {
  if (family == "copy" || family == "reverse" || family == "sort") {
    return family + ": " + random_string(rng, kLower, uniform(rng, 3, 6));
  }
  if (family == "add") {
    return "add: " + std::to_string(uniform(rng, 0, 99)) + "+" + std::to_string(uniform(rng, 0, 99)) + " mod 10";
  }
  if (family == "balance") {
    const int len = 2 * uniform(rng, 1, 5);
    std::string s;
    if (uniform(rng, 0, 1) == 0) {
      s = random_balanced(rng, len);
    } else {
      do s = random_string(rng, "()", len);
      while (balanced(s));
    }
    return "balance: " + s;
  }
  if (family == "lookup") {
    const auto& attrs = catalog_attributes();
    std::vector<std::size_t> idx(attrs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::string text = "lookup: ";
    for (int i = 0; i < 3; ++i) {
      const auto& a = attrs[idx[static_cast<std::size_t>(i)]];
      if (i) text += ";";
      text += std::string(a.key) + "=" + pick(rng, a.values);
    }
    return text + " ? " + attrs[idx[static_cast<std::size_t>(uniform(rng, 0, 2))]].key;
  }
  if (family == "extract") {
    return "extract sku: " + fill(pick(rng, kSkuTemplates), std::to_string(uniform(rng, 1, 9)),
                                  random_string(rng, kLowerDigits, 4));
  }
  if (family == "price_sum") {
    const int a = uniform(rng, 0, static_cast<int>(kItems.size()) - 1);
    int b = uniform(rng, 0, static_cast<int>(kItems.size()) - 2);
    if (b >= a) ++b;
    return std::string("price_sum: ") + kItems[static_cast<std::size_t>(a)] + "=" + std::to_string(uniform(rng, 1, 9)) +
           ";" + kItems[static_cast<std::size_t>(b)] + "=" + std::to_string(uniform(rng, 1, 9));
  }
  throw ConfigError("unknown family '" + family + "'");
}

std::string after(const std::string& prompt, std::string_view prefix) {
  if (prompt.rfind(prefix, 0) != 0) throw ConfigError("prompt '" + prompt + "' does not start with '" + std::string(prefix) + "'");
  return prompt.substr(prefix.size());
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 32 || c > 126) {
      throw EncodingError("character code " + std::to_string(c) + " at offset " + std::to_string(i) +
                          " is outside the printable alphabet");
    }
    ids.push_back(tok::kFirstChar + (c - 32));
  }
  return ids;
}

std::string detokenize(std::span<const std::int32_t> tokens) {
  std::string text;
  for (auto id : tokens) {
    if (id < 0 || id >= tok::kVocabSize) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    if (id >= tok::kFirstChar) text.push_back(static_cast<char>(32 + id - tok::kFirstChar));
  }
  return text;
}

std::string Sample::prompt_text() const { return detokenize(prompt); }

std::string Sample::response_text() const { return detokenize(response); }

Sample make_sample(std::string_view prompt, std::string_view response, bool domain, std::string family,
                   bool corrupted) {
  Sample s;
  s.prompt = tokenize(prompt);
  s.response = tokenize(response);
  s.response.push_back(tok::EOS);
  if (s.prompt.empty()) throw ParseError("sample prompt is empty");
  if (s.response.size() < 2) throw ParseError("sample response is empty");
  s.domain = domain;
  s.family = std::move(family);
  s.corrupted = corrupted;
  return s;
}

const std::vector<std::string>& general_families() {
  static const std::vector<std::string> f = {"copy", "reverse", "sort", "add", "balance"};
  return f;
}

const std::vector<std::string>& domain_families() {
  static const std::vector<std::string> f = {"lookup", "extract", "price_sum"};
  return f;
}

bool is_domain_family(const std::string& family) {
  const auto& d = domain_families();
  if (std::find(d.begin(), d.end(), family) != d.end()) return true;
  const auto& g = general_families();
  if (std::find(g.begin(), g.end(), family) != g.end()) return false;
  throw ConfigError("unknown family '" + family + "'");
}

std::string solve(const std::string& family, const std::string& prompt) {
  if (family == "copy") return after(prompt, "copy: ");
  if (family == "reverse") {
    auto s = after(prompt, "reverse: ");
    std::reverse(s.begin(), s.end());
    return s;
  }
  if (family == "sort") {
    auto s = after(prompt, "sort: ");
    std::sort(s.begin(), s.end());
    return s;
  }
  if (family == "add") {
    int a = 0, b = 0;
    std::istringstream in(after(prompt, "add: "));
    char plus = 0;
    in >> a >> plus >> b;
    return std::to_string((a + b) % 10);
  }
  if (family == "balance") return balanced(after(prompt, "balance: ")) ? "yes" : "no";
  if (family == "lookup") {
    const auto body = after(prompt, "lookup: ");
    const auto q = body.find(" ? ");
    const auto key = body.substr(q + 3);
    std::istringstream pairs(body.substr(0, q));
    std::string kv;
    while (std::getline(pairs, kv, ';')) {
      const auto eq = kv.find('=');
      if (kv.substr(0, eq) == key) return kv.substr(eq + 1);
    }
    throw ConfigError("lookup prompt without queried key: " + prompt);
  }
  if (family == "extract") {
    const auto at = prompt.find("sku-");
    if (at == std::string::npos) throw ConfigError("extract prompt without sku: " + prompt);
    return prompt.substr(at + 4, 4);
  }
  if (family == "price_sum") {
    int total = 0;
    std::size_t pos = 0;
    while ((pos = prompt.find('=', pos)) != std::string::npos) total += prompt[++pos] - '0';
    return std::to_string(total);
  }
  throw ConfigError("unknown family '" + family + "'");
}

int answer_space(const std::string& family) {
  if (family == "add") return 10;
  if (family == "balance") return 2;
  return 0;
}

bool prompt_in_split(std::string_view prompt, Split split) {
  const bool eval = fnv1a(prompt) % 10 == 0;
  return eval == (split == Split::eval);
}

std::vector<Sample> generate_corpus(const CorpusSpec& spec) {
  if (!(spec.noise_rate >= 0.0 && spec.noise_rate < 1.0)) throw ConfigError("noise_rate must be in [0, 1)");
  if (spec.families.empty()) throw ConfigError("families must not be empty");
  if (spec.n_samples < 0) throw ConfigError("n_samples must be non-negative");
  for (const auto& f : spec.families) is_domain_family(f);

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    const auto& family = spec.families[static_cast<std::size_t>(i) % spec.families.size()];
    std::string prompt;
    do prompt = make_prompt(family, rng);
    while (!prompt_in_split(prompt, spec.split));
    std::string response = solve(family, prompt);
    const bool corrupt = coin(rng) < spec.noise_rate;
    if (corrupt) response = random_string(rng, kLowerDigits, static_cast<int>(response.size()));
    out.push_back(make_sample(prompt, response, is_domain_family(family), family, corrupt));
  }
  return out;
}

std::vector<PackedRow> pack(const std::vector<Sample>& samples, const PackOptions& options) {
  const int T = options.seq_len;
  if (T < 4) throw ConfigError("seq_len must be at least 4");
  std::vector<PackedRow> rows;
  std::vector<int> used;
  // Open rows per domain flag that may still take a sample.
  std::array<std::vector<std::size_t>, 2> open;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const int len = static_cast<int>(s.packed_length());
    if (len > T) {
      throw PackingError("sample " + std::to_string(i) + " (" + s.family + ": '" + s.prompt_text() + "') has " +
                         std::to_string(len) + " tokens, more than seq_len " + std::to_string(T));
    }
    auto& candidates = open[s.domain ? 1 : 0];
    std::size_t row = rows.size();
    if (!options.one_per_row) {
      for (auto r : candidates) {
        if (T - used[r] >= len) {
          row = r;
          break;
        }
      }
    }
    if (row == rows.size()) {
      PackedRow fresh;
      fresh.tokens.assign(static_cast<std::size_t>(T), tok::PAD);
      fresh.loss_mask.assign(static_cast<std::size_t>(T), 0);
      fresh.row_mask.assign(static_cast<std::size_t>(T), 0);
      fresh.domain = s.domain;
      rows.push_back(std::move(fresh));
      used.push_back(0);
      if (!options.one_per_row) candidates.push_back(row);
    }
    auto& r = rows[row];
    int pos = used[row];
    const int start = pos;
    auto put = [&](std::int32_t id, bool response) {
      r.tokens[static_cast<std::size_t>(pos)] = id;
      r.row_mask[static_cast<std::size_t>(pos)] = 1;
      r.loss_mask[static_cast<std::size_t>(pos)] = response ? 1 : 0;
      ++pos;
    };
    put(tok::BOS, false);
    for (auto id : s.prompt) put(id, false);
    put(tok::SEP, false);
    for (auto id : s.response) put(id, true);
    r.boundaries.emplace_back(start, pos);
    used[row] = pos;
    // Rows that cannot fit even a minimal sample are closed.
    if (T - pos < 6) std::erase(candidates, row);
  }
  Rng rng(options.seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  return rows;
}

PackedBatch make_batch(std::span<const PackedRow> rows) {
  if (rows.empty()) throw DimensionError("make_batch: no rows");
  const auto B = static_cast<std::int64_t>(rows.size());
  const auto T = static_cast<std::int64_t>(rows.front().tokens.size());
  PackedBatch b;
  b.tokens.batch = B;
  b.tokens.seq = T;
  b.tokens.ids.reserve(static_cast<std::size_t>(B * T));
  b.loss_mask = Mask(B, T, 0);
  b.row_mask = Mask(B, T, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (static_cast<std::int64_t>(r.tokens.size()) != T) throw DimensionError("make_batch: rows differ in length");
    b.tokens.ids.insert(b.tokens.ids.end(), r.tokens.begin(), r.tokens.end());
    const auto off = static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(T));
    std::copy(r.loss_mask.begin(), r.loss_mask.end(), b.loss_mask.values.begin() + off);
    std::copy(r.row_mask.begin(), r.row_mask.end(), b.row_mask.values.begin() + off);
    b.domain_flags.push_back(r.domain);
    b.boundaries.push_back(r.boundaries);
  }
  return b;
}

double padding_fraction(const std::vector<PackedRow>& rows) {
  std::size_t total = 0, pad = 0;
  for (const auto& r : rows) {
    total += r.row_mask.size();
    pad += static_cast<std::size_t>(std::count(r.row_mask.begin(), r.row_mask.end(), 0));
  }
  return total ? static_cast<double>(pad) / static_cast<double>(total) : 0.0;
}

std::vector<Sample> mix_domain(const std::vector<Sample>& general, const std::vector<Sample>& domain,
                               double domain_fraction, std::uint64_t seed) {
  if (!(domain_fraction >= 0.0 && domain_fraction < 1.0)) throw ConfigError("domain_fraction must be in [0, 1)");
  std::vector<Sample> out = general;
  double general_tokens = 0.0, domain_tokens = 0.0;
  for (const auto& s : general) general_tokens += static_cast<double>(s.packed_length());
  if (domain_fraction > 0.0) {
    if (domain.empty()) throw ConfigError("domain mix requested but the domain corpus is empty");
    // domain / (general + domain) >= f  <=>  domain >= f / (1 - f) * general
    const double needed = domain_fraction / (1.0 - domain_fraction) * general_tokens;
    for (std::size_t i = 0; domain_tokens < needed; ++i) {
      const auto& s = domain[i % domain.size()];
      out.push_back(s);
      domain_tokens += static_cast<double>(s.packed_length());
    }
  }
  Rng rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

double domain_token_fraction(const std::vector<Sample>& samples) {
  double total = 0.0, dom = 0.0;
  for (const auto& s : samples) {
    total += static_cast<double>(s.packed_length());
    if (s.domain) dom += static_cast<double>(s.packed_length());
  }
  return total > 0.0 ? dom / total : 0.0;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["prompt"] = s.prompt_text();
    j["response"] = s.response_text();
    j["domain"] = s.domain;
    j["family"] = s.family;
    j["corrupted"] = s.corrupted;
    out << j.dump() << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::vector<Sample> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("corpus file '" + path.string() + "' not found");
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw ParseError("expected a JSON object");
      auto field = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw ParseError(std::string("missing \"") + key + "\"");
        return j.at(key);
      };
      const auto& prompt = field("prompt");
      const auto& response = field("response");
      const auto& domain = field("domain");
      const auto& family = field("family");
      const auto& corrupted = field("corrupted");
      if (!prompt.is_string() || !response.is_string() || !family.is_string()) {
        throw ParseError("prompt, response and family must be strings");
      }
      if (!domain.is_boolean() || !corrupted.is_boolean()) throw ParseError("domain and corrupted must be booleans");
      out.push_back(make_sample(prompt.get<std::string>(), response.get<std::string>(), domain.get<bool>(),
                                family.get<std::string>(), corrupted.get<bool>()));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    } catch (const Error& e) {
      throw ParseError(where + e.what());
    }
  }
  return out;
}

}  // namespace kd
