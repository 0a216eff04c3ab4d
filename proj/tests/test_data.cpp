#include <algorithm>
#include <fstream>
#include <regex>
#include <set>

#include "doctest.h"
#include "kd/data.hpp"
#include "support.hpp"

using namespace kd;

namespace {

// Independent reference answers, parsed with regular expressions.
std::string oracle(const std::string& family, const std::string& prompt) {
  std::smatch m;
  if (family == "copy" && std::regex_match(prompt, m, std::regex("copy: ([a-z]+)"))) return m[1];
  if (family == "reverse" && std::regex_match(prompt, m, std::regex("reverse: ([a-z]+)"))) {
    std::string s = m[1];
    return {s.rbegin(), s.rend()};
  }
  if (family == "sort" && std::regex_match(prompt, m, std::regex("sort: ([a-z]+)"))) {
    std::multiset<char> chars;
    for (char c : std::string(m[1])) chars.insert(c);
    return {chars.begin(), chars.end()};
  }
  if (family == "add" && std::regex_match(prompt, m, std::regex("add: ([0-9]+)\\+([0-9]+) mod 10"))) {
    return std::to_string((std::stoi(m[1]) + std::stoi(m[2])) % 10);
  }
  if (family == "balance" && std::regex_match(prompt, m, std::regex("balance: ([()]+)"))) {
    int depth = 0;
    for (char c : std::string(m[1])) {
      depth += c == '(' ? 1 : -1;
      if (depth < 0) return "no";
    }
    return depth == 0 ? "yes" : "no";
  }
  if (family == "lookup" && std::regex_match(prompt, m, std::regex("lookup: (.*) \\? ([a-z]+)"))) {
    const std::string key = m[2];
    const std::string body = m[1];
    std::smatch kv;
    if (std::regex_search(body, kv, std::regex("(^|;)" + key + "=([a-z]+)"))) return kv[2];
  }
  if (family == "extract" && std::regex_search(prompt, m, std::regex("sku-([a-z0-9]{4})"))) return m[1];
  if (family == "price_sum" &&
      std::regex_match(prompt, m, std::regex("price_sum: [a-z]+=([0-9]);[a-z]+=([0-9])"))) {
    return std::to_string(std::stoi(m[1]) + std::stoi(m[2]));
  }
  return "<unparsed>";
}

std::vector<std::string> all_families() {
  auto f = general_families();
  for (const auto& d : domain_families()) f.push_back(d);
  return f;
}

Sample sample_of_length(std::size_t total, bool domain = false) {
  // BOS prompt SEP response(EOS) = total tokens.
  const std::size_t prompt_len = (total - 3) / 2;
  const std::size_t response_len = total - 3 - prompt_len;
  return make_sample(std::string(prompt_len, 'p'), std::string(response_len, 'r'), domain, domain ? "lookup" : "copy");
}

void check_row_invariants(const PackedRow& row, int seq_len) {
  CHECK(static_cast<int>(row.tokens.size()) == seq_len);
  CHECK(row.loss_mask.size() == row.tokens.size());
  CHECK(row.row_mask.size() == row.tokens.size());
  int covered = 0;
  int prev_end = 0;
  for (auto [s, e] : row.boundaries) {
    CHECK(s == prev_end);
    CHECK(e > s);
    prev_end = e;
    covered += e - s;
    CHECK(row.tokens[static_cast<std::size_t>(s)] == tok::BOS);
    CHECK(row.tokens[static_cast<std::size_t>(e - 1)] == tok::EOS);
  }
  for (std::size_t i = 0; i < row.tokens.size(); ++i) {
    CHECK(row.loss_mask[i] <= row.row_mask[i]);
    const bool real = static_cast<int>(i) < covered;
    CHECK(row.row_mask[i] == (real ? 1 : 0));
    if (!real) CHECK(row.tokens[i] == tok::PAD);
  }
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("tokenizer round trip and boundaries") {
    CHECK(detokenize(tokenize("abc")) == "abc");
    CHECK(tokenize("").empty());
    CHECK(tokenize("hello, world") == tokenize("hello, world"));
    std::string printable;
    for (int c = 32; c <= 126; ++c) printable.push_back(static_cast<char>(c));
    const auto ids = tokenize(printable);
    CHECK(ids.size() == 95);
    CHECK(ids.front() == tok::kFirstChar);
    CHECK(ids.back() == tok::kVocabSize - 1);
    CHECK(detokenize(ids) == printable);
    CHECK(tok::kVocabSize == 99);
  }

  TEST_CASE("tokenizer errors") {
    CHECK_THROWS_WITH_AS(tokenize("ab\ncd"), doctest::Contains("2"), EncodingError);
    CHECK_THROWS_AS(tokenize("caf\xc3\xa9"), EncodingError);
    const std::vector<std::int32_t> bad = {5, 99};
    CHECK_THROWS_AS(detokenize(bad), VocabularyError);
    const std::vector<std::int32_t> specials = {tok::BOS, 4 + ('a' - 32), tok::SEP, tok::EOS, tok::PAD};
    CHECK(detokenize(specials) == "a");
  }

  TEST_CASE("family examples") {
    CHECK(solve("copy", "copy: qrs") == "qrs");
    CHECK(solve("add", "add: 7+8 mod 10") == "5");
    CHECK(oracle("add", "add: 7+8 mod 10") == "5");
    CHECK(solve("reverse", "reverse: abc") == "cba");
    CHECK(solve("sort", "sort: dcab") == "abcd");
    CHECK(solve("balance", "balance: (()())") == "yes");
    CHECK(solve("balance", "balance: ())(") == "no");
    CHECK(solve("lookup", "lookup: size=m;color=red;ship=fast ? color") == "red");
    CHECK(solve("extract", "extract sku: ref 3 sku-ab12 ok") == "ab12");
    CHECK(solve("price_sum", "price_sum: hat=4;mug=9") == "13");
    CHECK_THROWS_AS(solve("poetry", "poetry: x"), ConfigError);
    CHECK_THROWS_AS(generate_corpus({{"poetry"}, 3, 1, 0.0}), ConfigError);
    CHECK(is_domain_family("lookup"));
    CHECK_FALSE(is_domain_family("copy"));
  }

  TEST_CASE("sample invariants") {
    const auto s = make_sample("copy: ab", "ab", false, "copy");
    CHECK(s.response.back() == tok::EOS);
    CHECK(s.prompt_text() == "copy: ab");
    CHECK(s.response_text() == "ab");
    CHECK(s.packed_length() == 8 + 3 + 2);
  }

  TEST_CASE("every uncorrupted sample is solved by an independent oracle") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      for (Split split : {Split::train, Split::eval}) {
        const auto corpus = generate_corpus({all_families(), 400, seed, 0.0, split});
        REQUIRE(corpus.size() == 400);
        for (const auto& s : corpus) {
          INFO(s.family << ": " << s.prompt_text());
          CHECK_FALSE(s.corrupted);
          CHECK(s.domain == is_domain_family(s.family));
          CHECK_FALSE(s.prompt.empty());
          CHECK(s.response.size() >= 2);
          CHECK(s.response.back() == tok::EOS);
          CHECK(s.response_text() == oracle(s.family, s.prompt_text()));
          CHECK(prompt_in_split(s.prompt_text(), split));
        }
      }
    }
  }

  TEST_CASE("families are assigned round-robin") {
    const auto corpus = generate_corpus({{"copy", "add", "lookup"}, 9, 4, 0.0});
    for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(corpus[i].family == std::vector<std::string>{"copy", "add", "lookup"}[i % 3]);
  }

  TEST_CASE("generation is deterministic and seed-sensitive") {
    const CorpusSpec spec{general_families(), 200, 17, 0.2};
    CHECK(generate_corpus(spec) == generate_corpus(spec));
    auto other = spec;
    other.seed = 18;
    CHECK_FALSE(generate_corpus(spec) == generate_corpus(other));
  }

  TEST_CASE("noise rate 0.2 over 10000 samples corrupts 0.2 +- 0.02") {
    const auto corpus = generate_corpus({general_families(), 10000, 5, 0.2});
    std::size_t corrupted = 0;
    for (const auto& s : corpus) {
      if (!s.corrupted) continue;
      ++corrupted;
      // Same length as the clean answer.
      CHECK(s.response_text().size() == oracle(s.family, s.prompt_text()).size());
    }
    const double frac = static_cast<double>(corrupted) / 10000.0;
    CHECK(std::abs(frac - 0.2) <= 0.02);
    CHECK_THROWS_AS(generate_corpus({general_families(), 10, 5, 1.0}), ConfigError);
    CHECK_THROWS_AS(generate_corpus({general_families(), 10, 5, -0.1}), ConfigError);
  }

  TEST_CASE("train and eval prompts are disjoint") {
    const auto train = generate_corpus({all_families(), 5000, 7, 0.0, Split::train});
    const auto eval = generate_corpus({all_families(), 800, 1007, 0.0, Split::eval});
    std::set<std::string> seen;
    for (const auto& s : train) seen.insert(s.prompt_text());
    std::size_t overlap = 0;
    for (const auto& s : eval) overlap += seen.count(s.prompt_text());
    CHECK(overlap == 0);
  }

  TEST_CASE("packing examples") {
    SUBCASE("lengths 60 and 50 share one row with 18 pad") {
      const auto rows = pack({sample_of_length(60), sample_of_length(50)}, {128, 0, false});
      REQUIRE(rows.size() == 1);
      CHECK(rows[0].boundaries == std::vector<std::pair<int, int>>{{0, 60}, {60, 110}});
      CHECK(std::count(rows[0].tokens.begin(), rows[0].tokens.end(), tok::PAD) == 18);
      check_row_invariants(rows[0], 128);
    }
    SUBCASE("a sample of exactly T fills a row") {
      const auto rows = pack({sample_of_length(128)}, {128, 0, false});
      REQUIRE(rows.size() == 1);
      CHECK(rows[0].boundaries == std::vector<std::pair<int, int>>{{0, 128}});
      CHECK(padding_fraction(rows) == 0.0);
    }
    SUBCASE("oversize samples are rejected by name") {
      auto s = sample_of_length(129);
      CHECK_THROWS_WITH_AS(pack({sample_of_length(10), s}, {128, 0, false}), doctest::Contains("sample 1"),
                           PackingError);
    }
    SUBCASE("domain and general samples never share a row") {
      std::vector<Sample> mixed;
      for (int i = 0; i < 40; ++i) mixed.push_back(sample_of_length(20 + i % 7, i % 3 == 0));
      const auto rows = pack(mixed, {128, 3, false});
      std::size_t domain_rows = 0;
      for (const auto& r : rows) domain_rows += r.domain;
      CHECK(domain_rows > 0);
      CHECK(domain_rows < rows.size());
    }
    SUBCASE("one sample per row") {
      const auto rows = pack({sample_of_length(60), sample_of_length(50)}, {128, 0, true});
      CHECK(rows.size() == 2);
    }
  }

  TEST_CASE("loss mask covers response tokens including EOS") {
    const auto s = make_sample("copy: ab", "ab", false, "copy");
    const auto rows = pack({s}, {32, 0, false});
    REQUIRE(rows.size() == 1);
    const auto& r = rows[0];
    // BOS c o p y : _ a b SEP a b EOS
    const std::size_t start = 1 + s.prompt.size() + 1;
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      const bool resp = i >= start && i < start + s.response.size();
      CHECK(r.loss_mask[i] == (resp ? 1 : 0));
    }
    CHECK(r.tokens[start - 1] == tok::SEP);
  }

  TEST_CASE("packed rows satisfy their invariants on random corpora") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto corpus = generate_corpus({all_families(), 300, seed, 0.1});
      const int seq = 80 + static_cast<int>(seed % 4) * 16;
      const auto rows = pack(corpus, {seq, seed, seed % 5 == 0});
      std::size_t samples = 0;
      for (const auto& r : rows) {
        check_row_invariants(r, seq);
        samples += r.boundaries.size();
      }
      CHECK(samples == corpus.size());
      const auto batch = make_batch(std::span<const PackedRow>(rows).subspan(0, std::min<std::size_t>(4, rows.size())));
      CHECK(batch.tokens.seq == seq);
      CHECK(batch.domain_flags.size() == static_cast<std::size_t>(batch.tokens.batch));
      for (std::size_t i = 0; i < batch.loss_mask.values.size(); ++i)
        CHECK(batch.loss_mask.values[i] <= batch.row_mask.values[i]);
    }
  }

  TEST_CASE("packing is deterministic and the seed only permutes rows") {
    const auto corpus = generate_corpus({general_families(), 200, 2, 0.0});
    const auto a = pack(corpus, {128, 1, false});
    const auto b = pack(corpus, {128, 1, false});
    const auto c = pack(corpus, {128, 2, false});
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
    auto key = [](const std::vector<PackedRow>& rows) {
      std::multiset<std::vector<std::int32_t>> s;
      for (const auto& r : rows) s.insert(r.tokens);
      return s;
    };
    CHECK(key(a) == key(c));
  }

  TEST_CASE("domain mix reaches 10% of tokens within 2%") {
    const auto general = generate_corpus({general_families(), 4000, 1, 0.0});
    const auto domain = generate_corpus({domain_families(), 600, 2, 0.0});
    const auto mixed = mix_domain(general, domain, 0.1, 3);
    const double f = domain_token_fraction(mixed);
    CHECK(std::abs(f - 0.1) <= 0.02);
    // Independent recount.
    std::size_t dom = 0, all = 0;
    for (const auto& s : mixed) {
      all += s.packed_length();
      if (s.domain) dom += s.packed_length();
    }
    CHECK(std::abs(static_cast<double>(dom) / all - f) < 1e-12);
    CHECK(mixed.size() > general.size());
    // Per epoch, after packing.
    const auto rows = pack(mixed, {128, 4, false});
    std::size_t dom_tokens = 0, real_tokens = 0;
    for (const auto& r : rows) {
      const auto n = static_cast<std::size_t>(std::count(r.row_mask.begin(), r.row_mask.end(), 1));
      real_tokens += n;
      if (r.domain) dom_tokens += n;
    }
    CHECK(std::abs(static_cast<double>(dom_tokens) / real_tokens - 0.1) <= 0.02);
  }

  TEST_CASE("corpus files round-trip") {
    test::TempDir dir("corpus");
    const auto corpus = generate_corpus({all_families(), 1000, 9, 0.2});
    write_corpus(dir / "c.jsonl", corpus);
    CHECK(read_corpus(dir / "c.jsonl") == corpus);
    write_corpus(dir / "d.jsonl", corpus);
    CHECK(test::read_file(dir / "c.jsonl") == test::read_file(dir / "d.jsonl"));
    const std::string first_line = test::read_file(dir / "c.jsonl").substr(0, test::read_file(dir / "c.jsonl").find('\n'));
    CHECK(first_line.find("\"prompt\"") == 1);
  }

  TEST_CASE("corpus read errors") {
    test::TempDir dir("corpus_bad");
    {
      std::ofstream(dir / "empty.jsonl");
    }
    CHECK(read_corpus(dir / "empty.jsonl").empty());
    CHECK_THROWS_AS(read_corpus(dir / "missing.jsonl"), FileNotFoundError);
    {
      std::ofstream out(dir / "bad.jsonl");
      out << R"({"prompt":"copy: ab","response":"ab","domain":false,"family":"copy","corrupted":false})" << "\n";
      out << R"({"prompt":"copy: cd","domain":false,"family":"copy","corrupted":false})" << "\n";
    }
    CHECK_THROWS_WITH_AS(read_corpus(dir / "bad.jsonl"), doctest::Contains(":2:"), ParseError);
    {
      std::ofstream out(dir / "garbage.jsonl");
      out << "{not json\n";
    }
    CHECK_THROWS_WITH_AS(read_corpus(dir / "garbage.jsonl"), doctest::Contains(":1:"), ParseError);
  }
}
