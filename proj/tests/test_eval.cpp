#include "doctest.h"
#include "kd/errors.hpp"
#include "kd/eval.hpp"
#include "support.hpp"

using namespace kd;

namespace {

std::vector<Sample> copy_suite() {
  return generate_corpus({{"copy", "reverse", "balance", "lookup"}, 40, 3, 0.0, Split::eval});
}

// An "echo" system that returns the prompt text after the family prefix.
std::vector<std::vector<std::int32_t>> echo_outputs(const std::vector<Sample>& suite) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& s : suite) {
    const auto text = s.prompt_text();
    auto ids = tokenize(text.substr(text.find(": ") + 2));
    ids.push_back(tok::EOS);
    out.push_back(ids);
  }
  return out;
}

EvalReport report_with(double general, const std::string& digest = "d") {
  EvalReport r;
  r.general_score = general;
  r.suite_digest = digest;
  return r;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("an echo system solves copy and nothing that needs work") {
    const auto suite = copy_suite();
    const auto r = score_outputs(suite, echo_outputs(suite));
    CHECK(r.families.at("copy").accuracy == 1.0);
    CHECK(r.families.at("copy").n_items == 10);
    CHECK(r.families.at("lookup").accuracy == 0.0);
    CHECK(r.families.at("balance").accuracy == 0.0);
    // Palindromes are the only reverse items an echo gets right.
    std::int64_t palindromes = 0;
    for (const auto& s : suite) {
      if (s.family != "reverse") continue;
      const auto t = s.response_text();
      palindromes += std::equal(t.begin(), t.end(), t.rbegin());
    }
    CHECK(r.families.at("reverse").correct == palindromes);
  }

  TEST_CASE("scores are the mean family accuracy times ten") {
    const auto suite = copy_suite();
    auto outputs = echo_outputs(suite);
    // Make every balance item right as well.
    for (std::size_t i = 0; i < suite.size(); ++i) {
      if (suite[i].family == "balance") outputs[i] = suite[i].response;
    }
    const auto r = score_outputs(suite, outputs);
    double g = 0.0;
    int n = 0;
    for (const auto& [fam, res] : r.families) {
      CHECK(res.accuracy == doctest::Approx(double(res.correct) / double(res.n_items)));
      if (!is_domain_family(fam)) {
        g += res.accuracy;
        ++n;
      }
    }
    CHECK(*r.general_score == doctest::Approx(10.0 * g / n));
    CHECK(*r.domain_score == doctest::Approx(10.0 * r.families.at("lookup").accuracy));
    CHECK(r.suite_digest == suite_digest(suite));
  }

  TEST_CASE("exact match ignores only the trailing EOS") {
    const std::vector<Sample> suite = {make_sample("copy: ab", "ab", false, "copy")};
    CHECK(score_outputs(suite, {tokenize("ab")}).families.at("copy").correct == 1);
    CHECK(score_outputs(suite, {{tokenize("ab")[0], tokenize("ab")[1], tok::EOS}}).families.at("copy").correct == 1);
    CHECK(score_outputs(suite, {tokenize("ab ")}).families.at("copy").correct == 0);
    CHECK(score_outputs(suite, {tokenize("a")}).families.at("copy").correct == 0);
    CHECK_THROWS_AS(score_outputs(suite, {}), DimensionError);
    CHECK_FALSE(score_outputs(suite, {tokenize("ab")}).domain_score.has_value());
  }

  TEST_CASE("suite digest is order sensitive") {
    auto suite = copy_suite();
    const auto d = suite_digest(suite);
    CHECK(d == suite_digest(copy_suite()));
    std::swap(suite[0], suite[1]);
    CHECK(d != suite_digest(suite));
  }

  TEST_CASE("a random model scores near chance and evaluation does not touch it") {
    const auto suite = generate_corpus({general_families(), 100, 4, 0.0, Split::eval});
    const auto model = init_model<float>(test::char_config(2, 2, 16, 32, 64), 9);
    const auto before = model.checksum();
    const auto r = evaluate(model, suite, {8, "rand", 4});
    CHECK(model.checksum() == before);
    CHECK(*r.general_score < 1.5);
    CHECK(r.perplexity > 1.0);
    CHECK(std::isfinite(r.perplexity));
    CHECK(r.checkpoint_id == "rand");
    CHECK(r.seed == 4);
    const auto again = evaluate(model, suite, {8, "rand", 4});
    CHECK(to_json(again) == to_json(r));
  }

  TEST_CASE("chance accuracy") {
    CHECK(chance_accuracy("add") == doctest::Approx(0.1));
    CHECK(chance_accuracy("balance") == doctest::Approx(0.5));
    CHECK(chance_accuracy("copy") == 0.0);
  }

  TEST_CASE("report json round trip") {
    const auto suite = copy_suite();
    auto r = score_outputs(suite, echo_outputs(suite));
    r.perplexity = 3.5;
    r.checkpoint_id = "x.ckpt";
    const auto back = eval_report_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));
  }

  TEST_CASE("mean and population standard deviation across seeds") {
    const auto c = compare_runs({{"a", {report_with(6), report_with(7), report_with(8)}},
                                 {"b", {report_with(5), report_with(5), report_with(5)}}});
    CHECK(c.conditions.at("a").general_mean == doctest::Approx(7.0));
    CHECK(c.conditions.at("a").general_std == doctest::Approx(0.8165).epsilon(1e-4));
    CHECK(c.conditions.at("b").general_std == 0.0);
    CHECK(c.pairs.size() == 2);
    for (const auto& p : c.pairs) {
      if (p.a == "a") {
        CHECK(p.general_diff == doctest::Approx(2.0));
        CHECK(p.a_ge_b);
      } else {
        CHECK_FALSE(p.a_ge_b);
      }
    }
    CHECK(mean_std({1.0, 3.0}).std == doctest::Approx(1.0));
  }

  TEST_CASE("comparison errors") {
    CHECK_THROWS_AS(compare_runs({{"a", {report_with(6, "x"), report_with(7, "y"), report_with(8, "x")}}}),
                    ComparabilityError);
    CHECK_THROWS_AS(compare_runs({{"a", {report_with(6), report_with(7)}}}), ConfigError);
    CHECK_NOTHROW(compare_runs({{"a", {report_with(6), report_with(7)}}}, 2));
  }
}
