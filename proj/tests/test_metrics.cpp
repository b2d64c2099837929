#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitlm/metrics.hpp"
#include "test_oracles.hpp"

#include <cmath>

using namespace exitlm;
namespace oracle = exitlm::testing;

namespace {

WordSeq words(const std::string& text) { return split_words(text); }

// Shared by the unit suite and the acceptance runner.
std::vector<std::pair<WordSeq, WordSeq>> hand_cases() {
  return {
      {words("the cat is on the mat"), words("the cat sat on the mat")},
      {words("a b c d"), words("a c d")},
      {words("a b c"), words("a b c d")},
      {words("return x + y"), words("return x + y")},
      {words("if a > b : return a"), words("if a > b : return b")},
      {words("for i in range ( n )"), words("for j in range ( n )")},
      {words("def f ( x ) : pass"), words("def g ( x , y ) : pass")},
      {words("x = 1"), words("y = 2")},
      {words("one two three four five six"), words("one two three four")},
      {words("alpha beta"), words("alpha beta gamma delta epsilon")},
      {words("total = total + item"), words("total = total + 1")},
      {words("print ( value )"), words("print ( value )")},
      {words("a a a a"), words("a a")},
      {words("a b a b a b"), words("b a b a")},
      {words("import os"), words("import sys")},
      {words("self . items . append ( item )"), words("self . items . append ( x )")},
      {words("while True : break"), words("while True : continue")},
      {words("raise ValueError ( msg )"), words("raise KeyError ( msg )")},
      {words("z z z y"), words("q r s t u v w")},
      {words("table [ key ] = 0"), words("table [ key ] = value")},
  };
}

}  // namespace

TEST_CASE("split_words groups identifier runs and isolates punctuation") {
  WordSeq w = split_words("def get_total(items):\n  return a+b");
  WordSeq expect = {"def", "get_total", "(", "items", ")", ":", "return", "a", "+", "b"};
  CHECK(w == expect);
}

TEST_CASE("rouge_l on the documented cases") {
  CHECK(rouge_l(words("a b c"), words("a b c")) == doctest::Approx(1.0));
  CHECK(rouge_l(words("x y z"), words("a b c")) == doctest::Approx(0.0));
  CHECK(rouge_l(words("a b c d"), words("a c d")) == doctest::Approx(6.0 / 7.0));
  CHECK(rouge_l({}, words("a")) == 0.0);
  CHECK_THROWS_AS(rouge_l(words("a"), {}), Error);
}

TEST_CASE("rouge_l matches the independent oracle on hand cases") {
  for (const auto& [cand, ref] : hand_cases()) {
    CHECK(rouge_l(cand, ref) ==
          doctest::Approx(oracle::oracle_rouge_l(cand, ref)).epsilon(1e-9));
  }
}

TEST_CASE("bleu basics") {
  CHECK(bleu(words("a b c d e"), words("a b c d e")) == doctest::Approx(1.0));
  CHECK(bleu(words("x y z"), words("a b c")) == doctest::Approx(0.0));
  CHECK(bleu(WordSeq{}, words("a b")) == 0.0);

  // Hand-evaluated: precisions 5/6, 3/5, 1/4, then smoothed 1/4; BP = 1.
  const double expect =
      std::pow((5.0 / 6.0) * (3.0 / 5.0) * (1.0 / 4.0) * (1.0 / 4.0), 0.25);
  CHECK(bleu(words("the cat is on the mat"), words("the cat sat on the mat")) ==
        doctest::Approx(expect).epsilon(1e-12));

  // Short candidate: all used orders perfect, brevity penalty exp(1 - 4/3).
  CHECK(bleu(words("a b c"), words("a b c d")) ==
        doctest::Approx(std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("bleu matches the independent oracle on hand cases") {
  for (const auto& [cand, ref] : hand_cases()) {
    CHECK(bleu(cand, ref) ==
          doctest::Approx(oracle::oracle_bleu(cand, ref)).epsilon(1e-6));
  }
}

TEST_CASE("codebleu_lite") {
  auto kw = python_keywords();
  SUBCASE("identical scores 1") {
    CHECK(codebleu_lite(words("if x : return y"), words("if x : return y"), kw) ==
          doctest::Approx(1.0));
  }
  SUBCASE("keyword weight 1 equals plain bleu exactly") {
    WordSeq cand = words("if a > b : return a + 1");
    WordSeq ref = words("if a > b : return b - 1");
    CHECK(codebleu_lite(cand, ref, kw, 1.0) == bleu(cand, ref));
  }
  SUBCASE("a keyword mismatch costs more than a non-keyword mismatch") {
    WordSeq ref = words("return value");
    WordSeq kw_miss = words("yield value");     // keyword replaced
    WordSeq plain_miss = words("return thing");  // non-keyword replaced
    // One token substituted in either candidate; bleu alone scores them
    // identically, the keyword weighting must not.
    CHECK(bleu(kw_miss, ref) == doctest::Approx(bleu(plain_miss, ref)));
    double kw_score = codebleu_lite(kw_miss, ref, kw);
    double plain_score = codebleu_lite(plain_miss, ref, kw);
    CHECK(kw_score < plain_score);
  }
  SUBCASE("empty keyword set falls back to bleu with warning flag") {
    WordSeq cand = words("a b c d e");
    WordSeq ref = words("a b x d e");
    bool fallback = false;
    CHECK(codebleu_lite(cand, ref, {}, 5.0, 4, &fallback) == bleu(cand, ref));
    CHECK(fallback);
  }
}

TEST_CASE("energy proxy arithmetic") {
  const std::vector<int> exits(10, 8);
  const std::vector<int> consults(10, 1);
  EnergyCosts unit{1.0, 1.0, 0.0};
  CHECK(energy_proxy(exits, consults, unit) == doctest::Approx(90.0));

  SUBCASE("linearity: halving the mean exit halves the layer term") {
    EnergyCosts layers_only{1.0, 0.0, 0.0};
    std::vector<int> half(10, 4);
    CHECK(energy_proxy(half, consults, layers_only) ==
          doctest::Approx(0.5 * energy_proxy(exits, consults, layers_only)));
  }
  SUBCASE("controller consultations priced separately") {
    EnergyCosts c{0.0, 0.0, 2.0};
    std::vector<int> k = {1, 2, 3};
    CHECK(energy_proxy({2, 2, 2}, k, c) == doctest::Approx(12.0));
  }
  SUBCASE("negative costs rejected") {
    CHECK_THROWS_AS(energy_proxy(exits, consults, {-1.0, 0.0, 0.0}), Error);
  }
}
