#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "metx/metrics.hpp"
#include "support/oracles.hpp"

using namespace metx;

#ifndef METX_TEST_DIR
#define METX_TEST_DIR "."
#endif

namespace {

TokenList tl(const std::string& text) { return tokenize(text); }

std::vector<std::string> random_reports(std::mt19937& rng, int count) {
  const std::vector<std::string> words{"red",  "blue", "square", "disc",
                                       "ring", "left", "clear",  "."};
  std::uniform_int_distribution<int> len(1, 7);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(words.size()) - 1);
  std::vector<std::string> reports;
  for (int i = 0; i < count; ++i) {
    std::string text;
    const int n = len(rng);
    for (int w = 0; w < n; ++w) {
      if (w) text += ' ';
      text += words[pick(rng)];
    }
    reports.push_back(text);
  }
  return reports;
}

}  // namespace

TEST_CASE("cider limits and the derived small case") {
  const TokenList a = tl("there is a red square");
  const TokenList b = tl("the lower right is clear");
  const IdfTable idf = IdfTable::build({a, b});
  CHECK(cider(a, {a}, idf) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(cider(a, {b}, idf) == 0.0);

  const TokenList cand = tl("a b c");
  const TokenList ref = tl("a b d");
  const IdfTable pair_idf = IdfTable::build({cand, ref});
  const double want = oracle::cider_oracle(cand, {ref}, {cand, ref});
  CHECK(cider(cand, {ref}, pair_idf) == doctest::Approx(want).epsilon(1e-12));

  // symmetric under candidate/reference swap with a shared idf
  CHECK(cider(cand, {ref}, pair_idf) ==
        doctest::Approx(cider(ref, {cand}, pair_idf)).epsilon(1e-12));
}

TEST_CASE("bleu") {
  const TokenList a = tl("there is a red square in the upper left .");
  const TokenList b = tl("the lower right is clear and nothing else");
  CHECK(bleu({a}, {a}, 4) == 1.0);
  CHECK(bleu({tl("x y z w")}, {tl("p q r s")}, 4) == 0.0);
  CHECK(bleu({tl("the cat sat")}, {tl("the cat ran")}, 1) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(bleu({}, {}, 4), std::invalid_argument);

  std::mt19937 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto cands = random_reports(rng, 4);
    auto refs = random_reports(rng, 4);
    std::vector<TokenList> ct, rt;
    for (auto& c : cands) ct.push_back(tl(c));
    for (auto& r : refs) rt.push_back(tl(r));
    for (int n = 1; n <= 4; ++n) {
      CHECK(bleu(ct, rt, n) ==
            doctest::Approx(oracle::bleu_oracle(ct, rt, n)).epsilon(1e-12));
    }
    CHECK(bleu_sentence(ct[0], rt[0]) ==
          doctest::Approx(oracle::bleu_sentence_oracle(ct[0], rt[0], 4)).epsilon(1e-12));
  }
}

TEST_CASE("rouge_l") {
  const TokenList a = tl("there is a red square");
  CHECK(rouge_l(a, a) == 1.0);
  CHECK(rouge_l(tl("x y"), tl("p q")) == 0.0);

  const TokenList cand = tl("a b c d");
  const TokenList ref = tl("a c d");
  const double p = 3.0 / 4.0, r = 1.0, b2 = 1.2 * 1.2;
  CHECK(rouge_l(cand, ref) ==
        doctest::Approx((1 + b2) * p * r / (r + b2 * p)).epsilon(1e-12));
  CHECK(rouge_l(cand, ref) ==
        doctest::Approx(oracle::rouge_l_oracle(cand, ref)).epsilon(1e-12));

  std::mt19937 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto texts = random_reports(rng, 2);
    CHECK(rouge_l(tl(texts[0]), tl(texts[1])) ==
          doctest::Approx(oracle::rouge_l_oracle(tl(texts[0]), tl(texts[1])))
              .epsilon(1e-12));
  }
}

TEST_CASE("vote") {
  // duplicate pool: the duplicates tie and the tie-break picks the first
  const std::string a = "there is a red square in the upper left .";
  const std::string b = "the lower right is clear .";
  VoteResult dup = vote({a, a, b});
  CHECK(dup.scores[0] == doctest::Approx(dup.scores[1]).epsilon(1e-12));
  CHECK(dup.scores[0] > dup.scores[2]);
  CHECK(dup.winner == 0);

  VoteResult same = vote({b, b, b, b});
  for (double s : same.scores) CHECK(s == doctest::Approx(same.scores[0]));
  CHECK(same.winner == 0);

  VoteResult solo = vote({a});
  CHECK(solo.winner == 0);
  CHECK(solo.scores == std::vector<double>{0.0});

  std::mt19937 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto reports = random_reports(rng, 4);
    const VoteResult got = vote(reports);
    const oracle::VoteOracle want = oracle::vote_oracle(reports);
    REQUIRE(got.scores.size() == want.scores.size());
    for (std::size_t i = 0; i < got.scores.size(); ++i) {
      CHECK(got.scores[i] == doctest::Approx(want.scores[i]).epsilon(1e-9));
    }
    CHECK(got.winner == want.winner);
  }
}

TEST_CASE("vote is permutation consistent") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto reports = random_reports(rng, 5);
    const VoteResult base = vote(reports);
    std::vector<int> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> moved(5);
    for (int i = 0; i < 5; ++i) moved[i] = reports[perm[i]];
    const VoteResult after = vote(moved);
    for (int i = 0; i < 5; ++i) {
      CHECK(after.scores[i] == doctest::Approx(base.scores[perm[i]]).epsilon(1e-9));
    }
    // the winner maps through the permutation up to the lowest-index tie break
    CHECK(after.scores[after.winner] ==
          doctest::Approx(base.scores[base.winner]).epsilon(1e-9));
  }
}

TEST_CASE("golden corpus matches the committed oracle values") {
  std::ifstream is(std::string(METX_TEST_DIR) + "/golden/metrics_golden.txt");
  REQUIRE(is.good());
  std::vector<TokenList> cands, refs;
  std::vector<double> want_cider, want_rouge, want_sbleu;
  std::vector<double> corpus_bleu;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string kind;
    std::getline(fields, kind, '\t');
    if (kind == "PAIR") {
      std::string cand, ref, c, r, s;
      std::getline(fields, cand, '\t');
      std::getline(fields, ref, '\t');
      std::getline(fields, c, '\t');
      std::getline(fields, r, '\t');
      std::getline(fields, s, '\t');
      cands.push_back(tl(cand));
      refs.push_back(tl(ref));
      want_cider.push_back(std::stod(c));
      want_rouge.push_back(std::stod(r));
      want_sbleu.push_back(std::stod(s));
    } else if (kind == "CORPUS") {
      std::string v;
      while (std::getline(fields, v, '\t')) corpus_bleu.push_back(std::stod(v));
    }
  }
  REQUIRE(cands.size() == 20);
  REQUIRE(corpus_bleu.size() == 4);

  const IdfTable idf = IdfTable::build(refs);
  std::vector<std::vector<std::string>> idf_corpus = refs;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double got = cider(cands[i], {refs[i]}, idf);
    CHECK(got == doctest::Approx(want_cider[i]).epsilon(1e-9));
    CHECK(oracle::cider_oracle(cands[i], {refs[i]}, idf_corpus) ==
          doctest::Approx(want_cider[i]).epsilon(1e-9));
    CHECK(rouge_l(cands[i], refs[i]) ==
          doctest::Approx(want_rouge[i]).epsilon(1e-9));
    CHECK(oracle::rouge_l_oracle(cands[i], refs[i]) ==
          doctest::Approx(want_rouge[i]).epsilon(1e-9));
    CHECK(bleu_sentence(cands[i], refs[i]) ==
          doctest::Approx(want_sbleu[i]).epsilon(1e-9));
    CHECK(oracle::bleu_sentence_oracle(cands[i], refs[i], 4) ==
          doctest::Approx(want_sbleu[i]).epsilon(1e-9));
    // identical-text limit under the same idf table
    CHECK(cider(cands[i], {cands[i]}, idf) == doctest::Approx(10.0).epsilon(1e-9));
  }
  for (int n = 1; n <= 4; ++n) {
    CHECK(bleu(cands, refs, n) == doctest::Approx(corpus_bleu[n - 1]).epsilon(1e-9));
    CHECK(oracle::bleu_oracle(cands, refs, n) ==
          doctest::Approx(corpus_bleu[n - 1]).epsilon(1e-9));
  }
  CHECK(bleu(refs, refs, 4) == 1.0);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    CHECK(rouge_l(refs[i], refs[i]) == 1.0);
  }
}
