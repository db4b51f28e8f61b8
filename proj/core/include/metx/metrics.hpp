#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

namespace metx {

using TokenList = std::vector<std::string>;

TokenList tokenize(const std::string& text);  // whitespace split

/// n-gram multisets for n = 1..4. Grams are the tokens joined by '\x1f'.
struct NGramProfile {
  std::array<std::unordered_map<std::string, int>, 4> counts;
  static NGramProfile of(const TokenList& tokens);
};

/// idf(g) = ln((|C| + 1) / (df(g) + 1)); unseen grams get ln(|C| + 1).
struct IdfTable {
  std::unordered_map<std::string, int> df;
  std::size_t corpus_size = 0;

  static IdfTable build(const std::vector<TokenList>& corpus);
  double weight(const std::string& gram) const;
};

/// Consensus score: mean over n = 1..4 of the tf-idf n-gram cosine between
/// candidate and each reference (averaged over references), times 10.
/// A zero vector on either side scores 0 for that n.
double cider(const TokenList& candidate, const std::vector<TokenList>& references,
             const IdfTable& idf);

/// Corpus-level BLEU with clipped modified precision, geometric mean over
/// n <= n_max and the brevity penalty. Unsmoothed: any empty precision
/// bucket zeroes the score. Errors on an empty corpus.
double bleu(const std::vector<TokenList>& candidates,
            const std::vector<TokenList>& references, int n_max = 4);

/// Diagnostic per-sentence BLEU with +1 smoothing for n >= 2.
double bleu_sentence(const TokenList& candidate, const TokenList& reference,
                     int n_max = 4);

/// LCS F-measure: F = (1 + beta^2) P R / (R + beta^2 P); 0 when the LCS is
/// empty.
double rouge_l(const TokenList& candidate, const TokenList& reference,
               double beta = 1.2);

struct VoteResult {
  int winner = 0;
  std::vector<double> scores;
};

/// Metric-based expert voting: S_i sums CIDEr(r_i, r_j) over the other
/// reports, with idf statistics taken from the report pool itself. The
/// highest score wins, ties break toward the lowest index.
VoteResult vote(const std::vector<std::string>& reports);

}  // namespace metx
