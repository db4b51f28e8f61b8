#include "metx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace metx {

namespace {

constexpr char kSep = '\x1f';

std::string join_gram(const TokenList& tokens, std::size_t start, int n) {
  std::string gram = tokens[start];
  for (int i = 1; i < n; ++i) {
    gram += kSep;
    gram += tokens[start + i];
  }
  return gram;
}

}  // namespace

TokenList tokenize(const std::string& text) {
  TokenList tokens;
  std::istringstream is(text);
  std::string w;
  while (is >> w) tokens.push_back(std::move(w));
  return tokens;
}

NGramProfile NGramProfile::of(const TokenList& tokens) {
  NGramProfile profile;
  for (int n = 1; n <= 4; ++n) {
    auto& bucket = profile.counts[n - 1];
    if (static_cast<int>(tokens.size()) < n) continue;
    for (std::size_t s = 0; s + n <= tokens.size(); ++s) {
      bucket[join_gram(tokens, s, n)] += 1;
    }
  }
  return profile;
}

IdfTable IdfTable::build(const std::vector<TokenList>& corpus) {
  IdfTable table;
  table.corpus_size = corpus.size();
  for (const auto& text : corpus) {
    const auto profile = NGramProfile::of(text);
    for (const auto& bucket : profile.counts) {
      for (const auto& [gram, count] : bucket) table.df[gram] += 1;
    }
  }
  return table;
}

double IdfTable::weight(const std::string& gram) const {
  const auto it = df.find(gram);
  const int d = it == df.end() ? 0 : it->second;
  return std::log((static_cast<double>(corpus_size) + 1.0) / (d + 1.0));
}

double cider(const TokenList& candidate, const std::vector<TokenList>& references,
             const IdfTable& idf) {
  if (references.empty()) return 0.0;
  const auto cand = NGramProfile::of(candidate);
  double total = 0.0;
  for (const auto& reference : references) {
    const auto ref = NGramProfile::of(reference);
    double per_n = 0.0;
    for (int n = 0; n < 4; ++n) {
      const auto& cb = cand.counts[n];
      const auto& rb = ref.counts[n];
      double dot = 0.0, cand_sq = 0.0, ref_sq = 0.0;
      for (const auto& [gram, count] : cb) {
        const double w = count * idf.weight(gram);
        cand_sq += w * w;
        const auto it = rb.find(gram);
        if (it != rb.end()) dot += w * it->second * idf.weight(gram);
      }
      for (const auto& [gram, count] : rb) {
        const double w = count * idf.weight(gram);
        ref_sq += w * w;
      }
      if (cand_sq > 0.0 && ref_sq > 0.0) {
        per_n += dot / (std::sqrt(cand_sq) * std::sqrt(ref_sq));
      }
    }
    total += per_n / 4.0;
  }
  return 10.0 * total / static_cast<double>(references.size());
}

double bleu(const std::vector<TokenList>& candidates,
            const std::vector<TokenList>& references, int n_max) {
  if (candidates.empty() || candidates.size() != references.size()) {
    throw std::invalid_argument("bleu: need a non-empty aligned corpus");
  }
  if (n_max < 1 || n_max > 4) throw std::invalid_argument("bleu: n_max must be 1..4");
  std::array<long long, 4> matched{0, 0, 0, 0};
  std::array<long long, 4> total{0, 0, 0, 0};
  long long cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<long long>(candidates[i].size());
    ref_len += static_cast<long long>(references[i].size());
    const auto cand = NGramProfile::of(candidates[i]);
    const auto ref = NGramProfile::of(references[i]);
    for (int n = 0; n < n_max; ++n) {
      for (const auto& [gram, count] : cand.counts[n]) {
        total[n] += count;
        const auto it = ref.counts[n].find(gram);
        if (it != ref.counts[n].end()) matched[n] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (int n = 0; n < n_max; ++n) {
    if (total[n] == 0 || matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / total[n]);
  }
  double bp = 1.0;
  if (cand_len == 0) return 0.0;
  if (cand_len < ref_len) {
    bp = std::exp(1.0 - static_cast<double>(ref_len) / cand_len);
  }
  return bp * std::exp(log_sum / n_max);
}

double bleu_sentence(const TokenList& candidate, const TokenList& reference,
                     int n_max) {
  if (n_max < 1 || n_max > 4) {
    throw std::invalid_argument("bleu_sentence: n_max must be 1..4");
  }
  const auto cand = NGramProfile::of(candidate);
  const auto ref = NGramProfile::of(reference);
  double log_sum = 0.0;
  for (int n = 0; n < n_max; ++n) {
    long long matched = 0, total = 0;
    for (const auto& [gram, count] : cand.counts[n]) {
      total += count;
      const auto it = ref.counts[n].find(gram);
      if (it != ref.counts[n].end()) matched += std::min(count, it->second);
    }
    const int smooth = n >= 1 ? 1 : 0;  // +1 smoothing for n >= 2
    const double num = static_cast<double>(matched + smooth);
    const double den = static_cast<double>(total + smooth);
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const auto c = static_cast<double>(candidate.size());
  const auto r = static_cast<double>(reference.size());
  if (c == 0.0) return 0.0;
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / n_max);
}

double rouge_l(const TokenList& candidate, const TokenList& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t m = candidate.size();
  const std::size_t n = reference.size();
  std::vector<int> prev(n + 1, 0), curr(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      if (candidate[i - 1] == reference[j - 1]) {
        curr[j] = prev[j - 1] + 1;
      } else {
        curr[j] = std::max(prev[j], curr[j - 1]);
      }
    }
    std::swap(prev, curr);
  }
  const int lcs = prev[n];
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / m;
  const double r = static_cast<double>(lcs) / n;
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

VoteResult vote(const std::vector<std::string>& reports) {
  if (reports.empty()) throw std::invalid_argument("vote: empty report pool");
  VoteResult result;
  result.scores.assign(reports.size(), 0.0);
  if (reports.size() == 1) return result;
  std::vector<TokenList> tokenized;
  tokenized.reserve(reports.size());
  for (const auto& r : reports) tokenized.push_back(tokenize(r));
  const IdfTable idf = IdfTable::build(tokenized);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    double score = 0.0;
    for (std::size_t j = 0; j < reports.size(); ++j) {
      if (j == i) continue;
      score += cider(tokenized[i], {tokenized[j]}, idf);
    }
    result.scores[i] = score;
  }
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (result.scores[i] > result.scores[result.winner]) {
      result.winner = static_cast<int>(i);
    }
  }
  return result;
}

}  // namespace metx
