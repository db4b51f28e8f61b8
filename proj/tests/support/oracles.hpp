#pragma once

// Independent reference implementations used only by tests: explicit-loop
// EBA, naive n-gram metrics, an exact synthetic-image decoder, and a
// kink-aware finite-difference comparison helper. Everything here is written
// against the definitions, not against the library code paths it checks.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metx/bilinear.hpp"
#include "metx/data.hpp"
#include "metx/tensor.hpp"

namespace metx::oracle {

// ---- explicit 5-step EBA reference (double precision, plain loops) ----

struct EbaRefInputs {
  std::int64_t b, t_q, t_k, d_q, d_k, d_v, d_b, d_mid;
  std::vector<double> query, key, value;
  std::vector<double> w_key, w_value, w_query_key, w_query_value;  // [in][d_b]
  std::vector<double> w_mid;     // [d_b][d_mid]
  std::vector<double> w_score;   // [d_mid]
  std::vector<double> w_channel; // [d_mid][d_b]
  const AttnMask* mask = nullptr;
};

std::vector<double> eba_reference(const EbaRefInputs& in);

// ---- naive metric oracles ----

using Gram = std::vector<std::string>;

std::map<Gram, int> ngram_counts(const std::vector<std::string>& tokens, int n);

double cider_oracle(const std::vector<std::string>& candidate,
                    const std::vector<std::vector<std::string>>& references,
                    const std::vector<std::vector<std::string>>& idf_corpus);

double bleu_oracle(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::string>>& references, int n_max);

double bleu_sentence_oracle(const std::vector<std::string>& candidate,
                            const std::vector<std::string>& reference, int n_max);

double rouge_l_oracle(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference, double beta = 1.2);

struct VoteOracle {
  int winner;
  std::vector<double> scores;
};
VoteOracle vote_oracle(const std::vector<std::string>& reports);

// ---- exact synthetic-image decoder ----

/// Inverts a generated image region-by-region through exhaustive matching
/// against every possible rendering, and rebuilds the templated report.
class ImageDecoder {
 public:
  explicit ImageDecoder(const GridSpec& grid = {});
  std::string expected_report(const Tensor& image) const;

 private:
  GridSpec grid_;
  std::map<std::uint64_t, std::vector<int>> renders_;  // hash -> (shape,color,dx,dy,half)
};

// ---- finite-difference comparison with relu-kink detection ----

/// Entry error is measured as max(0, |analytic - fd| - atol) / max(|a|, |b|,
/// 1e-6): the relative bound applies above `atol`, the f32 fd noise floor
/// (stored-intermediate rounding divided by the step). Probes whose two
/// evaluations straddle a relu kink are skipped and counted.
struct FdCheck {
  double max_rel_err = 0.0;  // worst excess over the noise floor
  std::int64_t checked = 0;
  std::int64_t skipped = 0;
};

FdCheck fd_check(const std::vector<Tensor>& targets,
                 const std::function<Tensor()>& loss_fn, float step = 3e-3f,
                 double atol = 5e-4);

}  // namespace metx::oracle
