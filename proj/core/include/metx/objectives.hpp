#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metx/tensor.hpp"

namespace metx {

struct LossReport {
  float ce = 0.0f;
  float orl = 0.0f;
  float total = 0.0f;
  float lambda = 0.0f;
};

/// ||Z_hat Z_hat^T - I||_F^2 / M with L2-normalized rows of z_e [M, D].
/// Zero iff the rows are mutually orthogonal; invariant to positive row
/// rescaling.
Tensor orthogonal_loss(const Tensor& z_e);

/// Mean over experts of the summed next-token negative log-likelihood.
/// targets[t] is the ground-truth token scored by logits[:, t, :]; PAD
/// targets are excluded. When normalize_by_tokens, the sum is divided by the
/// non-PAD target count.
Tensor ce_loss(const Tensor& logits, std::span<const std::int32_t> targets,
               bool normalize_by_tokens = true);

Tensor total_loss(const Tensor& ce, const Tensor& orl, float lambda);

struct AdamState {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::int64_t step = 0;
  std::unordered_map<std::string, std::pair<std::vector<float>, std::vector<float>>>
      moments;  // first/second moment per parameter name
};

/// Bias-corrected Adam update over a named parameter list. Reads each
/// parameter's accumulated grad; a non-finite grad is an error naming the
/// parameter. The sole mutator of parameter values.
void optimizer_step(std::vector<std::pair<std::string, Tensor>>& params,
                    AdamState& state);

void zero_grads(std::vector<std::pair<std::string, Tensor>>& params);

}  // namespace metx
