#include "metx/bilinear.hpp"

#include <stdexcept>
#include <string>

namespace metx {

namespace {

constexpr float kMaskBias = -1e30f;  // finite stand-in for -inf; exp underflows to 0

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

AttnMask AttnMask::causal(std::int64_t t) {
  AttnMask mask;
  mask.t_q = t;
  mask.t_k = t;
  mask.allow.assign(t * t, 0);
  for (std::int64_t q = 0; q < t; ++q) {
    for (std::int64_t k = 0; k <= q; ++k) mask.allow[q * t + k] = 1;
  }
  return mask;
}

EBAOutputs eba_detailed(const Tensor& query, const Tensor& key, const Tensor& value,
                        const EBAParams& params, const AttnMask* mask) {
  require(query.defined() && key.defined() && value.defined(),
          "eba: undefined operand");
  require(query.rank() == 3 && key.rank() == 3 && value.rank() == 3,
          "eba: operands must be [B, T, D], got " + shape_str(query.shape()) + ", " +
              shape_str(key.shape()) + ", " + shape_str(value.shape()));
  const std::int64_t b = query.extent(0);
  const std::int64_t t_q = query.extent(1);
  const std::int64_t t_k = key.extent(1);
  require(key.extent(0) == b && value.extent(0) == b,
          "eba: batch extents differ");
  require(value.extent(1) == t_k, "eba: key/value token counts differ");
  const std::int64_t d_b = params.w_key.extent(1);
  const std::int64_t d_mid = params.w_mid.extent(1);

  if (mask) {
    require(mask->t_q == t_q && mask->t_k == t_k,
            "eba: mask extents do not match [T_q, T_k]");
    for (std::int64_t q = 0; q < t_q; ++q) {
      bool any = false;
      for (std::int64_t k = 0; k < t_k; ++k) any = any || mask->allowed(q, k);
      require(any, "eba: query row " + std::to_string(q) +
                       " is fully masked, spatial softmax undefined");
    }
  }

  // low-rank bilinear pooling: joint query-key and query-value features
  Tensor key_f = relu(matmul(key, params.w_key));               // [B, T_k, D_B]
  Tensor qk_f = relu(matmul(query, params.w_query_key));        // [B, T_q, D_B]
  Tensor value_f = relu(matmul(value, params.w_value));         // [B, T_k, D_B]
  Tensor qv_f = relu(matmul(query, params.w_query_value));      // [B, T_q, D_B]
  Tensor b_k = bilinear_outer(qk_f, key_f);    // [B, T_q, T_k, D_B]
  Tensor b_v = bilinear_outer(qv_f, value_f);

  // spatial attention over keys
  Tensor b_mid = relu(matmul(b_k, params.w_mid));               // [B, T_q, T_k, D_mid]
  Tensor logits = reshape(matmul(b_mid, params.w_score), {b, t_q, t_k});
  if (mask) {
    std::vector<float> bias(t_q * t_k, 0.0f);
    for (std::int64_t i = 0; i < t_q * t_k; ++i) {
      if (!mask->allow[i]) bias[i] = kMaskBias;
    }
    logits = add(logits, Tensor::from_data({t_q, t_k}, std::move(bias)));
  }
  Tensor alpha = softmax(logits, 2);                            // [B, T_q, T_k]
  Tensor attended = reshape(matmul(reshape(alpha, {b, t_q, 1, t_k}), b_v),
                            {b, t_q, d_b});

  // channel gate: pool the intermediate over the keys each query may attend
  Tensor pooled;  // [B, T_q, D_mid]
  if (mask) {
    std::vector<float> keep(t_q * t_k, 0.0f);
    std::vector<float> inv_count(t_q, 0.0f);
    for (std::int64_t q = 0; q < t_q; ++q) {
      std::int64_t count = 0;
      for (std::int64_t k = 0; k < t_k; ++k) {
        if (mask->allowed(q, k)) {
          keep[q * t_k + k] = 1.0f;
          ++count;
        }
      }
      inv_count[q] = 1.0f / static_cast<float>(count);
    }
    Tensor masked = hadamard(b_mid, Tensor::from_data({1, t_q, t_k, 1}, std::move(keep)));
    Tensor summed = sum_over_axis(masked, 2);  // [B, T_q, D_mid]
    pooled = hadamard(summed, Tensor::from_data({1, t_q, 1}, std::move(inv_count)));
  } else {
    pooled = mean_over_axis(b_mid, 2);
  }
  Tensor beta = sigmoid(matmul(pooled, params.w_channel));      // [B, T_q, D_B]

  EBAOutputs outputs;
  outputs.alpha = alpha;
  outputs.beta = beta;
  outputs.out = hadamard(beta, attended);
  (void)d_mid;
  return outputs;
}

Tensor eba(const Tensor& query, const Tensor& key, const Tensor& value,
           const EBAParams& params, const AttnMask* mask) {
  return eba_detailed(query, key, value, params, mask).out;
}

std::pair<Tensor, Tensor> bilinear_encoder_forward(const Tensor& z_e, const Tensor& z_v,
                                                   const BilinearEncoderParams& params) {
  require(z_e.defined() && z_v.defined() && z_e.rank() == 2 && z_v.rank() == 2,
          "bilinear_encoder_forward: want [M, D_B] and [N, D_B]");
  require(!params.layers.empty(), "bilinear_encoder_forward: needs >= 1 layer");
  const std::int64_t m = z_e.extent(0);
  const std::int64_t n = z_v.extent(0);
  const std::int64_t d = z_e.extent(1);
  Tensor experts = z_e;
  Tensor visual = z_v;
  for (const auto& layer : params.layers) {
    Tensor experts_next =
        reshape(eba(reshape(experts, {1, m, d}), reshape(visual, {1, n, d}),
                    reshape(visual, {1, n, d}), layer.eba),
                {m, d});
    // visual update sees the pre-update expert embeddings
    Tensor pooled = broadcast_to(reshape(mean_over_axis(experts, 0), {1, d}), {n, d});
    Tensor fused = matmul(concat_last_axis(pooled, visual), layer.w_fuse);
    Tensor visual_next = layer_norm(add(fused, visual), layer.ln_gain, layer.ln_bias);
    experts = experts_next;
    visual = visual_next;
  }
  return {experts, visual};
}

}  // namespace metx
