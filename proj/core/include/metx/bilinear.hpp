#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "metx/tensor.hpp"

namespace metx {

/// Low-rank bilinear attention block. Query/key and query/value pairs are
/// fused by relu-projected Hadamard products; a spatial softmax over keys and
/// a squeeze-excitation channel gate weight the attended values.
struct EBAParams {
  Tensor w_key;          // [D_k, D_B]
  Tensor w_value;        // [D_v, D_B]
  Tensor w_query_key;    // [D_q, D_B]
  Tensor w_query_value;  // [D_q, D_B]
  Tensor w_mid;          // [D_B, D_mid], spatial branch projection
  Tensor w_score;        // [D_mid, 1], spatial score, no bias
  Tensor w_channel;      // [D_mid, D_B], squeeze-excitation gate
};

/// Boolean attention mask, true = key may be attended. Row-major [t_q, t_k].
struct AttnMask {
  std::int64_t t_q = 0;
  std::int64_t t_k = 0;
  std::vector<std::uint8_t> allow;

  bool allowed(std::int64_t q, std::int64_t k) const { return allow[q * t_k + k] != 0; }
  static AttnMask causal(std::int64_t t);
};

/// query [B, T_q, D_q], key [B, T_k, D_k], value [B, T_k, D_v]
/// -> [B, T_q, D_B]. Masked keys contribute to neither the spatial softmax
/// nor the channel-gate pooling, so the output is independent of their
/// content. A fully masked query row is an error.
Tensor eba(const Tensor& query, const Tensor& key, const Tensor& value,
           const EBAParams& params, const AttnMask* mask = nullptr);

/// eba plus a view of the spatial attention weights [B, T_q, T_k].
struct EBAOutputs {
  Tensor out;
  Tensor alpha;  // spatial attention, rows sum to 1
  Tensor beta;   // channel gate in (0, 1)
};
EBAOutputs eba_detailed(const Tensor& query, const Tensor& key, const Tensor& value,
                        const EBAParams& params, const AttnMask* mask = nullptr);

struct BilinearEncLayerParams {
  EBAParams eba;
  Tensor w_fuse;  // [2*D_B, D_B], mixes pooled expert context into visuals
  Tensor ln_gain, ln_bias;
};

struct BilinearEncoderParams {
  std::vector<BilinearEncLayerParams> layers;
};

/// Stacked bilinear encoder. Per layer the experts re-attend the visual
/// tokens via eba (no residual on the expert path), while every visual token
/// is updated from the mean expert embedding concatenated with itself,
/// projected, with residual and layer norm.
/// (z_e [M, D_B], z_v [N, D_B]) -> (f_e [M, D_B], f_v [N, D_B]).
std::pair<Tensor, Tensor> bilinear_encoder_forward(const Tensor& z_e, const Tensor& z_v,
                                                   const BilinearEncoderParams& params);

}  // namespace metx
