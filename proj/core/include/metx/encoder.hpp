#pragma once

#include <vector>

#include "metx/config.hpp"
#include "metx/tensor.hpp"

namespace metx {

/// One pre-norm transformer layer: multi-headed self-attention and a
/// relu MLP (D -> 4D -> D), each behind a layer norm with a residual.
struct MsaLayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_query, b_query;
  Tensor w_key, b_key;
  Tensor w_value, b_value;
  Tensor w_out, b_out;
  Tensor ln2_gain, ln2_bias;
  Tensor w_mlp1, b_mlp1;
  Tensor w_mlp2, b_mlp2;
};

struct ViTParams {
  Tensor patch_proj;     // [P^2*C, D]
  Tensor expert_tokens;  // [M, D], trainable specialist queries
  Tensor pos_emb;        // [N+M, D]
  Tensor seg_emb;        // [2, D]: row 0 visual, row 1 expert
  std::vector<MsaLayerParams> layers;
};

/// Shared linear projection + relu that moves tokens from the ViT width D to
/// the bilinear width D_B.
struct EmbedParams {
  Tensor weight;  // [D, D_B]
  Tensor bias;    // [D_B]
};

struct EncodedTokens {
  Tensor visual;   // [N, *]
  Tensor experts;  // [M, *]
};

/// [H,W,C] -> [N, P^2*C] with patches in raster order; within a patch the
/// flattening order is (row, col, channel).
Tensor patchify(const Tensor& image, int patch);

/// Inverse of patchify, for round-trip checks.
Tensor unpatchify(const Tensor& patches, int height, int width, int channels,
                  int patch);

/// Embeds patches, appends the expert tokens, adds position and segment
/// embeddings, then runs the self-attention stack. When `attention_out` is
/// given, each layer's per-head attention probabilities [h, T, T] are
/// appended to it.
EncodedTokens vit_forward(const Tensor& image, const ViTParams& params,
                          const RunConfig& config,
                          std::vector<Tensor>* attention_out = nullptr);

Tensor msa_block(const Tensor& tokens, const MsaLayerParams& params, int heads,
                 std::vector<Tensor>* attention_out = nullptr);

EncodedTokens embed_to_bilinear(const EncodedTokens& tokens, const EmbedParams& params);

/// softmax over keys of z_e . z_v^T: which image patches each expert attends.
Tensor expert_attention_map(const Tensor& z_e, const Tensor& z_v);

}  // namespace metx
