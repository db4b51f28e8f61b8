#pragma once

#include <span>
#include <vector>

#include "metx/bilinear.hpp"
#include "metx/config.hpp"
#include "metx/data.hpp"
#include "metx/tensor.hpp"

namespace metx {

/// Expert gating: relu(W_e f_e) broadcast over rows, Hadamard with relu(W_v x).
struct AdjustParams {
  Tensor w_expert;  // [D, D]
  Tensor w_input;   // [D, D]
};

struct DecoderLayerParams {
  AdjustParams adjust_word;    // conditions word embeddings on one expert
  AdjustParams adjust_visual;  // conditions visual features on one expert
  EBAParams eba_mask;          // causal self-attention over words
  EBAParams eba_cross;         // cross-attention words -> visuals
  Tensor ln_mid_gain, ln_mid_bias;
  Tensor ln_cross_gain, ln_cross_bias;
  Tensor w_fuse;  // [2*D_r, D_r]
  Tensor ln_out_gain, ln_out_bias;
};

struct DecoderParams {
  Tensor word_emb;      // [V, D_r]
  Tensor word_pos_emb;  // [T_max, D_r]
  std::vector<DecoderLayerParams> layers;
  Tensor out_proj_w;  // [D_r, V]
  Tensor out_proj_b;  // [V]
};

struct Report {
  std::vector<std::int32_t> ids;  // BOS ... (EOS when reached before t_max)
  std::string text;
};

struct ExpertOutputs {
  Tensor logits;                // [M, T, V] when produced by teacher forcing
  std::vector<Report> reports;  // one per expert
  std::vector<double> votes;
  int winner = 0;
};

/// Spec form of the adjust block: one expert row against a token matrix.
Tensor adjust(const Tensor& expert_row, const Tensor& x, const AdjustParams& params);

/// Batched adjust: experts [M, D] against x of shape [M, T, D] (per-expert
/// streams) or [T, D] (shared rows, broadcast across experts) -> [M, T, D].
Tensor adjust_batched(const Tensor& experts, const Tensor& x,
                      const AdjustParams& params);

/// Teacher forcing with one shared input sequence (must begin with BOS);
/// position t of the output scores the token at position t+1.
Tensor decoder_forward(const Tensor& f_e, const Tensor& f_v,
                       std::span<const std::int32_t> report_ids,
                       const DecoderParams& params, const RunConfig& config);

/// Same network with one input sequence per expert (used by generation).
Tensor decoder_forward_multi(const Tensor& f_e, const Tensor& f_v,
                             const std::vector<std::vector<std::int32_t>>& ids,
                             const DecoderParams& params, const RunConfig& config);

/// Per-expert autoregressive argmax decoding from BOS until EOS or t_max.
/// Ties break toward the lowest token id. Deterministic.
std::vector<Report> generate_greedy(const Tensor& f_e, const Tensor& f_v,
                                    const DecoderParams& params,
                                    const RunConfig& config, const Vocab& vocab);

/// Ensemble decoding: one shared sequence, each step argmaxing the mean of
/// the per-expert next-token distributions.
Report generate_averaged(const Tensor& f_e, const Tensor& f_v,
                         const DecoderParams& params, const RunConfig& config,
                         const Vocab& vocab);

}  // namespace metx
