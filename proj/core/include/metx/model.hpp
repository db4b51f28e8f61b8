#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metx/bilinear.hpp"
#include "metx/config.hpp"
#include "metx/decoder.hpp"
#include "metx/encoder.hpp"

namespace metx {

/// Every trainable tensor of the network plus a named, ordered registry that
/// drives the optimizer, the parameter census and the checkpoint layout.
struct ModelParams {
  ViTParams vit;
  EmbedParams embed;
  BilinearEncoderParams benc;  // empty when the bilinear encoder is disabled
  DecoderParams dec;
  std::vector<std::pair<std::string, Tensor>> named;
  std::int32_t vocab_size = 0;

  /// Gaussian(0, 0.02) weights and embeddings, unit layer-norm gains, zero
  /// biases; draw order follows the registry, so equal (config, vocab) pairs
  /// yield identical parameters.
  static ModelParams init(const RunConfig& config, std::int32_t vocab_size);

  Tensor find(const std::string& name) const;
};

struct ParamCensus {
  std::vector<std::pair<std::string, std::int64_t>> per_tensor;
  std::vector<std::pair<std::string, std::int64_t>> per_module;
  std::int64_t total = 0;
};

ParamCensus param_census(const RunConfig& config, std::int32_t vocab_size);

struct EncodedFeatures {
  EncodedTokens vit_tokens;  // pre-bilinear, width D
  Tensor f_e;                // [M, D_B]
  Tensor f_v;                // [N, D_B]
};

/// ViT encoder -> bilinear embedding -> (optional) bilinear encoder stack.
EncodedFeatures encode_image(const Tensor& image, const ModelParams& params,
                             const RunConfig& config,
                             std::vector<Tensor>* vit_attention = nullptr);

}  // namespace metx
