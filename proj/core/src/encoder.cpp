#include "metx/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace metx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor patchify(const Tensor& image, int patch) {
  require(image.defined() && image.rank() == 3,
          "patchify: image must be [H, W, C]");
  const std::int64_t h = image.extent(0);
  const std::int64_t w = image.extent(1);
  const std::int64_t c = image.extent(2);
  require(patch >= 1 && h % patch == 0 && w % patch == 0,
          "patchify: image extents " + shape_str(image.shape()) +
              " not divisible by patch " + std::to_string(patch));
  const std::int64_t gh = h / patch;
  const std::int64_t gw = w / patch;
  Tensor grid = reshape(image, {gh, patch, gw, patch, c});
  Tensor ordered = permute(grid, {0, 2, 1, 3, 4});  // [gh, gw, P, P, C]
  return reshape(ordered, {gh * gw, static_cast<std::int64_t>(patch) * patch * c});
}

Tensor unpatchify(const Tensor& patches, int height, int width, int channels,
                  int patch) {
  require(patches.defined() && patches.rank() == 2, "unpatchify: patches must be 2-D");
  const std::int64_t gh = height / patch;
  const std::int64_t gw = width / patch;
  require(patches.extent(0) == gh * gw &&
              patches.extent(1) == static_cast<std::int64_t>(patch) * patch * channels,
          "unpatchify: patch tensor " + shape_str(patches.shape()) +
              " does not match the image extents");
  Tensor grid = reshape(patches, {gh, gw, patch, patch, channels});
  Tensor ordered = permute(grid, {0, 2, 1, 3, 4});  // [gh, P, gw, P, C]
  return reshape(ordered, {height, width, channels});
}

Tensor msa_block(const Tensor& tokens, const MsaLayerParams& params, int heads,
                 std::vector<Tensor>* attention_out) {
  const std::int64_t t = tokens.extent(0);
  const std::int64_t d = tokens.extent(1);
  require(heads >= 1 && d % heads == 0, "msa_block: dim must be divisible by heads");
  const std::int64_t dh = d / heads;

  Tensor normed = layer_norm(tokens, params.ln1_gain, params.ln1_bias);
  Tensor q = add(matmul(normed, params.w_query), params.b_query);
  Tensor k = add(matmul(normed, params.w_key), params.b_key);
  Tensor v = add(matmul(normed, params.w_value), params.b_value);
  auto split_heads = [&](const Tensor& x) {
    return permute(reshape(x, {t, heads, dh}), {1, 0, 2});  // [h, T, dh]
  };
  Tensor qh = split_heads(q);
  Tensor kh = split_heads(k);
  Tensor vh = split_heads(v);
  Tensor scores = scale(matmul(qh, transpose_last2(kh)),
                        1.0f / std::sqrt(static_cast<float>(dh)));
  Tensor probs = softmax(scores, 2);  // [h, T, T]
  if (attention_out) attention_out->push_back(probs);
  Tensor context = reshape(permute(matmul(probs, vh), {1, 0, 2}), {t, d});
  Tensor attended = add(tokens, add(matmul(context, params.w_out), params.b_out));

  Tensor normed2 = layer_norm(attended, params.ln2_gain, params.ln2_bias);
  Tensor hidden = relu(add(matmul(normed2, params.w_mlp1), params.b_mlp1));
  Tensor mlp = add(matmul(hidden, params.w_mlp2), params.b_mlp2);
  return add(attended, mlp);
}

EncodedTokens vit_forward(const Tensor& image, const ViTParams& params,
                          const RunConfig& config,
                          std::vector<Tensor>* attention_out) {
  const std::int64_t n = config.n_patches();
  const std::int64_t m = params.expert_tokens.extent(0);
  Tensor patches = patchify(image, config.patch);
  require(patches.extent(1) == params.patch_proj.extent(0),
          "vit_forward: patch projection shape " + shape_str(params.patch_proj.shape()) +
              " does not match patch dim " + std::to_string(patches.extent(1)));
  Tensor visual = matmul(patches, params.patch_proj);  // [N, D]
  Tensor tokens = concat(visual, params.expert_tokens, 0);
  const std::int64_t d = visual.extent(1);
  require(params.pos_emb.shape() == Shape{n + m, d},
          "vit_forward: pos_emb shape " + shape_str(params.pos_emb.shape()) +
              " does not match token count " + std::to_string(n + m));
  // segment id 0 on visual tokens, 1 on expert tokens
  Tensor seg_rows = concat(broadcast_to(slice(params.seg_emb, 0, 0, 1), {n, d}),
                           broadcast_to(slice(params.seg_emb, 0, 1, 2), {m, d}), 0);
  Tensor z = add(add(tokens, params.pos_emb), seg_rows);
  for (const auto& layer : params.layers) {
    z = msa_block(z, layer, config.heads, attention_out);
  }
  return EncodedTokens{slice(z, 0, 0, n), slice(z, 0, n, n + m)};
}

EncodedTokens embed_to_bilinear(const EncodedTokens& tokens, const EmbedParams& params) {
  auto apply = [&](const Tensor& x) {
    return relu(add(matmul(x, params.weight), params.bias));
  };
  return EncodedTokens{apply(tokens.visual), apply(tokens.experts)};
}

Tensor expert_attention_map(const Tensor& z_e, const Tensor& z_v) {
  require(z_e.defined() && z_v.defined() && z_e.rank() == 2 && z_v.rank() == 2 &&
              z_e.extent(1) == z_v.extent(1),
          "expert_attention_map: want [M, D] and [N, D]");
  return softmax(matmul(z_e, transpose_last2(z_v)), 1);
}

}  // namespace metx
