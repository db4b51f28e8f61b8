#include <doctest.h>

#include <algorithm>
#include <random>

#include "metx/encoder.hpp"
#include "metx/harness.hpp"
#include "metx/model.hpp"
#include "support/oracles.hpp"

using namespace metx;

namespace {

bool allclose(std::span<const float> a, std::span<const float> b, double tol) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(static_cast<double>(a[i]) - b[i]) > tol) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("patchify") {
  std::mt19937 rng(1);
  Tensor image = Tensor::rand_uniform({64, 64, 3}, rng, 0, 1);
  Tensor patches = patchify(image, 16);
  CHECK(patches.shape() == Shape{16, 768});

  Tensor back = unpatchify(patches, 64, 64, 3, 16);
  const auto a = image.values();
  const auto b = back.values();
  CHECK(std::equal(a.begin(), a.end(), b.begin()));

  Tensor tiny = Tensor::rand_uniform({4, 4, 2}, rng, 0, 1);
  Tensor whole = patchify(tiny, 4);
  CHECK(whole.shape() == Shape{1, 32});
  CHECK(std::equal(whole.values().begin(), whole.values().end(),
                   tiny.values().begin()));

  CHECK_THROWS_AS(patchify(Tensor::zeros({10, 10, 1}), 3), std::invalid_argument);
}

TEST_CASE("vit_forward shapes and the L = 0 identity stack") {
  RunConfig config;
  config.vit_layers = 0;
  Corpus corpus = generate_corpus(2, 2);
  ModelParams params = ModelParams::init(config, corpus.vocab.size());
  const Tensor& image = corpus.samples[0].image;
  EncodedTokens tokens = vit_forward(image, params.vit, config);
  CHECK(tokens.visual.shape() == Shape{16, 64});
  CHECK(tokens.experts.shape() == Shape{config.num_expert, 64});

  // with no layers, the outputs are exactly the embedded inputs
  Tensor patches = patchify(image, config.patch);
  Tensor expect_visual =
      add(add(matmul(patches, params.vit.patch_proj),
              slice(params.vit.pos_emb, 0, 0, 16)),
          broadcast_to(slice(params.vit.seg_emb, 0, 0, 1), {16, 64}));
  CHECK(std::equal(tokens.visual.values().begin(), tokens.visual.values().end(),
                   expect_visual.values().begin()));
}

TEST_CASE("self-attention rows sum to one per head") {
  RunConfig config;
  Corpus corpus = generate_corpus(4, 2);
  ModelParams params = ModelParams::init(config, corpus.vocab.size());
  std::vector<Tensor> attention;
  vit_forward(corpus.samples[0].image, params.vit, config, &attention);
  REQUIRE(attention.size() == static_cast<std::size_t>(config.vit_layers));
  const std::int64_t t = 16 + config.num_expert;
  for (const auto& probs : attention) {
    CHECK(probs.shape() == Shape{config.heads, t, t});
    const auto v = probs.values();
    for (std::int64_t h = 0; h < config.heads; ++h) {
      for (std::int64_t q = 0; q < t; ++q) {
        double sum = 0;
        for (std::int64_t k = 0; k < t; ++k) sum += v[(h * t + q) * t + k];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("embed_to_bilinear") {
  std::mt19937 rng(4);
  EmbedParams params{Tensor::rand_uniform({6, 8}, rng, -1, 1, true),
                     Tensor::rand_uniform({8}, rng, -1, 1, true)};
  EncodedTokens tokens{Tensor::rand_uniform({5, 6}, rng, -1, 1),
                       Tensor::rand_uniform({3, 6}, rng, -1, 1)};
  EncodedTokens out = embed_to_bilinear(tokens, params);
  CHECK(out.visual.shape() == Shape{5, 8});
  CHECK(out.experts.shape() == Shape{3, 8});
  for (float v : out.visual.values()) CHECK(v >= 0.0f);
  for (float v : out.experts.values()) CHECK(v >= 0.0f);

  EmbedParams zero{Tensor::zeros({6, 8}), Tensor::zeros({8})};
  EncodedTokens dark = embed_to_bilinear(tokens, zero);
  for (float v : dark.visual.values()) CHECK(v == 0.0f);
}

TEST_CASE("expert_attention_map") {
  std::mt19937 rng(6);
  Tensor z_e = Tensor::rand_uniform({3, 8}, rng, -1, 1);
  Tensor z_v = Tensor::rand_uniform({5, 8}, rng, -1, 1);
  Tensor att = expert_attention_map(z_e, z_v);
  CHECK(att.shape() == Shape{3, 5});
  for (int m = 0; m < 3; ++m) {
    double sum = 0;
    for (int n = 0; n < 5; ++n) sum += att.values()[m * 5 + n];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    // argmax agrees with brute-force dot products
    int best = 0;
    double best_dot = -1e30;
    for (int n = 0; n < 5; ++n) {
      double dot = 0;
      for (int d = 0; d < 8; ++d) {
        dot += static_cast<double>(z_e.values()[m * 8 + d]) * z_v.values()[n * 8 + d];
      }
      if (dot > best_dot) {
        best_dot = dot;
        best = n;
      }
    }
    int got = 0;
    for (int n = 0; n < 5; ++n) {
      if (att.values()[m * 5 + n] > att.values()[m * 5 + got]) got = n;
    }
    CHECK(got == best);
  }

  // identical visual rows -> uniform attention
  Tensor same = broadcast_to(slice(z_v, 0, 0, 1), {5, 8});
  Tensor uniform = expert_attention_map(z_e, same);
  for (float v : uniform.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-5));
}

TEST_CASE("expert permutation moves expert outputs and fixes visuals") {
  RunConfig config;
  config.num_expert = 4;
  Corpus corpus = generate_corpus(5, 2);
  ModelParams params = ModelParams::init(config, corpus.vocab.size());
  const Tensor& image = corpus.samples[0].image;
  EncodedTokens base = vit_forward(image, params.vit, config);

  // rotate expert token rows together with their position rows
  const std::vector<int> perm{1, 2, 3, 0};
  const std::int64_t d = config.dim;
  const std::int64_t n = config.n_patches();
  ModelParams permuted = ModelParams::init(config, corpus.vocab.size());
  {
    auto src = params.vit.expert_tokens.values();
    auto dst = permuted.vit.expert_tokens.values_mut();
    for (int m = 0; m < 4; ++m) {
      std::copy(src.begin() + perm[m] * d, src.begin() + (perm[m] + 1) * d,
                dst.begin() + m * d);
    }
  }
  {
    auto src = params.vit.pos_emb.values();
    auto dst = permuted.vit.pos_emb.values_mut();
    std::copy(src.begin(), src.begin() + n * d, dst.begin());
    for (int m = 0; m < 4; ++m) {
      std::copy(src.begin() + (n + perm[m]) * d, src.begin() + (n + perm[m] + 1) * d,
                dst.begin() + (n + m) * d);
    }
  }
  EncodedTokens moved = vit_forward(image, permuted.vit, config);
  CHECK(allclose(moved.visual.values(), base.visual.values(), 1e-5));
  for (int m = 0; m < 4; ++m) {
    for (std::int64_t j = 0; j < d; ++j) {
      CHECK(moved.experts.values()[m * d + j] ==
            doctest::Approx(base.experts.values()[perm[m] * d + j]).epsilon(1e-4));
    }
  }
}

TEST_CASE("vit gradients match finite differences") {
  RunConfig config = gradcheck_config();
  ModelParams params = ModelParams::init(config, 8);
  std::mt19937 rng(21);
  Tensor image = Tensor::rand_uniform({4, 4, 1}, rng, 0, 1);
  Tensor probe = Tensor::rand_uniform({config.num_expert, config.dim}, rng, 0.5f, 1.5f);
  Tensor probe_v = Tensor::rand_uniform({4, config.dim}, rng, 0.5f, 1.5f);
  auto loss_fn = [&] {
    EncodedTokens tokens = vit_forward(image, params.vit, config);
    return add(sum_all(hadamard(tokens.experts, probe)),
               sum_all(hadamard(tokens.visual, probe_v)));
  };
  auto check = oracle::fd_check(
      {params.vit.expert_tokens, params.vit.patch_proj, params.vit.pos_emb,
       params.vit.seg_emb},
      loss_fn);
  CHECK(check.max_rel_err <= 1e-2);
  CHECK(check.checked > 0);
}
