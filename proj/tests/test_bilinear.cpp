#include <doctest.h>

#include <random>

#include "metx/bilinear.hpp"
#include "support/oracles.hpp"

using namespace metx;

namespace {

EBAParams random_params(std::mt19937& rng, std::int64_t d_q, std::int64_t d_k,
                        std::int64_t d_v, std::int64_t d_b, std::int64_t d_mid,
                        bool grad = false) {
  EBAParams p;
  p.w_key = Tensor::rand_uniform({d_k, d_b}, rng, -0.8f, 0.8f, grad);
  p.w_value = Tensor::rand_uniform({d_v, d_b}, rng, -0.8f, 0.8f, grad);
  p.w_query_key = Tensor::rand_uniform({d_q, d_b}, rng, -0.8f, 0.8f, grad);
  p.w_query_value = Tensor::rand_uniform({d_q, d_b}, rng, -0.8f, 0.8f, grad);
  p.w_mid = Tensor::rand_uniform({d_b, d_mid}, rng, -0.8f, 0.8f, grad);
  p.w_score = Tensor::rand_uniform({d_mid, 1}, rng, -0.8f, 0.8f, grad);
  p.w_channel = Tensor::rand_uniform({d_mid, d_b}, rng, -0.8f, 0.8f, grad);
  return p;
}

std::vector<double> widen(std::span<const float> v) {
  return std::vector<double>(v.begin(), v.end());
}

oracle::EbaRefInputs ref_inputs(const Tensor& q, const Tensor& k, const Tensor& v,
                                const EBAParams& p, const AttnMask* mask) {
  oracle::EbaRefInputs in;
  in.b = q.extent(0);
  in.t_q = q.extent(1);
  in.t_k = k.extent(1);
  in.d_q = q.extent(2);
  in.d_k = k.extent(2);
  in.d_v = v.extent(2);
  in.d_b = p.w_key.extent(1);
  in.d_mid = p.w_mid.extent(1);
  in.query = widen(q.values());
  in.key = widen(k.values());
  in.value = widen(v.values());
  in.w_key = widen(p.w_key.values());
  in.w_value = widen(p.w_value.values());
  in.w_query_key = widen(p.w_query_key.values());
  in.w_query_value = widen(p.w_query_value.values());
  in.w_mid = widen(p.w_mid.values());
  in.w_score = widen(p.w_score.values());
  in.w_channel = widen(p.w_channel.values());
  in.mask = mask;
  return in;
}

}  // namespace

TEST_CASE("eba shape contract") {
  std::mt19937 rng(1);
  EBAParams p = random_params(rng, 64, 64, 64, 64, 32);
  Tensor q = Tensor::rand_uniform({1, 7, 64}, rng, -1, 1);
  Tensor kv = Tensor::rand_uniform({1, 16, 64}, rng, -1, 1);
  Tensor out = eba(q, kv, kv, p);
  CHECK(out.shape() == Shape{1, 7, 64});
}

TEST_CASE("single-key attention is the identity weighting") {
  std::mt19937 rng(2);
  EBAParams p = random_params(rng, 5, 5, 5, 6, 3);
  Tensor q = Tensor::rand_uniform({2, 3, 5}, rng, -1, 1);
  Tensor kv = Tensor::rand_uniform({2, 1, 5}, rng, -1, 1);
  EBAOutputs out = eba_detailed(q, kv, kv, p);
  for (float a : out.alpha.values()) CHECK(a == 1.0f);
  const auto ref = oracle::eba_reference(ref_inputs(q, kv, kv, p, nullptr));
  const auto got = out.out.values();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(got[i] - ref[i]) <= 1e-5);
  }
}

TEST_CASE("eba matches the explicit loop reference on random shapes") {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> dim(1, 6);
    const std::int64_t b = dim(rng), t_q = dim(rng), t_k = dim(rng);
    const std::int64_t d = dim(rng) + 1, d_b = dim(rng) + 1, d_mid = dim(rng);
    EBAParams p = random_params(rng, d, d, d, d_b, d_mid);
    Tensor q = Tensor::rand_uniform({b, t_q, d}, rng, -1, 1);
    Tensor k = Tensor::rand_uniform({b, t_k, d}, rng, -1, 1);
    Tensor v = Tensor::rand_uniform({b, t_k, d}, rng, -1, 1);

    AttnMask mask;
    const bool use_mask = trial % 2 == 1;
    if (use_mask) {
      mask.t_q = t_q;
      mask.t_k = t_k;
      mask.allow.assign(t_q * t_k, 0);
      std::uniform_int_distribution<int> coin(0, 1);
      for (std::int64_t qq = 0; qq < t_q; ++qq) {
        bool any = false;
        for (std::int64_t kk = 0; kk < t_k; ++kk) {
          mask.allow[qq * t_k + kk] = coin(rng);
          any = any || mask.allow[qq * t_k + kk];
        }
        if (!any) mask.allow[qq * t_k] = 1;
      }
    }
    const AttnMask* mp = use_mask ? &mask : nullptr;
    Tensor out = eba(q, k, v, p, mp);
    const auto ref = oracle::eba_reference(ref_inputs(q, k, v, p, mp));
    const auto got = out.values();
    REQUIRE(got.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(got[i] - ref[i]) <= 1e-5);
    }
  }
}

TEST_CASE("alpha rows sum to one, beta lies in (0,1)") {
  std::mt19937 rng(4);
  EBAParams p = random_params(rng, 6, 6, 6, 8, 4);
  Tensor q = Tensor::rand_uniform({2, 4, 6}, rng, -1, 1);
  Tensor kv = Tensor::rand_uniform({2, 5, 6}, rng, -1, 1);
  EBAOutputs out = eba_detailed(q, kv, kv, p);
  const auto alpha = out.alpha.values();
  for (int row = 0; row < 2 * 4; ++row) {
    double sum = 0;
    for (int k = 0; k < 5; ++k) sum += alpha[row * 5 + k];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
  for (float bval : out.beta.values()) {
    CHECK(bval > 0.0f);
    CHECK(bval < 1.0f);
  }
}

TEST_CASE("masked keys cannot influence the output") {
  std::mt19937 rng(5);
  EBAParams p = random_params(rng, 5, 5, 5, 6, 3);
  Tensor q = Tensor::rand_uniform({1, 3, 5}, rng, -1, 1);
  Tensor k = Tensor::rand_uniform({1, 4, 5}, rng, -1, 1);
  Tensor v = Tensor::rand_uniform({1, 4, 5}, rng, -1, 1);
  AttnMask mask;
  mask.t_q = 3;
  mask.t_k = 4;
  mask.allow.assign(12, 1);
  for (int qq = 0; qq < 3; ++qq) mask.allow[qq * 4 + 2] = 0;  // forbid key 2

  Tensor base = eba(q, k, v, p, &mask);
  auto kv2 = std::vector<float>(k.values().begin(), k.values().end());
  auto vv2 = std::vector<float>(v.values().begin(), v.values().end());
  for (int d = 0; d < 5; ++d) {
    kv2[2 * 5 + d] = 0.77f + d;
    vv2[2 * 5 + d] = -3.0f + d;
  }
  Tensor changed = eba(q, Tensor::from_data({1, 4, 5}, kv2),
                       Tensor::from_data({1, 4, 5}, vv2), p, &mask);
  const auto a = base.values();
  const auto b = changed.values();
  CHECK(std::equal(a.begin(), a.end(), b.begin()));

  AttnMask dead;
  dead.t_q = 1;
  dead.t_k = 2;
  dead.allow = {0, 0};
  Tensor q1 = Tensor::rand_uniform({1, 1, 5}, rng, -1, 1);
  Tensor k1 = Tensor::rand_uniform({1, 2, 5}, rng, -1, 1);
  CHECK_THROWS_AS(eba(q1, k1, k1, p, &dead), std::invalid_argument);
}

TEST_CASE("query rows are independent experts") {
  std::mt19937 rng(6);
  EBAParams p = random_params(rng, 5, 5, 5, 6, 3);
  Tensor q = Tensor::rand_uniform({1, 4, 5}, rng, -1, 1);
  Tensor kv = Tensor::rand_uniform({1, 3, 5}, rng, -1, 1);
  Tensor base = eba(q, kv, kv, p);

  const std::vector<int> perm{2, 0, 3, 1};
  std::vector<float> qp(4 * 5);
  for (int m = 0; m < 4; ++m) {
    for (int d = 0; d < 5; ++d) qp[m * 5 + d] = q.values()[perm[m] * 5 + d];
  }
  Tensor moved = eba(Tensor::from_data({1, 4, 5}, qp), kv, kv, p);
  for (int m = 0; m < 4; ++m) {
    for (int d = 0; d < 6; ++d) {
      CHECK(moved.values()[m * 6 + d] == base.values()[perm[m] * 6 + d]);
    }
  }
}

TEST_CASE("bilinear encoder forward") {
  std::mt19937 rng(7);
  const std::int64_t m = 3, n = 5, d = 6, d_mid = 3;
  BilinearEncoderParams params;
  for (int layer = 0; layer < 2; ++layer) {
    BilinearEncLayerParams lp;
    lp.eba = random_params(rng, d, d, d, d, d_mid);
    lp.w_fuse = Tensor::rand_uniform({2 * d, d}, rng, -0.8f, 0.8f);
    lp.ln_gain = Tensor::ones({d});
    lp.ln_bias = Tensor::zeros({d});
    params.layers.push_back(lp);
  }
  Tensor z_e = Tensor::rand_uniform({m, d}, rng, -1, 1);
  Tensor z_v = Tensor::rand_uniform({n, d}, rng, -1, 1);
  auto [f_e, f_v] = bilinear_encoder_forward(z_e, z_v, params);
  CHECK(f_e.shape() == Shape{m, d});
  CHECK(f_v.shape() == Shape{n, d});

  // one layer equals a manual application of the two update rules
  BilinearEncoderParams single;
  single.layers.push_back(params.layers[0]);
  auto [e1, v1] = bilinear_encoder_forward(z_e, z_v, single);
  Tensor manual_e = reshape(eba(reshape(z_e, {1, m, d}), reshape(z_v, {1, n, d}),
                                reshape(z_v, {1, n, d}), single.layers[0].eba),
                            {m, d});
  Tensor pooled = broadcast_to(reshape(mean_over_axis(z_e, 0), {1, d}), {n, d});
  Tensor manual_v = layer_norm(
      add(matmul(concat_last_axis(pooled, z_v), single.layers[0].w_fuse), z_v),
      single.layers[0].ln_gain, single.layers[0].ln_bias);
  CHECK(std::equal(e1.values().begin(), e1.values().end(),
                   manual_e.values().begin()));
  CHECK(std::equal(v1.values().begin(), v1.values().end(),
                   manual_v.values().begin()));
}

TEST_CASE("bilinear encoder gradients match finite differences") {
  std::mt19937 rng(8);
  const std::int64_t m = 3, n = 4, d = 4, d_mid = 2;
  BilinearEncoderParams params;
  BilinearEncLayerParams lp;
  lp.eba = random_params(rng, d, d, d, d, d_mid, true);
  lp.w_fuse = Tensor::rand_uniform({2 * d, d}, rng, -0.8f, 0.8f, true);
  lp.ln_gain = Tensor::rand_uniform({d}, rng, 0.5f, 1.5f, true);
  lp.ln_bias = Tensor::rand_uniform({d}, rng, -0.5f, 0.5f, true);
  params.layers.push_back(lp);
  Tensor z_e = Tensor::rand_uniform({m, d}, rng, -1, 1, true);
  Tensor z_v = Tensor::rand_uniform({n, d}, rng, -1, 1, true);
  Tensor re = Tensor::rand_uniform({m, d}, rng, 0.5f, 1.5f);
  Tensor rv = Tensor::rand_uniform({n, d}, rng, 0.5f, 1.5f);
  auto loss_fn = [&] {
    auto [f_e, f_v] = bilinear_encoder_forward(z_e, z_v, params);
    return add(sum_all(hadamard(f_e, re)), sum_all(hadamard(f_v, rv)));
  };
  auto check = oracle::fd_check(
      {z_e, z_v, lp.eba.w_key, lp.eba.w_value, lp.eba.w_query_key,
       lp.eba.w_query_value, lp.eba.w_mid, lp.eba.w_score, lp.eba.w_channel,
       lp.w_fuse, lp.ln_gain, lp.ln_bias},
      loss_fn);
  CHECK(check.max_rel_err <= 1e-2);
  CHECK(check.checked > 0);
}
