#include <doctest.h>

#include <cmath>
#include <random>

#include "metx/data.hpp"
#include "metx/objectives.hpp"
#include "support/oracles.hpp"

using namespace metx;

TEST_CASE("orthogonal loss closed forms") {
  // orthonormal rows -> 0
  Tensor ortho = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(std::abs(orthogonal_loss(ortho).item()) <= 1e-6);

  // M identical unit rows -> M - 1
  std::vector<float> same(7 * 4);
  for (int m = 0; m < 7; ++m) {
    same[m * 4 + 0] = 0.5f;
    same[m * 4 + 1] = 0.5f;
    same[m * 4 + 2] = 0.5f;
    same[m * 4 + 3] = 0.5f;
  }
  CHECK(orthogonal_loss(Tensor::from_data({7, 4}, same)).item() ==
        doctest::Approx(6.0).epsilon(1e-5));

  // rows at 60 degrees: 2 cos^2(60)/2 = 0.25
  const float c = 0.5f, s = std::sqrt(3.0f) / 2.0f;
  Tensor pair = Tensor::from_data({2, 2}, {1, 0, c, s});
  CHECK(orthogonal_loss(pair).item() == doctest::Approx(0.25).epsilon(1e-5));
}

TEST_CASE("orthogonal loss properties") {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z = Tensor::rand_uniform({4, 6}, rng, -1, 1);
    const float loss = orthogonal_loss(z).item();
    CHECK(loss >= 0.0f);

    // invariant to positive row rescaling
    std::vector<float> scaled(z.values().begin(), z.values().end());
    for (int j = 0; j < 6; ++j) scaled[1 * 6 + j] *= 3.5f;
    CHECK(orthogonal_loss(Tensor::from_data({4, 6}, scaled)).item() ==
          doctest::Approx(loss).epsilon(1e-4));
  }
}

TEST_CASE("orthogonal loss gradients match finite differences") {
  std::mt19937 rng(2);
  for (int seed = 0; seed < 5; ++seed) {
    Tensor z = Tensor::rand_uniform({3, 5}, rng, -1, 1, true);
    auto check = oracle::fd_check({z}, [&] { return orthogonal_loss(z); });
    CHECK(check.max_rel_err <= 1e-2);
  }
}

TEST_CASE("one orthogonality step reduces the pairwise cosine") {
  for (int seed = 1; seed <= 5; ++seed) {
    std::mt19937 rng(seed);
    std::vector<float> base(8), other(8);
    for (int j = 0; j < 8; ++j) {
      base[j] = std::uniform_real_distribution<float>(-1, 1)(rng);
      other[j] = base[j] + std::uniform_real_distribution<float>(-0.05f, 0.05f)(rng);
    }
    std::vector<float> both = base;
    both.insert(both.end(), other.begin(), other.end());
    Tensor z = Tensor::from_data({2, 8}, both, true);

    auto cosine = [&](const Tensor& t) {
      double dot = 0, na = 0, nb = 0;
      for (int j = 0; j < 8; ++j) {
        dot += static_cast<double>(t.values()[j]) * t.values()[8 + j];
        na += static_cast<double>(t.values()[j]) * t.values()[j];
        nb += static_cast<double>(t.values()[8 + j]) * t.values()[8 + j];
      }
      return std::abs(dot) / std::sqrt(na * nb);
    };
    const double before = cosine(z);
    {
      Tape tape;
      backward(orthogonal_loss(z));
    }
    AdamState adam;
    adam.learning_rate = 1e-2f;
    std::vector<std::pair<std::string, Tensor>> params{{"z", z}};
    optimizer_step(params, adam);
    CHECK(cosine(z) < before);
  }
}

TEST_CASE("generation loss closed forms") {
  // uniform logits -> ln V per token
  const std::int64_t v = 23;
  Tensor logits = Tensor::zeros({2, 3, v});
  std::vector<std::int32_t> targets{5, 6, 7};
  CHECK(ce_loss(logits, targets, true).item() ==
        doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-5));

  // near-one-hot correct logits -> loss near 0
  std::vector<float> hot(1 * 2 * 4, 0.0f);
  hot[0 * 4 + 1] = 30.0f;
  hot[1 * 4 + 2] = 30.0f;
  std::vector<std::int32_t> two{1, 2};
  CHECK(ce_loss(Tensor::from_data({1, 2, 4}, hot), two, true).item() <= 1e-5);

  // identical per-expert logits -> equals the single-expert loss
  std::mt19937 rng(3);
  Tensor one = Tensor::rand_uniform({1, 3, 5}, rng, -1, 1);
  Tensor dup = concat(one, one, 0);
  std::vector<std::int32_t> t3{1, 2, 3};
  CHECK(ce_loss(dup, t3, true).item() ==
        doctest::Approx(ce_loss(one, t3, true).item()).epsilon(1e-6));

  // PAD targets are excluded
  std::vector<std::int32_t> padded{1, 2, Vocab::kPad};
  Tensor wide = Tensor::rand_uniform({2, 3, 5}, rng, -1, 1);
  Tensor narrow = slice(wide, 1, 0, 2);
  std::vector<std::int32_t> trimmed{1, 2};
  CHECK(ce_loss(wide, padded, true).item() ==
        doctest::Approx(ce_loss(narrow, trimmed, true).item()).epsilon(1e-6));

  std::vector<std::int32_t> all_pad{Vocab::kPad, Vocab::kPad, Vocab::kPad};
  CHECK_THROWS_AS(ce_loss(wide, all_pad, true), std::invalid_argument);
}

TEST_CASE("combined objective") {
  Tensor ce = Tensor::scalar(1.0f);
  Tensor orl = Tensor::scalar(0.5f);
  CHECK(total_loss(ce, orl, 2.0f).item() == 2.0f);
  CHECK(total_loss(ce, orl, 0.0f).item() == ce.item());

  // gradient linearity: d(total)/dz == d(ce)/dz + lambda d(orl)/dz
  std::mt19937 rng(4);
  Tensor z = Tensor::rand_uniform({3, 4}, rng, -1, 1, true);
  Tensor probe = Tensor::rand_uniform({3, 4}, rng, 0.5f, 1.5f);
  auto fake_ce = [&] { return sum_all(hadamard(sigmoid(z), probe)); };
  std::vector<float> g_ce, g_orl, g_total;
  {
    Tape tape;
    backward(fake_ce());
    g_ce.assign(z.grad().begin(), z.grad().end());
    z.zero_grad();
  }
  {
    Tape tape;
    backward(orthogonal_loss(z));
    g_orl.assign(z.grad().begin(), z.grad().end());
    z.zero_grad();
  }
  {
    Tape tape;
    backward(total_loss(fake_ce(), orthogonal_loss(z), 2.0f));
    g_total.assign(z.grad().begin(), z.grad().end());
  }
  for (std::size_t i = 0; i < g_total.size(); ++i) {
    CHECK(g_total[i] == doctest::Approx(g_ce[i] + 2.0f * g_orl[i]).epsilon(1e-4));
  }
}

TEST_CASE("adam") {
  // zero grads leave the parameter untouched
  Tensor p = Tensor::from_data({2}, {1.0f, -2.0f}, true);
  std::vector<std::pair<std::string, Tensor>> params{{"p", p}};
  AdamState adam;
  optimizer_step(params, adam);
  CHECK(p.values()[0] == 1.0f);
  CHECK(p.values()[1] == -2.0f);

  // hand-checked first step: constant grad 1, lr 0.1 -> move of ~-0.1
  Tensor q = Tensor::scalar(0.0f, true);
  q.node()->ensure_grad();
  q.node()->grad[0] = 1.0f;
  std::vector<std::pair<std::string, Tensor>> qp{{"q", q}};
  AdamState fast;
  fast.learning_rate = 0.1f;
  optimizer_step(qp, fast);
  CHECK(q.item() == doctest::Approx(-0.1).epsilon(1e-4));

  // non-finite gradient names the parameter
  Tensor bad = Tensor::scalar(0.0f, true);
  bad.node()->ensure_grad();
  bad.node()->grad[0] = std::numeric_limits<float>::quiet_NaN();
  std::vector<std::pair<std::string, Tensor>> bp{{"vit.pos_emb", bad}};
  AdamState s2;
  try {
    optimizer_step(bp, s2);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("vit.pos_emb") != std::string::npos);
  }
}

TEST_CASE("adam trajectories are deterministic") {
  auto run = [] {
    std::mt19937 rng(5);
    Tensor w = Tensor::rand_uniform({4}, rng, -1, 1, true);
    std::vector<std::pair<std::string, Tensor>> params{{"w", w}};
    AdamState adam;
    for (int step = 0; step < 5; ++step) {
      zero_grads(params);
      {
        Tape tape;
        backward(sum_all(hadamard(w, w)));
      }
      optimizer_step(params, adam);
    }
    return std::vector<float>(w.values().begin(), w.values().end());
  };
  CHECK(run() == run());
}
