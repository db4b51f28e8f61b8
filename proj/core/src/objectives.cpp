#include "metx/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "metx/data.hpp"

namespace metx {

namespace {

constexpr double kNormEps = 1e-12;  // keeps row normalization differentiable

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor orthogonal_loss(const Tensor& z_e) {
  require(z_e.defined() && z_e.rank() == 2, "orthogonal_loss: want [M, D]");
  const std::int64_t m = z_e.extent(0);
  const std::int64_t d = z_e.extent(1);
  const auto vals = z_e.values();

  std::vector<double> inv_norm(m);
  std::vector<double> unit(m * d);
  for (std::int64_t i = 0; i < m; ++i) {
    double sq = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double v = vals[i * d + j];
      sq += v * v;
    }
    inv_norm[i] = 1.0 / std::sqrt(sq + kNormEps);
    for (std::int64_t j = 0; j < d; ++j) unit[i * d + j] = vals[i * d + j] * inv_norm[i];
  }
  std::vector<double> gram(m * m);
  double loss = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < m; ++j) {
      double g = 0.0;
      for (std::int64_t k = 0; k < d; ++k) g += unit[i * d + k] * unit[j * d + k];
      gram[i * m + j] = g;
      const double dev = g - (i == j ? 1.0 : 0.0);
      loss += dev * dev;
    }
  }
  loss /= static_cast<double>(m);

  auto cache_unit = std::make_shared<std::vector<double>>(std::move(unit));
  auto cache_gram = std::make_shared<std::vector<double>>(std::move(gram));
  auto cache_inv = std::make_shared<std::vector<double>>(std::move(inv_norm));
  auto bw = [cache_unit, cache_gram, cache_inv, m, d](detail::TensorNode& n) {
    detail::TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double gout = n.grad[0];
    const auto& unit = *cache_unit;
    const auto& gram = *cache_gram;
    const auto& inv = *cache_inv;
    // dL/dU = (4/M) (G - I) U, then back through the row normalization
    for (std::int64_t i = 0; i < m; ++i) {
      std::vector<double> du(d, 0.0);
      for (std::int64_t j = 0; j < m; ++j) {
        const double coef =
            4.0 / static_cast<double>(m) * (gram[i * m + j] - (i == j ? 1.0 : 0.0));
        for (std::int64_t k = 0; k < d; ++k) du[k] += coef * unit[j * d + k];
      }
      double dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) dot += du[k] * unit[i * d + k];
      for (std::int64_t k = 0; k < d; ++k) {
        p.grad[i * d + k] +=
            static_cast<float>(gout * inv[i] * (du[k] - unit[i * d + k] * dot));
      }
    }
  };
  return record_op({}, {static_cast<float>(loss)}, {z_e}, std::move(bw),
                   "orthogonal_loss");
}

Tensor ce_loss(const Tensor& logits, std::span<const std::int32_t> targets,
               bool normalize_by_tokens) {
  require(logits.defined() && logits.rank() == 3, "ce_loss: logits must be [M, T, V]");
  const std::int64_t m = logits.extent(0);
  const std::int64_t t = logits.extent(1);
  const std::int64_t v = logits.extent(2);
  require(static_cast<std::int64_t>(targets.size()) == t,
          "ce_loss: expected " + std::to_string(t) + " targets, got " +
              std::to_string(targets.size()));

  std::int64_t n_valid = 0;
  std::vector<float> mask(m * t, 0.0f);
  for (std::int64_t i = 0; i < t; ++i) {
    if (targets[i] != Vocab::kPad) ++n_valid;
  }
  if (n_valid == 0) throw std::invalid_argument("ce_loss: all targets are PAD");
  for (std::int64_t ex = 0; ex < m; ++ex) {
    for (std::int64_t i = 0; i < t; ++i) {
      if (targets[i] != Vocab::kPad) mask[ex * t + i] = 1.0f;
    }
  }
  std::vector<std::int32_t> tiled(m * t);
  for (std::int64_t ex = 0; ex < m; ++ex) {
    std::copy(targets.begin(), targets.end(), tiled.begin() + ex * t);
  }

  Tensor rowwise = cross_entropy_rowwise(reshape(logits, {m * t, v}), tiled);
  Tensor masked = hadamard(rowwise, Tensor::from_data({m * t}, std::move(mask)));
  const float denom = normalize_by_tokens
                          ? static_cast<float>(m) * static_cast<float>(n_valid)
                          : static_cast<float>(m);
  return scale(sum_all(masked), 1.0f / denom);
}

Tensor total_loss(const Tensor& ce, const Tensor& orl, float lambda) {
  require(lambda >= 0.0f, "total_loss: lambda must be >= 0");
  return add(ce, scale(orl, lambda));
}

void optimizer_step(std::vector<std::pair<std::string, Tensor>>& params,
                    AdamState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), state.step);
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), state.step);
  for (auto& [name, tensor] : params) {
    const auto g = tensor.grad();
    for (float gv : g) {
      if (!(gv - gv == 0.0f)) {
        throw std::runtime_error("optimizer_step: non-finite gradient in " + name);
      }
    }
    auto& [m1, m2] = state.moments[name];
    if (m1.empty()) {
      m1.assign(g.size(), 0.0f);
      m2.assign(g.size(), 0.0f);
    }
    auto vals = tensor.values_mut();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m1[i] = state.beta1 * m1[i] + (1.0f - state.beta1) * g[i];
      m2[i] = state.beta2 * m2[i] + (1.0f - state.beta2) * g[i] * g[i];
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      vals[i] -= static_cast<float>(state.learning_rate * mhat /
                                    (std::sqrt(vhat) + state.eps));
    }
  }
}

void zero_grads(std::vector<std::pair<std::string, Tensor>>& params) {
  for (auto& [name, tensor] : params) tensor.zero_grad();
}

}  // namespace metx
