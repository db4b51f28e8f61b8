#include "metx/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace metx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::int32_t argmax_lowest(std::span<const double> row) {
  std::int32_t best = 0;
  for (std::int32_t j = 1; j < static_cast<std::int32_t>(row.size()); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace

Tensor adjust(const Tensor& expert_row, const Tensor& x, const AdjustParams& params) {
  require(expert_row.defined() && expert_row.rank() == 1,
          "adjust: expert_row must be [D]");
  require(x.defined() && x.rank() == 2, "adjust: x must be [T, D]");
  const std::int64_t d = expert_row.extent(0);
  Tensor gate = relu(matmul(reshape(expert_row, {1, d}), params.w_expert));  // [1, D]
  Tensor tokens = relu(matmul(x, params.w_input));                           // [T, D]
  return hadamard(gate, tokens);
}

Tensor adjust_batched(const Tensor& experts, const Tensor& x,
                      const AdjustParams& params) {
  require(experts.defined() && experts.rank() == 2,
          "adjust_batched: experts must be [M, D]");
  const std::int64_t m = experts.extent(0);
  const std::int64_t d = experts.extent(1);
  Tensor gate = reshape(relu(matmul(experts, params.w_expert)), {m, 1, d});
  if (x.rank() == 3) {
    require(x.extent(0) == m, "adjust_batched: per-expert x must have M streams");
    return hadamard(gate, relu(matmul(x, params.w_input)));
  }
  require(x.rank() == 2, "adjust_batched: x must be [M, T, D] or [T, D]");
  const std::int64_t t = x.extent(0);
  Tensor tokens = reshape(relu(matmul(x, params.w_input)), {1, t, d});
  return hadamard(gate, tokens);
}

Tensor decoder_forward_multi(const Tensor& f_e, const Tensor& f_v,
                             const std::vector<std::vector<std::int32_t>>& ids,
                             const DecoderParams& params, const RunConfig& config) {
  require(f_e.defined() && f_e.rank() == 2, "decoder_forward: f_e must be [M, D]");
  require(f_v.defined() && f_v.rank() == 2, "decoder_forward: f_v must be [N, D]");
  const std::int64_t m = f_e.extent(0);
  const std::int64_t d = f_e.extent(1);
  require(static_cast<std::int64_t>(ids.size()) == m,
          "decoder_forward: expected one id sequence per expert");
  require(!ids[0].empty(), "decoder_forward: empty input sequence");
  const std::int64_t t = static_cast<std::int64_t>(ids[0].size());
  if (t > config.t_max) {
    throw std::invalid_argument("decoder_forward: sequence length " +
                                std::to_string(t) + " exceeds t_max " +
                                std::to_string(config.t_max));
  }
  std::vector<std::int32_t> flat;
  flat.reserve(m * t);
  for (const auto& row : ids) {
    require(static_cast<std::int64_t>(row.size()) == t,
            "decoder_forward: ragged id sequences");
    require(row[0] == Vocab::kBos, "decoder_forward: input must begin with BOS");
    flat.insert(flat.end(), row.begin(), row.end());
  }

  Tensor words = reshape(embedding_lookup(params.word_emb, flat), {m, t, d});
  Tensor positions = slice(params.word_pos_emb, 0, 0, t);  // [T, D]
  Tensor e_r = add(words, positions);                      // [M, T, D]

  const AttnMask causal = AttnMask::causal(t);
  Tensor e_c;
  const std::size_t depth = params.layers.size();
  for (std::size_t i = 0; i < depth; ++i) {
    const auto& layer = params.layers[i];
    Tensor adjusted = adjust_batched(f_e, e_r, layer.adjust_word);
    Tensor masked = eba(adjusted, e_r, e_r, layer.eba_mask, &causal);
    Tensor e_mid = layer_norm(add(masked, e_r), layer.ln_mid_gain, layer.ln_mid_bias);
    Tensor visual = adjust_batched(f_e, f_v, layer.adjust_visual);  // [M, N, D]
    Tensor crossed = eba(e_mid, visual, visual, layer.eba_cross);
    e_c = layer_norm(add(crossed, e_mid), layer.ln_cross_gain, layer.ln_cross_bias);
    if (i + 1 < depth) {
      // word-stream update feeding the next layer; the head reads e_c instead
      Tensor fused = matmul(concat_last_axis(e_r, e_c), layer.w_fuse);
      e_r = layer_norm(add(fused, e_r), layer.ln_out_gain, layer.ln_out_bias);
    }
  }
  return add(matmul(e_c, params.out_proj_w), params.out_proj_b);  // [M, T, V]
}

Tensor decoder_forward(const Tensor& f_e, const Tensor& f_v,
                       std::span<const std::int32_t> report_ids,
                       const DecoderParams& params, const RunConfig& config) {
  const std::int64_t m = f_e.extent(0);
  std::vector<std::vector<std::int32_t>> ids(
      m, std::vector<std::int32_t>(report_ids.begin(), report_ids.end()));
  return decoder_forward_multi(f_e, f_v, ids, params, config);
}

std::vector<Report> generate_greedy(const Tensor& f_e, const Tensor& f_v,
                                    const DecoderParams& params,
                                    const RunConfig& config, const Vocab& vocab) {
  NoGradScope no_grad;
  const std::int64_t m = f_e.extent(0);
  const std::int64_t v = params.out_proj_w.extent(1);
  std::vector<Report> reports(m);
  for (std::int64_t ex = 0; ex < m; ++ex) {
    Tensor f_e_row = slice(f_e, 0, ex, ex + 1);  // [1, D]
    std::vector<std::int32_t> ids{Vocab::kBos};
    while (static_cast<int>(ids.size()) < config.t_max) {
      Tensor logits = decoder_forward_multi(f_e_row, f_v, {ids}, params, config);
      const std::int64_t t = static_cast<std::int64_t>(ids.size());
      auto vals = logits.values();
      std::vector<double> row(v);
      for (std::int64_t j = 0; j < v; ++j) row[j] = vals[(t - 1) * v + j];
      const std::int32_t next = argmax_lowest(row);
      ids.push_back(next);
      if (next == Vocab::kEos) break;
    }
    reports[ex].ids = std::move(ids);
    reports[ex].text = decode(reports[ex].ids, vocab);
  }
  return reports;
}

Report generate_averaged(const Tensor& f_e, const Tensor& f_v,
                         const DecoderParams& params, const RunConfig& config,
                         const Vocab& vocab) {
  NoGradScope no_grad;
  const std::int64_t m = f_e.extent(0);
  const std::int64_t v = params.out_proj_w.extent(1);
  std::vector<std::int32_t> ids{Vocab::kBos};
  while (static_cast<int>(ids.size()) < config.t_max) {
    std::vector<std::vector<std::int32_t>> per_expert(m, ids);
    Tensor logits = decoder_forward_multi(f_e, f_v, per_expert, params, config);
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    auto vals = logits.values();
    std::vector<double> mean_prob(v, 0.0);
    for (std::int64_t ex = 0; ex < m; ++ex) {
      const float* row = vals.data() + (ex * t + (t - 1)) * v;
      double mx = row[0];
      for (std::int64_t j = 1; j < v; ++j) mx = std::max<double>(mx, row[j]);
      double sum = 0.0;
      std::vector<double> e(v);
      for (std::int64_t j = 0; j < v; ++j) {
        e[j] = std::exp(static_cast<double>(row[j]) - mx);
        sum += e[j];
      }
      for (std::int64_t j = 0; j < v; ++j) mean_prob[j] += e[j] / sum;
    }
    const std::int32_t next = argmax_lowest(mean_prob);
    ids.push_back(next);
    if (next == Vocab::kEos) break;
  }
  Report report;
  report.ids = std::move(ids);
  report.text = decode(report.ids, vocab);
  return report;
}

}  // namespace metx
