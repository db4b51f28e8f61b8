#include "metx/model.hpp"

#include <stdexcept>

namespace metx {

namespace {

constexpr float kInitStd = 0.02f;

struct Registrar {
  std::vector<std::pair<std::string, Tensor>>& named;
  std::mt19937& rng;

  Tensor gauss(const std::string& name, Shape shape) {
    Tensor t = Tensor::randn(std::move(shape), rng, kInitStd, true);
    named.emplace_back(name, t);
    return t;
  }
  Tensor zeros(const std::string& name, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    named.emplace_back(name, t);
    return t;
  }
  Tensor ones(const std::string& name, Shape shape) {
    Tensor t = Tensor::ones(std::move(shape), true);
    named.emplace_back(name, t);
    return t;
  }
};

EBAParams init_eba(Registrar& reg, const std::string& prefix, std::int64_t d_in,
                   std::int64_t d_b, std::int64_t d_mid) {
  EBAParams p;
  p.w_key = reg.gauss(prefix + ".w_key", {d_in, d_b});
  p.w_value = reg.gauss(prefix + ".w_value", {d_in, d_b});
  p.w_query_key = reg.gauss(prefix + ".w_query_key", {d_in, d_b});
  p.w_query_value = reg.gauss(prefix + ".w_query_value", {d_in, d_b});
  p.w_mid = reg.gauss(prefix + ".w_mid", {d_b, d_mid});
  p.w_score = reg.gauss(prefix + ".w_score", {d_mid, 1});
  p.w_channel = reg.gauss(prefix + ".w_channel", {d_mid, d_b});
  return p;
}

AdjustParams init_adjust(Registrar& reg, const std::string& prefix, std::int64_t d) {
  AdjustParams p;
  p.w_expert = reg.gauss(prefix + ".w_expert", {d, d});
  p.w_input = reg.gauss(prefix + ".w_input", {d, d});
  return p;
}

}  // namespace

ModelParams ModelParams::init(const RunConfig& config, std::int32_t vocab_size) {
  config.validate();
  if (vocab_size < 4) throw std::invalid_argument("ModelParams: vocab_size < 4");
  ModelParams mp;
  mp.vocab_size = vocab_size;
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(config.seed, 0xA11CE)));
  Registrar reg{mp.named, rng};

  const std::int64_t d = config.dim;
  const std::int64_t n = config.n_patches();
  const std::int64_t m = config.num_expert;
  const std::int64_t db = config.dim_bilinear;
  const std::int64_t dmid = config.dim_mid;
  const std::int64_t v = vocab_size;

  mp.vit.patch_proj = reg.gauss("vit.patch_proj", {config.patch_dim(), d});
  mp.vit.expert_tokens = reg.gauss("vit.expert_tokens", {m, d});
  mp.vit.pos_emb = reg.gauss("vit.pos_emb", {n + m, d});
  mp.vit.seg_emb = reg.gauss("vit.seg_emb", {2, d});
  for (int l = 0; l < config.vit_layers; ++l) {
    const std::string prefix = "vit.layer" + std::to_string(l);
    MsaLayerParams lp;
    lp.ln1_gain = reg.ones(prefix + ".ln1.gain", {d});
    lp.ln1_bias = reg.zeros(prefix + ".ln1.bias", {d});
    lp.w_query = reg.gauss(prefix + ".attn.w_query", {d, d});
    lp.b_query = reg.zeros(prefix + ".attn.b_query", {d});
    lp.w_key = reg.gauss(prefix + ".attn.w_key", {d, d});
    lp.b_key = reg.zeros(prefix + ".attn.b_key", {d});
    lp.w_value = reg.gauss(prefix + ".attn.w_value", {d, d});
    lp.b_value = reg.zeros(prefix + ".attn.b_value", {d});
    lp.w_out = reg.gauss(prefix + ".attn.w_out", {d, d});
    lp.b_out = reg.zeros(prefix + ".attn.b_out", {d});
    lp.ln2_gain = reg.ones(prefix + ".ln2.gain", {d});
    lp.ln2_bias = reg.zeros(prefix + ".ln2.bias", {d});
    lp.w_mlp1 = reg.gauss(prefix + ".mlp.w1", {d, 4 * d});
    lp.b_mlp1 = reg.zeros(prefix + ".mlp.b1", {4 * d});
    lp.w_mlp2 = reg.gauss(prefix + ".mlp.w2", {4 * d, d});
    lp.b_mlp2 = reg.zeros(prefix + ".mlp.b2", {d});
    mp.vit.layers.push_back(std::move(lp));
  }

  mp.embed.weight = reg.gauss("embed.weight", {d, db});
  mp.embed.bias = reg.zeros("embed.bias", {db});

  if (config.use_bilinear_encoder) {
    for (int l = 0; l < config.enc_layers; ++l) {
      const std::string prefix = "benc.layer" + std::to_string(l);
      BilinearEncLayerParams lp;
      lp.eba = init_eba(reg, prefix + ".eba", db, db, dmid);
      lp.w_fuse = reg.gauss(prefix + ".w_fuse", {2 * db, db});
      lp.ln_gain = reg.ones(prefix + ".ln.gain", {db});
      lp.ln_bias = reg.zeros(prefix + ".ln.bias", {db});
      mp.benc.layers.push_back(std::move(lp));
    }
  }

  mp.dec.word_emb = reg.gauss("dec.word_emb", {v, db});
  mp.dec.word_pos_emb = reg.gauss("dec.word_pos_emb", {config.t_max, db});
  for (int l = 0; l < config.dec_layers; ++l) {
    const std::string prefix = "dec.layer" + std::to_string(l);
    DecoderLayerParams lp;
    lp.adjust_word = init_adjust(reg, prefix + ".adjust_word", db);
    lp.adjust_visual = init_adjust(reg, prefix + ".adjust_visual", db);
    lp.eba_mask = init_eba(reg, prefix + ".eba_mask", db, db, dmid);
    lp.eba_cross = init_eba(reg, prefix + ".eba_cross", db, db, dmid);
    lp.ln_mid_gain = reg.ones(prefix + ".ln_mid.gain", {db});
    lp.ln_mid_bias = reg.zeros(prefix + ".ln_mid.bias", {db});
    lp.ln_cross_gain = reg.ones(prefix + ".ln_cross.gain", {db});
    lp.ln_cross_bias = reg.zeros(prefix + ".ln_cross.bias", {db});
    lp.w_fuse = reg.gauss(prefix + ".w_fuse", {2 * db, db});
    lp.ln_out_gain = reg.ones(prefix + ".ln_out.gain", {db});
    lp.ln_out_bias = reg.zeros(prefix + ".ln_out.bias", {db});
    mp.dec.layers.push_back(std::move(lp));
  }
  mp.dec.out_proj_w = reg.gauss("dec.out_proj.weight", {db, v});
  mp.dec.out_proj_b = reg.zeros("dec.out_proj.bias", {v});
  return mp;
}

Tensor ModelParams::find(const std::string& name) const {
  for (const auto& [n, t] : named) {
    if (n == name) return t;
  }
  throw std::invalid_argument("ModelParams::find: no parameter named " + name);
}

ParamCensus param_census(const RunConfig& config, std::int32_t vocab_size) {
  const ModelParams params = ModelParams::init(config, vocab_size);
  ParamCensus census;
  std::vector<std::pair<std::string, std::int64_t>> modules;
  for (const auto& [name, tensor] : params.named) {
    census.per_tensor.emplace_back(name, tensor.size());
    census.total += tensor.size();
    const std::string module = name.substr(0, name.find('.'));
    bool found = false;
    for (auto& [mod, count] : modules) {
      if (mod == module) {
        count += tensor.size();
        found = true;
      }
    }
    if (!found) modules.emplace_back(module, tensor.size());
  }
  census.per_module = std::move(modules);
  return census;
}

EncodedFeatures encode_image(const Tensor& image, const ModelParams& params,
                             const RunConfig& config,
                             std::vector<Tensor>* vit_attention) {
  EncodedFeatures features;
  features.vit_tokens = vit_forward(image, params.vit, config, vit_attention);
  EncodedTokens embedded = embed_to_bilinear(features.vit_tokens, params.embed);
  if (config.use_bilinear_encoder) {
    auto [f_e, f_v] =
        bilinear_encoder_forward(embedded.experts, embedded.visual, params.benc);
    features.f_e = f_e;
    features.f_v = f_v;
  } else {
    features.f_e = embedded.experts;
    features.f_v = embedded.visual;
  }
  return features;
}

}  // namespace metx
