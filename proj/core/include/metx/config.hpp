#pragma once

#include <cstdint>
#include <string>

namespace metx {

/// All architecture and training knobs. Serialized as flat `key = value`
/// lines; unknown keys are rejected so stale configs fail loudly.
struct RunConfig {
  std::uint64_t seed = 1;
  int epochs = 20;
  int batch_size = 16;
  float learning_rate = 1e-3f;
  float lambda = 2.0f;  // weight of the orthogonality penalty

  int num_expert = 7;   // M
  int dim = 64;         // D, ViT embedding width
  int heads = 4;        // h
  int vit_layers = 2;   // L
  int patch = 16;       // P
  int image_size = 64;  // H = W
  int channels = 3;     // C
  int dim_bilinear = 64;  // D_B
  int dim_mid = 32;       // D_mid
  int enc_layers = 2;     // bilinear encoder depth
  int dec_layers = 2;     // bilinear decoder depth
  int t_max = 48;

  int dataset_size = 500;
  bool use_bilinear_encoder = true;
  bool use_expert_tokens = true;
  bool use_orthogonal_loss = true;
  bool use_expert_voting = true;
  bool ce_token_normalize = true;  // divide the generation loss by token count
  std::string out_dir = "out";

  int n_patches() const {
    const int per_side = image_size / patch;
    return per_side * per_side;
  }
  int patch_dim() const { return patch * patch * channels; }

  /// Throws std::invalid_argument on any inconsistent combination.
  void validate() const;

  std::string to_string() const;
  static RunConfig from_string(const std::string& text);
  static RunConfig from_file(const std::string& path);
  void save(const std::string& path) const;

  /// Defaults with the reference learning rate (1e-4) instead of the faster
  /// desk-scale one.
  static RunConfig paper_preset();
};

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace metx
