#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "metx/tensor.hpp"

namespace metx {

/// token <-> id bijection with fixed reserved ids.
struct Vocab {
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, std::int32_t> token_to_id;

  std::int32_t size() const { return static_cast<std::int32_t>(id_to_token.size()); }
  std::int32_t id_of(const std::string& token) const;  // UNK when absent
  const std::string& token(std::int32_t id) const;
};

/// Layout of the synthetic scenes: a 2x2 grid of regions, each empty or
/// holding one shape in one color. The paired report is one sentence per
/// region in raster order.
struct GridSpec {
  int rows = 2;
  int cols = 2;
  int region_px = 32;
  int channels = 3;
  std::vector<std::string> shapes{"square", "disc", "cross", "ring"};
  std::vector<std::string> colors{"red", "green", "blue"};

  int height() const { return rows * region_px; }
  int width() const { return cols * region_px; }
};

// shape placement jitter, sampled uniformly per occupied region
inline constexpr int kJitterRange = 3;   // dx, dy in [-3, 3]
inline constexpr int kHalfMin = 7;       // half-extent in [7, 13]
inline constexpr int kHalfMax = 13;

struct Sample {
  Tensor image;  // [H, W, C], values in [0, 1]
  std::string report_text;
  std::vector<std::int32_t> report_ids;  // BOS ... EOS
};

struct Corpus {
  GridSpec grid;
  Vocab vocab;
  std::vector<Sample> samples;
};

struct Batch {
  Tensor images;  // [B, H, W, C]
  std::vector<std::vector<std::int32_t>> reports;  // padded to t_max
  std::vector<std::int32_t> lengths;               // true lengths incl BOS/EOS
  std::vector<std::int64_t> sample_indices;
};

/// Deterministic synthetic corpus: same (seed, n, grid) always yields the
/// same bits. Report text is fully determined by the image content.
Corpus generate_corpus(std::uint64_t seed, int n_samples, const GridSpec& grid = {});

Vocab build_vocab(const std::vector<std::string>& reports);

std::vector<std::int32_t> encode(const std::string& text, const Vocab& vocab);
std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab);

std::vector<Batch> batchify(const Corpus& corpus, int batch_size,
                            std::uint64_t shuffle_seed, int t_max);

/// One line per sample: lowercase-hex little-endian f32 image payload, a tab,
/// then the report text. A header line carries the image extents.
void export_corpus(const Corpus& corpus, const std::string& path);
Corpus import_corpus(const std::string& path, const GridSpec& grid = {});

/// Renders one region's pixel block (region_px x region_px x channels) for a
/// given shape/color/jitter. Exposed so tests can invert images exactly.
std::vector<float> render_region_pixels(const GridSpec& grid, int shape, int color,
                                        int dx, int dy, int half);

/// The sentence templates, exposed for oracle use.
std::string occupied_sentence(const GridSpec& grid, int region, int shape, int color);
std::string empty_sentence(int region);
std::string region_name(int region);

}  // namespace metx
