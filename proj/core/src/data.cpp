#include "metx/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace metx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

// Paints one shape into a region-sized block. Colors are pure channel hits so
// the rendering is exactly invertible.
void paint_region(float* block, const GridSpec& grid, int shape, int color, int dx,
                  int dy, int half) {
  const int n = grid.region_px;
  const int c = grid.channels;
  const int cy = n / 2 + dy;
  const int cx = n / 2 + dx;
  const int thick = std::max(2, half / 3);
  const int inner = std::max(2, (half * 55) / 100);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int ay = std::abs(y - cy);
      const int ax = std::abs(x - cx);
      bool hit = false;
      switch (shape) {
        case 0:  // square
          hit = ay <= half && ax <= half;
          break;
        case 1:  // disc
          hit = ay * ay + ax * ax <= half * half;
          break;
        case 2:  // cross
          hit = (ax <= thick && ay <= half) || (ay <= thick && ax <= half);
          break;
        case 3: {  // ring
          const int d2 = ay * ay + ax * ax;
          hit = d2 <= half * half && d2 > inner * inner;
          break;
        }
        default:
          break;
      }
      if (hit) block[(y * n + x) * c + color] = 1.0f;
    }
  }
}

}  // namespace

std::int32_t Vocab::id_of(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || id >= size()) {
    throw std::invalid_argument("Vocab::token: id " + std::to_string(id) +
                                " out of range");
  }
  return id_to_token[id];
}

std::string region_name(int region) {
  static const char* kNames[4] = {"upper left", "upper right", "lower left",
                                  "lower right"};
  require(region >= 0 && region < 4, "region_name: region out of range");
  return kNames[region];
}

std::string occupied_sentence(const GridSpec& grid, int region, int shape, int color) {
  return "there is a " + grid.colors[color] + " " + grid.shapes[shape] + " in the " +
         region_name(region) + " .";
}

std::string empty_sentence(int region) {
  return "the " + region_name(region) + " is clear .";
}

std::vector<float> render_region_pixels(const GridSpec& grid, int shape, int color,
                                        int dx, int dy, int half) {
  std::vector<float> block(grid.region_px * grid.region_px * grid.channels, 0.0f);
  paint_region(block.data(), grid, shape, color, dx, dy, half);
  return block;
}

Vocab build_vocab(const std::vector<std::string>& reports) {
  Vocab vocab;
  vocab.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  std::set<std::string> words;
  for (const auto& r : reports) {
    for (auto& w : split_words(r)) words.insert(w);
  }
  for (const auto& w : words) vocab.id_to_token.push_back(w);
  for (std::int32_t i = 0; i < vocab.size(); ++i) {
    vocab.token_to_id[vocab.id_to_token[i]] = i;
  }
  return vocab;
}

std::vector<std::int32_t> encode(const std::string& text, const Vocab& vocab) {
  std::vector<std::int32_t> ids{Vocab::kBos};
  for (auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
  ids.push_back(Vocab::kEos);
  return ids;
}

std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::int32_t id : ids) {
    if (id == Vocab::kEos) break;
    if (id == Vocab::kBos || id == Vocab::kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

Corpus generate_corpus(std::uint64_t seed, int n_samples, const GridSpec& grid) {
  require(n_samples >= 1, "generate_corpus: n_samples must be >= 1");
  require(grid.rows == 2 && grid.cols == 2,
          "generate_corpus: only the 2x2 region grid is supported");
  const int h = grid.height();
  const int w = grid.width();
  const int c = grid.channels;
  const int n_states = 1 + static_cast<int>(grid.shapes.size() * grid.colors.size());

  Corpus corpus;
  corpus.grid = grid;
  corpus.samples.resize(n_samples);
  std::vector<std::string> reports(n_samples);

  for (int s = 0; s < n_samples; ++s) {
    std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(seed, s)));
    std::uniform_int_distribution<int> state_dist(0, n_states - 1);
    std::uniform_int_distribution<int> jitter_dist(-kJitterRange, kJitterRange);
    std::uniform_int_distribution<int> half_dist(kHalfMin, kHalfMax);

    std::vector<float> canvas(h * w * c, 0.0f);
    std::string report;
    for (int region = 0; region < grid.rows * grid.cols; ++region) {
      const int state = state_dist(rng);
      if (!report.empty()) report += ' ';
      if (state == 0) {
        report += empty_sentence(region);
        continue;
      }
      const int shape = (state - 1) / static_cast<int>(grid.colors.size());
      const int color = (state - 1) % static_cast<int>(grid.colors.size());
      const int dx = jitter_dist(rng);
      const int dy = jitter_dist(rng);
      const int half = half_dist(rng);
      const auto block = render_region_pixels(grid, shape, color, dx, dy, half);
      const int row0 = (region / grid.cols) * grid.region_px;
      const int col0 = (region % grid.cols) * grid.region_px;
      for (int y = 0; y < grid.region_px; ++y) {
        std::memcpy(canvas.data() + ((row0 + y) * w + col0) * c,
                    block.data() + y * grid.region_px * c,
                    grid.region_px * c * sizeof(float));
      }
      report += occupied_sentence(grid, region, shape, color);
    }
    corpus.samples[s].image = Tensor::from_data({h, w, c}, std::move(canvas));
    corpus.samples[s].report_text = report;
    reports[s] = std::move(report);
  }

  corpus.vocab = build_vocab(reports);
  for (int s = 0; s < n_samples; ++s) {
    corpus.samples[s].report_text = reports[s];
    corpus.samples[s].report_ids = encode(reports[s], corpus.vocab);
  }
  return corpus;
}

std::vector<Batch> batchify(const Corpus& corpus, int batch_size,
                            std::uint64_t shuffle_seed, int t_max) {
  require(batch_size >= 1, "batchify: batch_size must be >= 1");
  const auto n = static_cast<std::int64_t>(corpus.samples.size());
  std::vector<std::int64_t> order(n);
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937 rng(static_cast<std::uint32_t>(shuffle_seed));
  std::shuffle(order.begin(), order.end(), rng);

  const int h = corpus.grid.height();
  const int w = corpus.grid.width();
  const int c = corpus.grid.channels;
  std::vector<Batch> batches;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t b = std::min<std::int64_t>(batch_size, n - start);
    Batch batch;
    std::vector<float> images(b * h * w * c);
    for (std::int64_t i = 0; i < b; ++i) {
      const auto& sample = corpus.samples[order[start + i]];
      const auto ids = sample.report_ids;
      require(static_cast<int>(ids.size()) <= t_max,
              "batchify: report longer than t_max");
      auto img = sample.image.values();
      std::memcpy(images.data() + i * h * w * c, img.data(),
                  img.size() * sizeof(float));
      std::vector<std::int32_t> padded(t_max, Vocab::kPad);
      std::copy(ids.begin(), ids.end(), padded.begin());
      batch.reports.push_back(std::move(padded));
      batch.lengths.push_back(static_cast<std::int32_t>(ids.size()));
      batch.sample_indices.push_back(order[start + i]);
    }
    batch.images = Tensor::from_data({b, h, w, c}, std::move(images));
    batches.push_back(std::move(batch));
  }
  return batches;
}

void export_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("export_corpus: cannot open " + path);
  os << "metx-corpus 1 " << corpus.grid.height() << ' ' << corpus.grid.width() << ' '
     << corpus.grid.channels << '\n';
  static const char* kHex = "0123456789abcdef";
  std::string hex;
  for (const auto& sample : corpus.samples) {
    const auto vals = sample.image.values();
    hex.clear();
    hex.reserve(vals.size() * 8);
    for (float v : vals) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int b = 0; b < 4; ++b) {  // little-endian byte order
        const std::uint8_t byte = static_cast<std::uint8_t>(bits >> (8 * b));
        hex += kHex[byte >> 4];
        hex += kHex[byte & 0xF];
      }
    }
    os << hex << '\t' << sample.report_text << '\n';
  }
  if (!os) throw std::runtime_error("export_corpus: write failed for " + path);
}

Corpus import_corpus(const std::string& path, const GridSpec& grid) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("import_corpus: cannot open " + path);
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic;
  int version = 0, h = 0, w = 0, c = 0;
  hs >> magic >> version >> h >> w >> c;
  if (magic != "metx-corpus" || version != 1) {
    throw std::runtime_error("import_corpus: bad header in " + path);
  }
  if (h != grid.height() || w != grid.width() || c != grid.channels) {
    throw std::runtime_error("import_corpus: image extents in " + path +
                             " do not match the grid spec");
  }

  auto nibble = [&](char ch) -> std::uint32_t {
    if (ch >= '0' && ch <= '9') return ch - '0';
    if (ch >= 'a' && ch <= 'f') return 10 + (ch - 'a');
    throw std::runtime_error("import_corpus: bad hex digit in " + path);
  };

  Corpus corpus;
  corpus.grid = grid;
  std::vector<std::string> reports;
  std::string line;
  const std::size_t n_floats = static_cast<std::size_t>(h) * w * c;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab != n_floats * 8) {
      throw std::runtime_error("import_corpus: malformed record in " + path);
    }
    std::vector<float> vals(n_floats);
    for (std::size_t i = 0; i < n_floats; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        const std::uint32_t hi = nibble(line[i * 8 + b * 2]);
        const std::uint32_t lo = nibble(line[i * 8 + b * 2 + 1]);
        bits |= ((hi << 4) | lo) << (8 * b);
      }
      float v;
      std::memcpy(&v, &bits, sizeof(v));
      vals[i] = v;
    }
    Sample sample;
    sample.image = Tensor::from_data({h, w, c}, std::move(vals));
    sample.report_text = line.substr(tab + 1);
    reports.push_back(sample.report_text);
    corpus.samples.push_back(std::move(sample));
  }
  corpus.vocab = build_vocab(reports);
  for (auto& sample : corpus.samples) {
    sample.report_ids = encode(sample.report_text, corpus.vocab);
  }
  return corpus;
}

}  // namespace metx
