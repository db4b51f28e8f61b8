#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metx/checkpoint.hpp"
#include "metx/config.hpp"
#include "metx/data.hpp"
#include "metx/metrics.hpp"
#include "metx/model.hpp"

namespace metx {

struct SplitIndices {
  std::vector<std::int64_t> train, val, test;
};

/// Seeded 80/10/10 partition by shuffled indices.
SplitIndices split_corpus(std::size_t n, std::uint64_t seed);

Corpus subset(const Corpus& corpus, std::span<const std::int64_t> indices);

struct TrainResult {
  RunConfig config;
  ModelParams params;
  float initial_ce = 0.0f;  // mean CE of the first batch, before any update
  float final_ce = 0.0f;    // mean CE of the last epoch
  std::vector<float> epoch_ce;
  double best_val_cider = -1.0;
  std::string last_path, best_path, metrics_path;
  bool aborted = false;
  std::string abort_reason;
};

/// Full training run: seeded corpus, per-sample tapes with batch-mean
/// gradients, Adam steps, a metrics log line per step, `last.metx` refreshed
/// per epoch and `best.metx` at the best validation CIDEr. Deterministic for
/// a fixed config. A non-finite loss or gradient aborts the run and keeps
/// the last completed epoch's checkpoint.
TrainResult train(const RunConfig& config);

struct EvalRecord {
  std::int64_t sample = 0;
  int winner = 0;
  std::vector<double> scores;
  std::string winner_text;
};

struct EvalResult {
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<EvalRecord> records;

  double metric(const std::string& name) const;
  std::string table_text() const;    // "metric  value" lines
  std::string records_text() const;  // one line per sample: id winner scores...
};

/// Generates a report per sample (expert voting, probability averaging, or
/// the single expert, per the config) and scores winners against references
/// with corpus BLEU-1..4, mean ROUGE-L and mean CIDEr (idf over references).
EvalResult evaluate(const ModelParams& params, const RunConfig& config,
                    const Corpus& corpus, std::span<const std::int64_t> indices);

struct LoadedModel {
  RunConfig config;
  Corpus corpus;
  ModelParams params;
};

/// Loads a checkpoint, regenerates its corpus, and errors when the stored
/// vocabulary width disagrees with the corpus.
LoadedModel load_model(const std::string& checkpoint_path);

struct AblationRow {
  std::string label;
  double bleu4 = 0.0, rouge = 0.0, cider = 0.0;
  double avg_delta = 0.0;
  bool has_delta = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string table_text() const;
};

/// Trains and evaluates the five-row grid {BASELINE, +BE, +BE+ETs,
/// +BE+ETs+OrL, +BE+ETs+OrL+EV} on one shared corpus and reports the mean
/// relative improvement over the baseline.
AblationResult ablate(const RunConfig& base);

struct GradCheckEntry {
  std::string layer;
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;  // relu-kink-straddling probes, excluded
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> param_groups;  // every parameter the sweep covered
  int seeds = 0;
  float step = 0.0f;
  double atol = 0.0;  // f32 fd noise floor; the relative bound applies above it
  double tolerance = 0.0;
  bool passed = false;
  std::string text() const;
};

/// Tiny-extent config for finite-difference sweeps (all extents <= 8).
RunConfig gradcheck_config();

/// Central-difference check of every layer type plus a full-model sweep over
/// every named parameter. Per entry the relative error is measured as the
/// excess of |analytic - fd| over `atol` (finite differences on f32 storage
/// carry rounding noise of roughly ulp/step) divided by max(|analytic|, |fd|,
/// 1e-6). Probes whose two evaluations straddle a relu kink are skipped (the
/// quotient is not a derivative there) and counted.
GradCheckReport gradcheck(const RunConfig& config, int n_seeds = 10,
                          float step = 1e-4f, double tolerance = 1e-2,
                          double atol = 5e-3);

struct GenerateResult {
  ExpertOutputs outputs;
  Tensor attention;  // [M, N] expert attention map
  std::string reference_text;
};

GenerateResult generate_for_sample(const ModelParams& params, const RunConfig& config,
                                   const Corpus& corpus, std::int64_t sample_index);

/// One plain-text numeric grid per expert: dir/expert_<i>.txt.
void write_attention_maps(const Tensor& attention, int grid_side,
                          const std::string& dir);

/// Mean over row pairs of their cosine similarity (expert-diversity metric).
double mean_pairwise_cosine(const Tensor& rows);

}  // namespace metx
