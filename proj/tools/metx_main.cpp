// metx command line: train / evaluate / generate / ablate / param-count /
// gradcheck / export-corpus over the multi-expert image-to-report model.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "metx/harness.hpp"
#include "metx/objectives.hpp"

namespace {

struct ConfigFlags {
  std::string config_path;
  metx::RunConfig config;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file (key = value lines)");
    app->add_option("--seed", config.seed, "RNG seed");
    app->add_option("--epochs", config.epochs, "Training epochs");
    app->add_option("--batch-size", config.batch_size, "Mini-batch size");
    app->add_option("--learning-rate", config.learning_rate, "Adam learning rate");
    app->add_option("--lambda", config.lambda, "Orthogonal loss weight");
    app->add_option("--num-expert", config.num_expert, "Expert token count M");
    app->add_option("--dataset-size", config.dataset_size, "Synthetic corpus size");
    app->add_option("--enc-layers", config.enc_layers, "Bilinear encoder depth");
    app->add_option("--dec-layers", config.dec_layers, "Bilinear decoder depth");
    app->add_option("--out", config.out_dir, "Output directory");
    app->add_flag("--bilinear-encoder,!--no-bilinear-encoder",
                  config.use_bilinear_encoder, "Toggle the bilinear encoder");
    app->add_flag("--expert-tokens,!--no-expert-tokens", config.use_expert_tokens,
                  "Toggle expert tokens (off forces M = 1)");
    app->add_flag("--orthogonal-loss,!--no-orthogonal-loss",
                  config.use_orthogonal_loss, "Toggle the orthogonal loss");
    app->add_flag("--expert-voting,!--no-expert-voting", config.use_expert_voting,
                  "Toggle metric-based expert voting");
  }

  // file first, then explicit flags override
  metx::RunConfig resolve(const CLI::App* app) {
    if (!config_path.empty()) {
      metx::RunConfig from_file = metx::RunConfig::from_file(config_path);
      auto keep = [&](const std::string& flag, auto member) {
        if (app->count(flag) > 0) from_file.*member = config.*member;
      };
      keep("--seed", &metx::RunConfig::seed);
      keep("--epochs", &metx::RunConfig::epochs);
      keep("--batch-size", &metx::RunConfig::batch_size);
      keep("--learning-rate", &metx::RunConfig::learning_rate);
      keep("--lambda", &metx::RunConfig::lambda);
      keep("--num-expert", &metx::RunConfig::num_expert);
      keep("--dataset-size", &metx::RunConfig::dataset_size);
      keep("--enc-layers", &metx::RunConfig::enc_layers);
      keep("--dec-layers", &metx::RunConfig::dec_layers);
      keep("--out", &metx::RunConfig::out_dir);
      keep("--bilinear-encoder", &metx::RunConfig::use_bilinear_encoder);
      keep("--expert-tokens", &metx::RunConfig::use_expert_tokens);
      keep("--orthogonal-loss", &metx::RunConfig::use_orthogonal_loss);
      keep("--expert-voting", &metx::RunConfig::use_expert_voting);
      config = from_file;
    }
    config.validate();
    return config;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-expert image-to-report transformer"};
  app.require_subcommand(1);

  ConfigFlags train_flags, ablate_flags, census_flags;
  auto* cmd_train = app.add_subcommand("train", "Train on the synthetic corpus");
  train_flags.attach(cmd_train);

  auto* cmd_eval = app.add_subcommand("evaluate", "Score a checkpoint on the test split");
  std::string eval_checkpoint, eval_corpus, eval_out;
  cmd_eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  cmd_eval->add_option("--corpus", eval_corpus, "Evaluate on an exported corpus file");
  cmd_eval->add_option("--out", eval_out, "Directory for the metric table and records");

  auto* cmd_gen = app.add_subcommand("generate", "Per-expert reports for one sample");
  std::string gen_checkpoint, gen_attention;
  std::int64_t gen_sample = 0;
  cmd_gen->add_option("--checkpoint", gen_checkpoint, "Checkpoint file")->required();
  cmd_gen->add_option("--sample", gen_sample, "Sample index into the corpus");
  cmd_gen->add_option("--attention-out", gen_attention,
                      "Directory for per-expert attention grids");

  auto* cmd_ablate = app.add_subcommand("ablate", "Run the five-row component grid");
  ablate_flags.attach(cmd_ablate);

  auto* cmd_census = app.add_subcommand("param-count", "Trainable parameter census");
  census_flags.attach(cmd_census);
  bool census_per_tensor = false;
  cmd_census->add_flag("--per-tensor", census_per_tensor, "List every tensor");

  auto* cmd_grad = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  int grad_seeds = 10;
  float grad_step = 1e-4f;
  double grad_tol = 1e-2;
  cmd_grad->add_option("--seeds", grad_seeds, "Seed count");
  cmd_grad->add_option("--step", grad_step, "Central-difference step");
  cmd_grad->add_option("--tolerance", grad_tol, "Max relative error allowed");

  auto* cmd_export = app.add_subcommand("export-corpus", "Write the corpus as records");
  std::uint64_t export_seed = 1;
  int export_n = 100;
  std::string export_path = "corpus.txt";
  cmd_export->add_option("--seed", export_seed, "Corpus seed");
  cmd_export->add_option("--n", export_n, "Sample count");
  cmd_export->add_option("--out", export_path, "Output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_train->parsed()) {
      const metx::RunConfig config = train_flags.resolve(cmd_train);
      const metx::TrainResult result = metx::train(config);
      config.save(config.out_dir + "/config.txt");
      if (result.aborted) {
        std::cerr << "training aborted: " << result.abort_reason << '\n'
                  << "last good checkpoint: " << result.last_path << '\n';
        return 1;
      }
      std::printf("trained %d epochs, ce %.4f -> %.4f, best val cider %.4f\n",
                  config.epochs, result.initial_ce, result.final_ce,
                  result.best_val_cider);
      std::printf("checkpoints: %s, %s\n", result.last_path.c_str(),
                  result.best_path.c_str());
      return 0;
    }
    if (cmd_eval->parsed()) {
      metx::LoadedModel loaded = metx::load_model(eval_checkpoint);
      metx::Corpus corpus = eval_corpus.empty()
                                ? std::move(loaded.corpus)
                                : metx::import_corpus(eval_corpus);
      if (corpus.vocab.size() != loaded.params.vocab_size) {
        throw std::runtime_error("evaluate: corpus vocabulary does not match the checkpoint");
      }
      const metx::SplitIndices split =
          metx::split_corpus(corpus.samples.size(), loaded.config.seed);
      const auto& indices = eval_corpus.empty() ? split.test : [&] {
        static std::vector<std::int64_t> all;
        all.clear();
        for (std::size_t i = 0; i < corpus.samples.size(); ++i) all.push_back(i);
        return all;
      }();
      const metx::EvalResult result =
          metx::evaluate(loaded.params, loaded.config, corpus, indices);
      std::cout << result.table_text();
      if (!eval_out.empty()) {
        std::filesystem::create_directories(eval_out);
        write_text(eval_out + "/metrics.txt", result.table_text());
        write_text(eval_out + "/records.txt", result.records_text());
      }
      return 0;
    }
    if (cmd_gen->parsed()) {
      metx::LoadedModel loaded = metx::load_model(gen_checkpoint);
      const metx::GenerateResult result = metx::generate_for_sample(
          loaded.params, loaded.config, loaded.corpus, gen_sample);
      const metx::TokenList ref = metx::tokenize(result.reference_text);
      for (std::size_t ex = 0; ex < result.outputs.reports.size(); ++ex) {
        const auto& report = result.outputs.reports[ex];
        std::printf("expert %zu  vote %.4f  bleu4 %.4f  %s\n", ex,
                    result.outputs.votes[ex],
                    metx::bleu_sentence(metx::tokenize(report.text), ref),
                    report.text.c_str());
      }
      std::printf("winner   expert %d\n", result.outputs.winner);
      std::printf("reference           %s\n", result.reference_text.c_str());
      if (!gen_attention.empty()) {
        metx::write_attention_maps(result.attention,
                                   loaded.config.image_size / loaded.config.patch,
                                   gen_attention);
        std::printf("attention maps written to %s\n", gen_attention.c_str());
      }
      return 0;
    }
    if (cmd_ablate->parsed()) {
      const metx::RunConfig config = ablate_flags.resolve(cmd_ablate);
      const metx::AblationResult result = metx::ablate(config);
      std::cout << result.table_text();
      std::filesystem::create_directories(config.out_dir);
      write_text(config.out_dir + "/ablation.txt", result.table_text());
      return 0;
    }
    if (cmd_census->parsed()) {
      const metx::RunConfig config = census_flags.resolve(cmd_census);
      const metx::Corpus corpus = metx::generate_corpus(config.seed, config.dataset_size);
      const metx::ParamCensus census = metx::param_census(config, corpus.vocab.size());
      if (census_per_tensor) {
        for (const auto& [name, count] : census.per_tensor) {
          std::printf("%-36s %8lld\n", name.c_str(), static_cast<long long>(count));
        }
      }
      for (const auto& [module, count] : census.per_module) {
        std::printf("%-12s %10lld\n", module.c_str(), static_cast<long long>(count));
      }
      std::printf("%-12s %10lld\n", "total", static_cast<long long>(census.total));
      return 0;
    }
    if (cmd_grad->parsed()) {
      const metx::GradCheckReport report =
          metx::gradcheck(metx::gradcheck_config(), grad_seeds, grad_step, grad_tol);
      std::cout << report.text();
      return report.passed ? 0 : 2;
    }
    if (cmd_export->parsed()) {
      const metx::Corpus corpus = metx::generate_corpus(export_seed, export_n);
      metx::export_corpus(corpus, export_path);
      std::printf("wrote %d samples to %s\n", export_n, export_path.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
