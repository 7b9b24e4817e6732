#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deft/analysis.hpp"
#include "deft/corpus.hpp"
#include "deft/distill.hpp"
#include "deft/error.hpp"
#include "deft/filter.hpp"
#include "deft/pipeline.hpp"
#include "deft/reward.hpp"
#include "deft/synth.hpp"
#include "deft/text_io.hpp"
#include "deft/toylm.hpp"
#include "deft/train.hpp"

namespace deft::cli {

inline constexpr const char* kDataFormats = R"(File formats:
  dataset (--data, ranked)   JSON lines {"id", "prompt", "responses": [{"text", "score"?}, ...], "subset"?}
                             responses best first; scores optional, non-increasing if given
  dataset (chosen-rejected)  JSON lines {"id"?, "chosen", "rejected", "subset"?}; the shared dialogue
                             prefix up to the last "Assistant:" becomes the prompt
  dataset (pretokenized)     JSON lines {"id", "prompt_ids": [...], "response_ids": [[...], ...], "subset"?}
  vocab (--vocab)            one token per line, line number = id; lines 1-2 are <unk> and <bos>
  discrepancy (--qdiff)      "# vocab_size=V positive_total=P negative_total=N", "token<TAB>weight",
                             then one token<TAB>weight row per vocab entry
  scores (--scores)          TSV header id, subset, R_Q
  decisions                  TSV header id, subset, R_Q, rank, selected; "# subset<TAB>n<TAB>quota" footer
  log-prob dump (--logprobs) JSON lines {"id", "avg_logprobs": [V values]} or {"id", "sparse": {token: value}}
  checkpoint (--model, --reference, train --out)  binary bigram logit table
  metrics (--metrics)        TSV step, epoch, L_m, R_Q, total, lr; "# epoch ..." summary lines
)";

namespace detail {

inline void check_output_path(const std::filesystem::path& p, const char* flag) {
  if (p.empty()) throw InvalidInput(std::string(flag) + " must not be empty");
  const auto parent = p.parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent)) {
    throw InvalidInput(std::string(flag) + ": directory '" + parent.string() + "' does not exist");
  }
  if (std::filesystem::is_directory(p)) throw InvalidInput(std::string(flag) + ": '" + p.string() + "' is a directory");
}

inline std::vector<TokenizedSample> load_samples(const std::filesystem::path& path, const std::string& format,
                                                 const Vocab& vocab) {
  if (format == "pretokenized") return load_pretokenized(path, vocab.size());
  const auto fmt = format == "chosen-rejected" ? DatasetFormat::chosen_rejected : DatasetFormat::ranked;
  return tokenize_dataset(load_dataset(path, fmt), vocab);
}

inline DatasetFormat dataset_format(const std::string& format) {
  if (format == "pretokenized") throw InvalidInput("this command needs text data, not pretokenized");
  return format == "chosen-rejected" ? DatasetFormat::chosen_rejected : DatasetFormat::ranked;
}

inline BigramModel initial_model(const std::string& model_path, const std::string& init, double sigma,
                                 std::size_t vocab_size, std::uint64_t seed) {
  if (!model_path.empty()) {
    auto m = load_checkpoint(model_path);
    if (m.vocab_size() != vocab_size) {
      throw InvalidInput("checkpoint '" + model_path + "' has vocab size " + std::to_string(m.vocab_size()) +
                         ", vocab has " + std::to_string(vocab_size));
    }
    return m;
  }
  InitOptions opts;
  opts.kind = init == "gaussian" ? InitOptions::Kind::gaussian : InitOptions::Kind::zero;
  opts.sigma = sigma;
  return init_model(vocab_size, opts, seed);
}

inline std::vector<double> parse_real_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_real(item, what));
  if (out.empty()) throw InvalidInput(std::string(what) + " list is empty");
  return out;
}

}  // namespace detail

// Parses `args` (without the program name), runs the subcommand and returns
// the exit status: 0 success, 1 invalid input or usage, 2 internal error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Distribution-guided preference data filtering and training (DEFT) on a toy bigram model", "deft"};
  app.require_subcommand(1);
  app.footer(kDataFormats);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  app.set_config("--config", "", "INI/TOML file with one [subcommand] section of key = value lines; flags override it");

  const std::vector<std::string> data_formats{"ranked", "chosen-rejected", "pretokenized"};
  std::function<void()> action;

  // vocab ------------------------------------------------------------------
  struct {
    std::string data, out, format = "ranked";
    std::size_t min_count = 1;
    bool include_prompts = false;
  } vo;
  auto* vocab_cmd = app.add_subcommand("vocab", "Build a vocabulary from response text");
  vocab_cmd->add_option("--data", vo.data, "Dataset")->required()->check(CLI::ExistingFile);
  vocab_cmd->add_option("--out", vo.out, "Vocab file to write")->required();
  vocab_cmd->add_option("--format", vo.format, "Dataset format")->check(CLI::IsMember({"ranked", "chosen-rejected"}));
  vocab_cmd->add_option("--min-count", vo.min_count, "Drop tokens seen fewer times");
  vocab_cmd->add_flag("--include-prompts", vo.include_prompts, "Count prompt tokens too");
  vocab_cmd->footer(kDataFormats);
  vocab_cmd->callback([&] {
    action = [&] {
      detail::check_output_path(vo.out, "--out");
      const auto ds = load_dataset(vo.data, detail::dataset_format(vo.format));
      const auto vocab = build_vocab(ds, {vo.min_count, vo.include_prompts});
      write_atomically(vo.out, [&](std::ostream& os) { vocab.write(os); });
    };
  });

  // extract ----------------------------------------------------------------
  struct {
    std::string data, vocab, vocab_out, out, format = "ranked";
    double tau_pos = 0.9, tau_neg = 0.1;
    unsigned threads = 1;
    std::uint64_t seed = 0;
  } eo;
  auto* extract_cmd = app.add_subcommand("extract", "Distill the discrepancy distribution Q_diff from a dataset");
  extract_cmd->add_option("--data", eo.data, "Dataset")->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--vocab", eo.vocab, "Vocab file; built from --data when omitted")->check(CLI::ExistingFile);
  extract_cmd->add_option("--vocab-out", eo.vocab_out, "Also write the vocab used");
  extract_cmd->add_option("--out", eo.out, "Discrepancy file to write")->required();
  extract_cmd->add_option("--format", eo.format, "Dataset format")->check(CLI::IsMember(data_formats));
  extract_cmd->add_option("--tau-pos", eo.tau_pos, "Normalized score at or above which a response is positive");
  extract_cmd->add_option("--tau-neg", eo.tau_neg, "Normalized score at or below which a response is negative");
  extract_cmd->add_option("--threads", eo.threads, "Counting threads");
  extract_cmd->add_option("--seed", eo.seed, "Accepted for uniformity; extraction is deterministic");
  extract_cmd->footer(kDataFormats);
  extract_cmd->callback([&] {
    action = [&] {
      detail::check_output_path(eo.out, "--out");
      if (!eo.vocab_out.empty()) detail::check_output_path(eo.vocab_out, "--vocab-out");
      if (eo.vocab.empty() && eo.format == "pretokenized") throw InvalidInput("pretokenized data needs --vocab");
      ExtractOptions opts;
      opts.thresholds = {eo.tau_pos, eo.tau_neg};
      opts.threads = eo.threads;
      opts.thresholds.validate();
      const auto vocab = eo.vocab.empty()
                             ? build_vocab(load_dataset(eo.data, detail::dataset_format(eo.format)))
                             : Vocab::read(eo.vocab);
      const auto samples = detail::load_samples(eo.data, eo.format, vocab);
      const auto q = extract_discrepancy(samples, vocab.size(), opts);
      write_atomically(eo.out, [&](std::ostream& os) { write_discrepancy(os, q, vocab); });
      if (!eo.vocab_out.empty()) write_atomically(eo.vocab_out, [&](std::ostream& os) { vocab.write(os); });
    };
  });

  // score ------------------------------------------------------------------
  struct {
    std::string data, vocab, qdiff, model, logprobs, out, selector = "chosen", init = "zero", format = "ranked";
    double sigma = 0.1;
    unsigned threads = 1;
    std::uint64_t seed = 0;
  } so;
  auto* score_cmd = app.add_subcommand("score", "Compute R_Q per sample");
  score_cmd->add_option("--data", so.data, "Dataset")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--vocab", so.vocab, "Vocab file")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--qdiff", so.qdiff, "Discrepancy file")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--model", so.model, "Scorer checkpoint; default is a freshly initialized policy")
      ->check(CLI::ExistingFile);
  score_cmd->add_option("--logprobs", so.logprobs, "Externally computed averaged log-probs instead of a model")
      ->check(CLI::ExistingFile);
  score_cmd->add_option("--response-selector", so.selector, "Which responses R_Q is computed on")
      ->check(CLI::IsMember({"chosen", "all"}));
  score_cmd->add_option("--init", so.init, "Initialization when no --model is given")
      ->check(CLI::IsMember({"zero", "gaussian"}));
  score_cmd->add_option("--init-sigma", so.sigma, "Std-dev for gaussian initialization");
  score_cmd->add_option("--seed", so.seed, "Initialization seed");
  score_cmd->add_option("--threads", so.threads, "Scoring threads");
  score_cmd->add_option("--format", so.format, "Dataset format")->check(CLI::IsMember(data_formats));
  score_cmd->add_option("--out", so.out, "Score report to write")->required();
  score_cmd->footer(kDataFormats);
  score_cmd->callback([&] {
    action = [&] {
      detail::check_output_path(so.out, "--out");
      if (!so.model.empty() && !so.logprobs.empty()) throw InvalidInput("--model and --logprobs are exclusive");
      const auto selector = parse_selector(so.selector);
      const auto vocab = Vocab::read(so.vocab);
      const auto q = read_discrepancy(so.qdiff, vocab);
      const auto samples = detail::load_samples(so.data, so.format, vocab);
      std::vector<double> rewards;
      if (!so.logprobs.empty()) {
        if (selector != ResponseSelector::chosen) throw InvalidInput("--logprobs supports only the chosen selector");
        rewards = score_dataset(samples, LogprobDump::load(so.logprobs, vocab), q);
      } else {
        const auto model = detail::initial_model(so.model, so.init, so.sigma, vocab.size(), so.seed);
        rewards = score_dataset(samples, model, q, selector, so.threads);
      }
      std::vector<ScoredSample> rows;
      for (std::size_t i = 0; i < samples.size(); ++i) rows.push_back({samples[i].id, samples[i].subset, rewards[i]});
      write_atomically(so.out, [&](std::ostream& os) { write_score_report(os, rows); });
    };
  });

  // filter -----------------------------------------------------------------
  struct {
    std::string scores, out, data, data_out, format = "ranked";
    double fraction = 0.05;
    bool global = false;
    std::uint64_t seed = 0;
  } fo;
  auto* filter_cmd = app.add_subcommand("filter", "Keep the lowest-R_Q fraction of each subset");
  filter_cmd->add_option("--scores", fo.scores, "Score report")->required()->check(CLI::ExistingFile);
  filter_cmd->add_option("--fraction", fo.fraction, "Fraction to keep, in (0,1]");
  filter_cmd->add_flag("--global", fo.global, "One quota over the whole dataset instead of per subset");
  filter_cmd->add_option("--out", fo.out, "Decisions file to write")->required();
  filter_cmd->add_option("--data", fo.data, "Dataset to subset")->check(CLI::ExistingFile);
  filter_cmd->add_option("--data-out", fo.data_out, "Selected samples of --data");
  filter_cmd->add_option("--format", fo.format, "Format of --data")
      ->check(CLI::IsMember({"ranked", "chosen-rejected"}));
  filter_cmd->add_option("--seed", fo.seed, "Accepted for uniformity; filtering is deterministic");
  filter_cmd->footer(kDataFormats);
  filter_cmd->callback([&] {
    action = [&] {
      if (!(fo.fraction > 0.0 && fo.fraction <= 1.0)) throw InvalidInput("fraction must be in (0,1]");
      detail::check_output_path(fo.out, "--out");
      if (fo.data.empty() != fo.data_out.empty()) throw InvalidInput("--data and --data-out go together");
      if (!fo.data_out.empty()) detail::check_output_path(fo.data_out, "--data-out");
      const auto scores = read_score_report(fo.scores);
      const auto result = select_lowest(scores, fo.fraction, fo.global ? QuotaScope::global : QuotaScope::per_subset);
      Dataset kept;
      if (!fo.data.empty()) {
        const auto ds = load_dataset(fo.data, detail::dataset_format(fo.format));
        const auto ids = result.selected_ids();
        const std::set<std::string> wanted(ids.begin(), ids.end());
        std::set<std::string> found;
        for (const auto& s : ds.samples) {
          if (wanted.count(s.id)) {
            kept.samples.push_back(s);
            found.insert(s.id);
          }
        }
        if (found.size() != wanted.size()) throw InvalidInput("--data lacks some selected ids from --scores");
      }
      write_atomically(fo.out, [&](std::ostream& os) { write_decisions(os, result); });
      if (!fo.data_out.empty()) save_dataset(fo.data_out, kept);
    };
  });

  // train ------------------------------------------------------------------
  struct {
    std::string data, vocab, qdiff, method = "sft", reference, model, init = "zero", validation, out, metrics,
        selector = "chosen", format = "ranked";
    double omega = 0.1, beta = 0.1, sft_weight = 0.05, lr = 0.5, sigma = 0.1;
    std::size_t epochs = 2, batch_size = 1;
    std::uint64_t seed = 0;
    bool rq_in_loss = true, stop_gradient = false;
  } to;
  auto* train_cmd = app.add_subcommand("train", "Fine-tune the toy model with an optional -omega R_Q term");
  train_cmd->add_option("--data", to.data, "Training dataset")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--vocab", to.vocab, "Vocab file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--qdiff", to.qdiff, "Discrepancy file; needed when omega > 0")->check(CLI::ExistingFile);
  train_cmd->add_option("--method", to.method, "Base loss")->check(CLI::IsMember({"sft", "dpo", "pro"}));
  train_cmd->add_option("--omega", to.omega, "Weight of the R_Q term");
  train_cmd->add_option("--beta", to.beta, "DPO temperature");
  train_cmd->add_option("--sft-weight", to.sft_weight, "SFT term weight inside PRO");
  train_cmd->add_option("--lr", to.lr, "SGD learning rate");
  train_cmd->add_option("--epochs", to.epochs, "Passes over the data");
  train_cmd->add_option("--batch-size", to.batch_size, "Samples per update");
  train_cmd->add_option("--seed", to.seed, "Shuffle and initialization seed");
  train_cmd->add_option("--rq-in-loss", to.rq_in_loss, "Subtract omega R_Q from the loss (true/false)");
  train_cmd->add_flag("--rq-stop-gradient", to.stop_gradient, "Log -omega R_Q in the loss but do not backpropagate it");
  train_cmd->add_option("--response-selector", to.selector, "Responses R_Q is computed on")
      ->check(CLI::IsMember({"chosen", "all"}));
  train_cmd->add_option("--reference", to.reference, "Frozen reference checkpoint (required for dpo)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--model", to.model, "Initial checkpoint; default is a fresh model")->check(CLI::ExistingFile);
  train_cmd->add_option("--init", to.init, "Initialization when no --model is given")
      ->check(CLI::IsMember({"zero", "gaussian"}));
  train_cmd->add_option("--init-sigma", to.sigma, "Std-dev for gaussian initialization");
  train_cmd->add_option("--validation", to.validation, "Validation dataset; the best epoch is kept")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--format", to.format, "Dataset format")->check(CLI::IsMember(data_formats));
  train_cmd->add_option("--metrics", to.metrics, "Per-step metrics file to write");
  train_cmd->add_option("--out", to.out, "Checkpoint to write")->required();
  train_cmd->footer(kDataFormats);
  train_cmd->callback([&] {
    action = [&] {
      TrainConfig cfg;
      cfg.method = parse_method(to.method);
      if (cfg.method == Method::dpo && to.reference.empty()) throw InvalidInput("--method dpo requires --reference");
      cfg.omega = to.omega;
      cfg.beta = to.beta;
      cfg.sft_weight = to.sft_weight;
      cfg.learning_rate = to.lr;
      cfg.epochs = to.epochs;
      cfg.batch_size = to.batch_size;
      cfg.seed = to.seed;
      cfg.rq_in_loss = to.rq_in_loss;
      cfg.rq_stop_gradient = to.stop_gradient;
      cfg.selector = parse_selector(to.selector);
      cfg.validate();
      if (to.qdiff.empty() && cfg.omega != 0.0 && cfg.rq_in_loss) {
        throw InvalidInput("--omega > 0 with --rq-in-loss true requires --qdiff");
      }
      detail::check_output_path(to.out, "--out");
      if (!to.metrics.empty()) detail::check_output_path(to.metrics, "--metrics");
      cfg.abort_dump = to.out + ".aborted";

      const auto vocab = Vocab::read(to.vocab);
      const auto samples = detail::load_samples(to.data, to.format, vocab);
      std::vector<TokenizedSample> validation;
      if (!to.validation.empty()) validation = detail::load_samples(to.validation, to.format, vocab);
      std::optional<DiscrepancyDistribution> q;
      if (!to.qdiff.empty()) q = read_discrepancy(to.qdiff, vocab);
      ParameterSnapshot reference;
      if (!to.reference.empty()) reference = ParameterSnapshot(detail::initial_model(to.reference, "zero", 0, vocab.size(), 0));
      auto model = detail::initial_model(to.model, to.init, to.sigma, vocab.size(), to.seed);
      check_training_inputs(cfg, samples, q ? &*q : nullptr, model, &reference);

      const auto result = run_training(cfg, samples, q ? &*q : nullptr, std::move(model), &reference, validation);
      save_checkpoint(to.out, result.model);
      if (!to.metrics.empty()) write_atomically(to.metrics, [&](std::ostream& os) { write_metrics(os, result.log); });
    };
  });

  // synth ------------------------------------------------------------------
  SyntheticSpec spec;
  std::string synth_out;
  auto add_spec_options = [&](CLI::App* cmd) {
    cmd->add_option("--common", spec.common_size, "Shared pool size");
    cmd->add_option("--positive", spec.positive_size, "Positive-agent pool size");
    cmd->add_option("--negative", spec.negative_size, "Negative-agent pool size");
    cmd->add_option("--rho", spec.mixing_rate, "Probability of drawing from the agent's own pool");
    cmd->add_option("--samples", spec.sample_count, "Number of samples");
    cmd->add_option("--min-length", spec.min_length, "Shortest response");
    cmd->add_option("--max-length", spec.max_length, "Longest response");
    cmd->add_option("--prompt-length", spec.prompt_length, "Prompt length");
  };
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic two-agent preference dataset");
  add_spec_options(synth_cmd);
  synth_cmd->add_option("--seed", spec.seed, "Generation seed");
  synth_cmd->add_option("--out", synth_out, "Output directory (data.jsonl, vocab.txt, truth.tsv, annotations.tsv)")
      ->required();
  synth_cmd->footer(std::string(kDataFormats) +
                    "  truth.tsv                  token<TAB>true_weight for every vocab entry\n"
                    "  annotations.tsv            id<TAB>preference_tokens (positive-only tokens in the chosen response)\n");
  synth_cmd->callback([&] {
    action = [&] {
      spec.validate();
      const std::filesystem::path dir(synth_out);
      if (std::filesystem::exists(dir) && !std::filesystem::is_directory(dir)) {
        throw InvalidInput("--out: '" + synth_out + "' exists and is not a directory");
      }
      save_synthetic(dir, generate(spec));
    };
  });

  // shift ------------------------------------------------------------------
  struct {
    std::string vocab, corpus_a, corpus_b, model_a, model_b, data, out, format = "ranked";
    std::size_t length = 16;
    std::uint64_t seed = 0;
  } ho;
  auto* shift_cmd = app.add_subcommand("shift", "Token count/frequency shift between two output corpora (B - A)");
  shift_cmd->add_option("--vocab", ho.vocab, "Vocab file")->required()->check(CLI::ExistingFile);
  shift_cmd->add_option("--corpus-a", ho.corpus_a, "Baseline generations, one per line")->check(CLI::ExistingFile);
  shift_cmd->add_option("--corpus-b", ho.corpus_b, "Compared generations, one per line")->check(CLI::ExistingFile);
  shift_cmd->add_option("--model-a", ho.model_a, "Baseline checkpoint to sample from")->check(CLI::ExistingFile);
  shift_cmd->add_option("--model-b", ho.model_b, "Compared checkpoint to sample from")->check(CLI::ExistingFile);
  shift_cmd->add_option("--data", ho.data, "Prompts for sampling (dataset)")->check(CLI::ExistingFile);
  shift_cmd->add_option("--format", ho.format, "Format of --data")->check(CLI::IsMember(data_formats));
  shift_cmd->add_option("--length", ho.length, "Tokens sampled per prompt");
  shift_cmd->add_option("--seed", ho.seed, "Sampling seed (shared by both models)");
  shift_cmd->add_option("--out", ho.out, "Shift report to write")->required();
  shift_cmd->footer(std::string(kDataFormats) +
                    "  shift report               token, count_A, count_B, delta_count, delta_frequency_pp rows, then\n"
                    "                             '# abs_delta_count' and '# abs_delta_frequency_pp' bucket tables\n");
  shift_cmd->callback([&] {
    action = [&] {
      detail::check_output_path(ho.out, "--out");
      const bool corpora = !ho.corpus_a.empty() || !ho.corpus_b.empty();
      const bool models = !ho.model_a.empty() || !ho.model_b.empty();
      if (corpora == models) throw InvalidInput("give either --corpus-a/--corpus-b or --model-a/--model-b with --data");
      const auto vocab = Vocab::read(ho.vocab);
      std::vector<std::vector<TokenId>> a, b;
      if (corpora) {
        if (ho.corpus_a.empty() || ho.corpus_b.empty()) throw InvalidInput("--corpus-a and --corpus-b go together");
        for (const auto& line : read_lines(ho.corpus_a)) a.push_back(tokenize(line, vocab));
        for (const auto& line : read_lines(ho.corpus_b)) b.push_back(tokenize(line, vocab));
      } else {
        if (ho.model_a.empty() || ho.model_b.empty() || ho.data.empty()) {
          throw InvalidInput("--model-a, --model-b and --data go together");
        }
        const auto ma = detail::initial_model(ho.model_a, "zero", 0, vocab.size(), 0);
        const auto mb = detail::initial_model(ho.model_b, "zero", 0, vocab.size(), 0);
        std::vector<std::vector<TokenId>> prompts;
        for (const auto& s : detail::load_samples(ho.data, ho.format, vocab)) prompts.push_back(s.prompt);
        a = sample_corpus(ma, prompts, ho.length, ho.seed);
        b = sample_corpus(mb, prompts, ho.length, ho.seed);
      }
      const auto report = distribution_shift(a, b, vocab.size());
      write_atomically(ho.out, [&](std::ostream& os) { write_shift_report(os, report, vocab); });
    };
  });

  // sweep ------------------------------------------------------------------
  struct {
    std::string fractions = "0.03,0.05,0.1,0.2,1", out, method = "pro", selection = "lowest", scorer = "initial",
                init = "zero";
    std::size_t seeds = 3, held_out = 500, epochs = 2;
    std::uint64_t seed = 0;
    double omega = 0.1, lr = 0.5, beta = 0.1, sft_weight = 0.05;
    unsigned threads = 1;
  } wo;
  SyntheticSpec sweep_spec;
  auto* sweep_cmd = app.add_subcommand("sweep", "Filter-fraction sweep on synthetic data, scored by true alignment");
  {
    auto* cmd = sweep_cmd;
    cmd->add_option("--common", sweep_spec.common_size, "Shared pool size");
    cmd->add_option("--positive", sweep_spec.positive_size, "Positive-agent pool size");
    cmd->add_option("--negative", sweep_spec.negative_size, "Negative-agent pool size");
    cmd->add_option("--rho", sweep_spec.mixing_rate, "Probability of drawing from the agent's own pool");
    cmd->add_option("--samples", sweep_spec.sample_count, "Training samples per run");
    cmd->add_option("--min-length", sweep_spec.min_length, "Shortest response");
    cmd->add_option("--max-length", sweep_spec.max_length, "Longest response");
  }
  sweep_cmd->add_option("--fractions", wo.fractions, "Comma-separated fractions in (0,1]");
  sweep_cmd->add_option("--seeds", wo.seeds, "Runs per fraction; seeds are --seed, --seed+1, ...");
  sweep_cmd->add_option("--seed", wo.seed, "First seed");
  sweep_cmd->add_option("--held-out", wo.held_out, "Held-out samples for evaluation");
  sweep_cmd->add_option("--method", wo.method, "Base loss")->check(CLI::IsMember({"sft", "dpo", "pro"}));
  sweep_cmd->add_option("--omega", wo.omega, "Weight of the R_Q term");
  sweep_cmd->add_option("--beta", wo.beta, "DPO temperature");
  sweep_cmd->add_option("--sft-weight", wo.sft_weight, "SFT term weight inside PRO");
  sweep_cmd->add_option("--lr", wo.lr, "SGD learning rate");
  sweep_cmd->add_option("--epochs", wo.epochs, "Passes over the selected data");
  sweep_cmd->add_option("--selection", wo.selection, "lowest R_Q or a uniformly random subset")
      ->check(CLI::IsMember({"lowest", "random"}));
  sweep_cmd->add_option("--scorer", wo.scorer, "Model that computes R_Q for filtering")
      ->check(CLI::IsMember({"initial", "sft_base"}));
  sweep_cmd->add_option("--init", wo.init, "Policy initialization")->check(CLI::IsMember({"zero", "gaussian"}));
  sweep_cmd->add_option("--threads", wo.threads, "Run (fraction, seed) pairs concurrently");
  sweep_cmd->add_option("--out", wo.out, "Sweep results to write")->required();
  sweep_cmd->footer(std::string(kDataFormats) +
                    "  sweep results              fraction, seed, quota, metric rows, then '# fraction, quota,\n"
                    "                             median_metric' lines; metric is the true-discrepancy R_Q of the\n"
                    "                             trained model on held-out samples\n");
  sweep_cmd->callback([&] {
    action = [&] {
      detail::check_output_path(wo.out, "--out");
      sweep_spec.validate();
      ExperimentConfig cfg;
      cfg.data = sweep_spec;
      cfg.held_out = wo.held_out;
      if (cfg.held_out == 0) throw InvalidInput("--held-out must be >= 1");
      cfg.selection = wo.selection == "random" ? ExperimentConfig::Selection::random : ExperimentConfig::Selection::lowest;
      cfg.scorer = wo.scorer == "sft_base" ? ExperimentConfig::Scorer::sft_base : ExperimentConfig::Scorer::initial;
      cfg.init.kind = wo.init == "gaussian" ? InitOptions::Kind::gaussian : InitOptions::Kind::zero;
      cfg.train.method = parse_method(wo.method);
      cfg.train.omega = wo.omega;
      cfg.train.beta = wo.beta;
      cfg.train.sft_weight = wo.sft_weight;
      cfg.train.learning_rate = wo.lr;
      cfg.train.epochs = wo.epochs;
      cfg.train.validate();
      const auto fractions = detail::parse_real_list(wo.fractions, "fraction");
      for (double f : fractions) selection_quota(sweep_spec.sample_count, f);
      if (wo.seeds == 0) throw InvalidInput("--seeds must be >= 1");
      std::vector<std::uint64_t> seeds;
      for (std::size_t k = 0; k < wo.seeds; ++k) seeds.push_back(wo.seed + k);
      std::map<std::uint64_t, PreparedExperiment> prepared;
      for (auto s : seeds) prepared.emplace(s, prepare_experiment(cfg, s));
      const auto result = fraction_sweep(
          fractions, seeds, sweep_spec.sample_count,
          [&](double f, std::uint64_t s) {
            auto c = cfg;
            c.fraction = f;
            return run_prepared(prepared.at(s), c, s).true_score;
          },
          wo.threads);
      write_atomically(wo.out, [&](std::ostream& os) { write_sweep(os, result); });
    };
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string what = e.what();
    for (auto& ch : what) {
      if (ch == '\n') ch = ' ';
    }
    err << "error: " << what << '\n';
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (action) action();
    return 0;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace deft::cli
