#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deft/distill.hpp"
#include "deft/error.hpp"
#include "deft/filter.hpp"
#include "deft/random.hpp"
#include "deft/reward.hpp"
#include "deft/synth.hpp"
#include "deft/toylm.hpp"
#include "deft/train.hpp"

namespace deft {

// End-to-end synthetic experiment: generate -> extract -> score -> filter ->
// train -> evaluate on a held-out draw from the same agents.
struct ExperimentConfig {
  SyntheticSpec data;
  std::size_t held_out = 500;
  double fraction = 0.05;

  enum class Selection { lowest, random } selection = Selection::lowest;
  // initial: score with the policy before any training.
  // sft_base: score with a copy of the initial policy after one SFT epoch on
  // the full data; useful to see what a non-degenerate scorer does.
  enum class Scorer { initial, sft_base } scorer = Scorer::initial;

  TrainConfig train = default_train();
  InitOptions init;

  static TrainConfig default_train() {
    TrainConfig t;
    t.method = Method::pro;
    return t;
  }
};

struct ExperimentOutcome {
  std::size_t selected = 0;
  double true_score = 0.0;
  double train_seconds = 0.0;
  std::vector<double> sample_rewards;  // scorer R_Q per training sample
  MetricsLog log;
};

struct PreparedExperiment {
  SyntheticData train;
  SyntheticData held_out;
  DiscrepancyDistribution q_diff;
  BigramModel initial;
  std::vector<double> rewards;
};

// Held-out samples come from a stream disjoint from the training draw.
inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto spec = cfg.data;
  spec.seed = seed;
  auto held_spec = spec;
  held_spec.sample_count = cfg.held_out;
  held_spec.seed = splitmix64(seed ^ 0x48454C444F5554ULL);
  PreparedExperiment p{generate(spec), generate(held_spec), {}, BigramModel(spec.vocab_size()), {}};
  p.q_diff = extract_discrepancy(p.train.samples, p.train.vocab.size());
  p.initial = init_model(spec.vocab_size(), cfg.init, seed);

  BigramModel scorer = p.initial;
  if (cfg.scorer == ExperimentConfig::Scorer::sft_base) {
    TrainConfig sft = cfg.train;
    sft.method = Method::sft;
    sft.omega = 0.0;
    sft.epochs = 1;
    scorer = run_training(sft, p.train.samples, nullptr, p.initial).model;
  }
  p.rewards = score_dataset(p.train.samples, scorer, p.q_diff, cfg.train.selector);
  return p;
}

inline std::vector<TokenizedSample> select_samples(const PreparedExperiment& p, const ExperimentConfig& cfg,
                                                   std::uint64_t seed) {
  const auto& samples = p.train.samples;
  std::vector<TokenizedSample> chosen;
  if (cfg.selection == ExperimentConfig::Selection::lowest) {
    std::vector<ScoredSample> scored;
    scored.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) scored.push_back({samples[i].id, samples[i].subset, p.rewards[i]});
    const auto result = select_lowest(scored, cfg.fraction);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (result.decisions[i].selected) chosen.push_back(samples[i]);
    }
  } else {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto rng = Rng::stream(seed, 0x52414E44ULL);
    rng.shuffle(order);
    order.resize(selection_quota(samples.size(), cfg.fraction));
    std::sort(order.begin(), order.end());
    for (auto i : order) chosen.push_back(samples[i]);
  }
  return chosen;
}

inline ExperimentOutcome run_prepared(const PreparedExperiment& p, const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentOutcome out;
  const auto subset = select_samples(p, cfg, seed);
  out.selected = subset.size();
  out.sample_rewards = p.rewards;
  auto train = cfg.train;
  train.seed = seed;
  const ParameterSnapshot reference(p.initial);
  const auto start = std::chrono::steady_clock::now();
  auto result = run_training(train, subset, &p.q_diff, p.initial, &reference);
  out.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.log = std::move(result.log);
  out.true_score = true_alignment_score(result.model, p.train.truth, p.held_out.samples);
  return out;
}

inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  return run_prepared(prepare_experiment(cfg, seed), cfg, seed);
}

}  // namespace deft
