#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "deft/corpus.hpp"
#include "deft/distill.hpp"
#include "deft/error.hpp"
#include "deft/random.hpp"
#include "deft/reward.hpp"
#include "deft/text_io.hpp"
#include "deft/toylm.hpp"

namespace deft {

// Two token-level agents. Each response token comes from the agent's own
// pool with probability mixing_rate and from the shared pool otherwise; both
// pools are uniform.
struct SyntheticSpec {
  std::size_t common_size = 20;
  std::size_t positive_size = 5;
  std::size_t negative_size = 5;
  double mixing_rate = 0.3;
  std::size_t sample_count = 1000;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  std::size_t prompt_length = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (common_size == 0 || positive_size == 0 || negative_size == 0) {
      throw InvalidInput("synthetic pool sizes must be >= 1");
    }
    if (!(mixing_rate >= 0.0 && mixing_rate <= 1.0)) throw InvalidInput("mixing rate must be in [0,1]");
    if (sample_count == 0) throw InvalidInput("sample count must be >= 1");
    if (min_length == 0 || min_length > max_length) throw InvalidInput("need 1 <= min_length <= max_length");
  }

  std::size_t vocab_size() const { return 2 + common_size + positive_size + negative_size; }
  TokenId common_id(std::size_t k) const { return static_cast<TokenId>(2 + k); }
  TokenId positive_id(std::size_t k) const { return static_cast<TokenId>(2 + common_size + k); }
  TokenId negative_id(std::size_t k) const { return static_cast<TokenId>(2 + common_size + positive_size + k); }
  bool is_positive(TokenId id) const { return id >= positive_id(0) && id < negative_id(0); }
};

// Vocab layout: <unk>, <bos>, c0.., p0.., n0..
inline Vocab synthetic_vocab(const SyntheticSpec& spec) {
  std::vector<std::string> tokens;
  for (std::size_t k = 0; k < spec.common_size; ++k) tokens.push_back("c" + std::to_string(k));
  for (std::size_t k = 0; k < spec.positive_size; ++k) tokens.push_back("p" + std::to_string(k));
  for (std::size_t k = 0; k < spec.negative_size; ++k) tokens.push_back("n" + std::to_string(k));
  return Vocab(tokens);
}

// Expected positive-minus-negative token frequency: +rho/P on positive-only
// tokens, -rho/N on negative-only tokens, 0 on the shared pool.
inline DiscrepancyDistribution true_discrepancy(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<double> w(spec.vocab_size(), 0.0);
  const double pos = spec.mixing_rate / static_cast<double>(spec.positive_size);
  const double neg = spec.mixing_rate / static_cast<double>(spec.negative_size);
  for (std::size_t k = 0; k < spec.positive_size; ++k) w[spec.positive_id(k)] = pos;
  for (std::size_t k = 0; k < spec.negative_size; ++k) w[spec.negative_id(k)] = -neg;
  return DiscrepancyDistribution(std::move(w));
}

struct SyntheticData {
  Vocab vocab;
  Dataset dataset;
  std::vector<TokenizedSample> samples;
  DiscrepancyDistribution truth;
  std::vector<std::size_t> preference_counts;  // positive-only tokens in each chosen response
};

namespace detail {

inline std::vector<TokenId> draw_response(Rng& rng, const SyntheticSpec& spec, bool positive_agent) {
  const std::size_t len = spec.min_length + static_cast<std::size_t>(rng.below(spec.max_length - spec.min_length + 1));
  std::vector<TokenId> out(len);
  for (auto& tok : out) {
    if (rng.uniform() < spec.mixing_rate) {
      tok = positive_agent ? spec.positive_id(rng.below(spec.positive_size))
                           : spec.negative_id(rng.below(spec.negative_size));
    } else {
      tok = spec.common_id(rng.below(spec.common_size));
    }
  }
  return out;
}

inline std::string render(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string text;
  for (auto id : ids) {
    if (!text.empty()) text += ' ';
    text += vocab.token_of(id);
  }
  return text;
}

}  // namespace detail

// Sample i is drawn from its own stream (seed, i): prompt, then the
// positive agent's response, then the negative agent's.
inline SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData out{synthetic_vocab(spec), {}, {}, true_discrepancy(spec), {}};
  out.dataset.samples.reserve(spec.sample_count);
  out.samples.reserve(spec.sample_count);
  out.preference_counts.reserve(spec.sample_count);
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    auto rng = Rng::stream(spec.seed, i);
    TokenizedSample t;
    t.id = std::to_string(i);
    t.prompt.resize(spec.prompt_length);
    for (auto& tok : t.prompt) tok = spec.common_id(rng.below(spec.common_size));
    t.responses.push_back(detail::draw_response(rng, spec, true));
    t.responses.push_back(detail::draw_response(rng, spec, false));

    std::size_t pref = 0;
    for (auto id : t.responses.front()) pref += spec.is_positive(id) ? 1 : 0;
    out.preference_counts.push_back(pref);

    PreferenceSample p;
    p.id = t.id;
    p.prompt = detail::render(t.prompt, out.vocab);
    for (const auto& r : t.responses) p.responses.push_back({detail::render(r, out.vocab), std::nullopt});
    out.dataset.samples.push_back(std::move(p));
    out.samples.push_back(std::move(t));
  }
  return out;
}

// Mean over samples of the exact-discrepancy R_Q of the teacher-forced top
// response; the ground-truth stand-in for an external reward model.
inline double true_alignment_score(const BigramModel& model, const DiscrepancyDistribution& truth,
                                   std::span<const TokenizedSample> held_out) {
  if (truth.vocab_size() != model.vocab_size()) {
    throw InvalidInput("vocab mismatch: truth over " + std::to_string(truth.vocab_size()) + " tokens, model over " +
                       std::to_string(model.vocab_size()));
  }
  if (held_out.empty()) throw InvalidInput("held-out set is empty");
  double total = 0.0;
  for (const auto& s : held_out) total += accumulate_average_reward(model, s.prompt, s.responses.front(), truth);
  return total / static_cast<double>(held_out.size());
}

inline void write_truth(std::ostream& os, const DiscrepancyDistribution& truth, const Vocab& vocab) {
  os << "token\ttrue_weight\n";
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    os << vocab.token_of(static_cast<TokenId>(i)) << '\t' << format_real(truth.weight(static_cast<TokenId>(i))) << '\n';
  }
}

inline void write_annotations(std::ostream& os, const SyntheticData& data) {
  os << "id\tpreference_tokens\n";
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    os << data.samples[i].id << '\t' << data.preference_counts[i] << '\n';
  }
}

// data.jsonl, vocab.txt, truth.tsv and annotations.tsv under `dir`.
inline void save_synthetic(const std::filesystem::path& dir, const SyntheticData& data) {
  std::filesystem::create_directories(dir);
  save_dataset(dir / "data.jsonl", data.dataset);
  write_atomically(dir / "vocab.txt", [&](std::ostream& os) { data.vocab.write(os); });
  write_atomically(dir / "truth.tsv", [&](std::ostream& os) { write_truth(os, data.truth, data.vocab); });
  write_atomically(dir / "annotations.tsv", [&](std::ostream& os) { write_annotations(os, data); });
}

}  // namespace deft
