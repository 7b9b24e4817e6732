#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "deft/corpus.hpp"
#include "deft/error.hpp"
#include "deft/text_io.hpp"

namespace deft {

// Raw token tallies for one pool of responses.
class CountTable {
 public:
  explicit CountTable(std::size_t vocab_size = 0) : counts_(vocab_size, 0) {}

  void add(std::span<const TokenId> ids) {
    for (auto id : ids) {
      if (id >= counts_.size()) throw InvalidInput("token id " + std::to_string(id) + " outside vocab");
      ++counts_[id];
    }
    total_ += ids.size();
  }

  void merge(const CountTable& other) {
    if (other.counts_.size() != counts_.size()) throw Error("count tables over different vocabularies");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    total_ += other.total_;
  }

  std::size_t vocab_size() const noexcept { return counts_.size(); }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }
  std::uint64_t total() const noexcept { return total_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  friend bool operator==(const CountTable&, const CountTable&) = default;

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

// Signed per-token weights: positive-pool frequency minus negative-pool
// frequency. Sums to zero; not a probability distribution.
class DiscrepancyDistribution {
 public:
  DiscrepancyDistribution() = default;

  explicit DiscrepancyDistribution(std::vector<double> weights, std::uint64_t positive_total = 0,
                                   std::uint64_t negative_total = 0)
      : weights_(std::move(weights)), positive_total_(positive_total), negative_total_(negative_total) {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (!std::isfinite(weights_[i])) throw InvalidInput("discrepancy weight is not finite");
      if (weights_[i] != 0.0) support_.push_back(static_cast<TokenId>(i));
    }
  }

  std::size_t vocab_size() const noexcept { return weights_.size(); }
  double weight(TokenId id) const { return weights_.at(id); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  // Ids with non-zero weight, ascending.
  const std::vector<TokenId>& support() const noexcept { return support_; }
  std::uint64_t positive_total() const noexcept { return positive_total_; }
  std::uint64_t negative_total() const noexcept { return negative_total_; }

  double sum() const {
    double s = 0.0;
    for (auto id : support_) s += weights_[id];
    return s;
  }

  DiscrepancyDistribution scaled(double factor) const {
    auto w = weights_;
    for (auto& x : w) x *= factor;
    return DiscrepancyDistribution(std::move(w), positive_total_, negative_total_);
  }

 private:
  std::vector<double> weights_;
  std::vector<TokenId> support_;
  std::uint64_t positive_total_ = 0;
  std::uint64_t negative_total_ = 0;
};

// Counts are normalized exactly once here.
inline DiscrepancyDistribution discrepancy_from_counts(const CountTable& positive,
                                                       const CountTable& negative) {
  if (positive.vocab_size() != negative.vocab_size()) throw Error("count tables over different vocabularies");
  if (positive.total() == 0) throw InvalidInput("positive pool is empty");
  if (negative.total() == 0) throw InvalidInput("negative pool is empty");
  const auto tp = static_cast<double>(positive.total());
  const auto tn = static_cast<double>(negative.total());
  std::vector<double> w(positive.vocab_size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto cp = positive.counts()[i];
    const auto cn = negative.counts()[i];
    if (cp == 0 && cn == 0) continue;
    w[i] = static_cast<double>(cp) / tp - static_cast<double>(cn) / tn;
  }
  return DiscrepancyDistribution(std::move(w), positive.total(), negative.total());
}

// ---------------------------------------------------------------------------
// Rank normalization and classification
// ---------------------------------------------------------------------------

struct RankedScores {
  std::vector<double> values;
};

// Min-max normalization of best-first raw scores. A flat range maps to
// (1, 0.5, ..., 0.5, 0).
inline RankedScores min_max_normalize(std::span<const double> raw) {
  if (raw.size() < 2) throw InvalidInput("rank_length < 2");
  const double best = raw.front();
  const double worst = raw.back();
  RankedScores out;
  out.values.resize(raw.size());
  if (best == worst) {
    std::fill(out.values.begin(), out.values.end(), 0.5);
  } else {
    for (std::size_t i = 0; i < raw.size(); ++i) out.values[i] = (raw[i] - worst) / (best - worst);
  }
  out.values.front() = 1.0;
  out.values.back() = 0.0;
  return out;
}

// Scores implied by rank position alone, used for unscored samples.
inline RankedScores rank_position_scores(std::size_t rank_length) {
  std::vector<double> raw(rank_length);
  for (std::size_t i = 0; i < rank_length; ++i) raw[i] = static_cast<double>(rank_length - 1 - i);
  return min_max_normalize(raw);
}

enum class ResponseLabel { positive, negative, neither };

struct Thresholds {
  double positive = 0.9;
  double negative = 0.1;

  void validate() const {
    if (!(negative >= 0.0 && negative < positive && positive <= 1.0)) {
      throw InvalidInput("thresholds must satisfy 0 <= negative < positive <= 1");
    }
  }
};

inline std::vector<ResponseLabel> classify_by_threshold(const RankedScores& scores,
                                                        const Thresholds& thresholds = {}) {
  thresholds.validate();
  const auto& r = scores.values;
  if (r.size() < 2) throw InvalidInput("rank_length < 2");
  std::vector<ResponseLabel> labels(r.size(), ResponseLabel::neither);
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] >= thresholds.positive) {
      labels[i] = ResponseLabel::positive;
    } else if (r[i] <= thresholds.negative) {
      labels[i] = ResponseLabel::negative;
    }
  }
  labels.front() = ResponseLabel::positive;
  labels.back() = ResponseLabel::negative;
  return labels;
}

inline std::vector<ResponseLabel> label_sample(const TokenizedSample& s, const Thresholds& thresholds) {
  const auto scores = s.scores.empty() ? rank_position_scores(s.responses.size())
                                       : min_max_normalize(s.scores);
  return classify_by_threshold(scores, thresholds);
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

struct PoolCounts {
  CountTable positive;
  CountTable negative;
};

struct ExtractOptions {
  Thresholds thresholds;
  unsigned threads = 1;
};

// Tallies positive- and negative-labelled responses. Parallel chunks are
// merged in chunk order; integer counts make the result independent of the
// thread count.
inline PoolCounts count_pools(std::span<const TokenizedSample> samples, std::size_t vocab_size,
                              const ExtractOptions& options = {}) {
  options.thresholds.validate();
  auto count_range = [&](std::size_t begin, std::size_t end) {
    PoolCounts pc{CountTable(vocab_size), CountTable(vocab_size)};
    for (std::size_t i = begin; i < end; ++i) {
      const auto& s = samples[i];
      const auto labels = label_sample(s, options.thresholds);
      for (std::size_t k = 0; k < s.responses.size(); ++k) {
        if (labels[k] == ResponseLabel::positive) pc.positive.add(s.responses[k]);
        if (labels[k] == ResponseLabel::negative) pc.negative.add(s.responses[k]);
      }
    }
    return pc;
  };
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(samples.size(), 1));
  if (threads == 1) return count_range(0, samples.size());

  std::vector<PoolCounts> partial(threads);
  std::vector<std::thread> workers;
  const std::size_t chunk = (samples.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      const std::size_t b = std::min(samples.size(), t * chunk);
      const std::size_t e = std::min(samples.size(), b + chunk);
      partial[t] = count_range(b, e);
    });
  }
  for (auto& w : workers) w.join();
  PoolCounts total{CountTable(vocab_size), CountTable(vocab_size)};
  for (const auto& p : partial) {
    total.positive.merge(p.positive);
    total.negative.merge(p.negative);
  }
  return total;
}

inline DiscrepancyDistribution extract_discrepancy(std::span<const TokenizedSample> samples,
                                                   std::size_t vocab_size,
                                                   const ExtractOptions& options = {}) {
  const auto pools = count_pools(samples, vocab_size, options);
  return discrepancy_from_counts(pools.positive, pools.negative);
}

inline DiscrepancyDistribution extract_discrepancy(const Dataset& ds, const Vocab& vocab,
                                                   const ExtractOptions& options = {}) {
  const auto samples = tokenize_dataset(ds, vocab);
  return extract_discrepancy(samples, vocab.size(), options);
}

// One discrepancy per subset tag (untagged samples use "").
inline std::map<std::string, DiscrepancyDistribution> extract_discrepancy_per_subset(
    std::span<const TokenizedSample> samples, std::size_t vocab_size, const ExtractOptions& options = {}) {
  std::map<std::string, std::vector<TokenizedSample>> groups;
  for (const auto& s : samples) groups[s.subset].push_back(s);
  std::map<std::string, DiscrepancyDistribution> out;
  for (const auto& [tag, group] : groups) {
    try {
      out.emplace(tag, extract_discrepancy(group, vocab_size, options));
    } catch (const InvalidInput& e) {
      throw InvalidInput("subset '" + tag + "': " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifact file
// ---------------------------------------------------------------------------

// Header line, then `token<TAB>weight` for every vocab entry by descending
// weight (ties by ascending id).
inline void write_discrepancy(std::ostream& os, const DiscrepancyDistribution& q, const Vocab& vocab) {
  if (q.vocab_size() != vocab.size()) throw Error("discrepancy and vocab sizes differ");
  std::vector<TokenId> order(q.vocab_size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](TokenId a, TokenId b) { return q.weight(a) > q.weight(b); });
  os << "# vocab_size=" << q.vocab_size() << " positive_total=" << q.positive_total()
     << " negative_total=" << q.negative_total() << '\n';
  os << "token\tweight\n";
  for (auto id : order) os << vocab.token_of(id) << '\t' << format_real(q.weight(id)) << '\n';
}

inline DiscrepancyDistribution read_discrepancy(const std::filesystem::path& path, const Vocab& vocab) {
  const auto lines = read_lines(path);
  if (lines.size() < 2 || lines[0].rfind("# vocab_size=", 0) != 0) {
    throw InvalidInput("'" + path.string() + "' is not a discrepancy file");
  }
  std::size_t declared = 0;
  unsigned long long pt = 0, nt = 0;
  if (std::sscanf(lines[0].c_str(), "# vocab_size=%zu positive_total=%llu negative_total=%llu",
                  &declared, &pt, &nt) != 3) {
    throw InvalidInput("'" + path.string() + "': malformed header");
  }
  if (declared != vocab.size()) {
    throw InvalidInput("'" + path.string() + "': vocab size " + std::to_string(declared) +
                       " does not match vocab of size " + std::to_string(vocab.size()));
  }
  std::vector<double> w(vocab.size(), 0.0);
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_tabs(lines[i]);
    if (f.size() != 2) throw InvalidInput("'" + path.string() + "' line " + std::to_string(i + 1) + ": expected 2 fields");
    if (!vocab.contains(f[0])) {
      throw InvalidInput("'" + path.string() + "': token '" + f[0] + "' not in vocab");
    }
    w[vocab.lookup(f[0])] = parse_real(f[1], "weight");
  }
  return DiscrepancyDistribution(std::move(w), pt, nt);
}

}  // namespace deft
