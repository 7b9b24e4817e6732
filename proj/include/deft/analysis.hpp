#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "deft/corpus.hpp"
#include "deft/error.hpp"
#include "deft/filter.hpp"
#include "deft/random.hpp"
#include "deft/text_io.hpp"
#include "deft/toylm.hpp"

namespace deft {

// ---------------------------------------------------------------------------
// Output-distribution shift
// ---------------------------------------------------------------------------

inline const std::vector<double>& default_count_edges() {
  static const std::vector<double> e{0, 5, 20, 50, 100, 200, std::numeric_limits<double>::infinity()};
  return e;
}

// Percentage points.
inline const std::vector<double>& default_frequency_edges() {
  static const std::vector<double> e{0, 0.001, 0.005, 0.01, 0.02, 0.05, std::numeric_limits<double>::infinity()};
  return e;
}

struct TokenShift {
  TokenId id = 0;
  std::int64_t count_a = 0;
  std::int64_t count_b = 0;
  std::int64_t delta_count = 0;
  double delta_frequency = 0.0;  // percentage points
};

// Share of tokens whose |delta| falls in [edges[k], edges[k+1]).
struct BucketTable {
  std::vector<double> edges;
  std::vector<double> by_type;        // each token counts once (headline)
  std::vector<double> by_occurrence;  // each token weighted by its occurrences in A and B
};

struct ShiftReport {
  std::int64_t total_a = 0;
  std::int64_t total_b = 0;
  std::vector<TokenShift> tokens;  // ascending id, tokens seen in either corpus
  BucketTable count_buckets;
  BucketTable frequency_buckets;
};

struct ShiftOptions {
  std::vector<double> count_edges = default_count_edges();
  std::vector<double> frequency_edges = default_frequency_edges();
};

namespace detail {

inline void check_edges(const std::vector<double>& edges) {
  if (edges.size() < 2 || edges.front() != 0.0) throw InvalidInput("bucket edges must start at 0 and have >= 2 entries");
  for (std::size_t k = 1; k < edges.size(); ++k) {
    if (!(edges[k] > edges[k - 1])) throw InvalidInput("bucket edges must be strictly increasing");
  }
}

inline std::size_t bucket_of(double magnitude, const std::vector<double>& edges) {
  const auto it = std::upper_bound(edges.begin(), edges.end(), magnitude);
  const auto k = static_cast<std::size_t>(it - edges.begin());
  return std::min(k == 0 ? 0 : k - 1, edges.size() - 2);
}

inline BucketTable bucket(const std::vector<TokenShift>& tokens, const std::vector<double>& edges,
                          const std::function<double(const TokenShift&)>& magnitude) {
  BucketTable t{edges, std::vector<double>(edges.size() - 1, 0.0), std::vector<double>(edges.size() - 1, 0.0)};
  double occurrences = 0.0;
  for (const auto& s : tokens) {
    const auto k = bucket_of(magnitude(s), edges);
    t.by_type[k] += 1.0;
    const double occ = static_cast<double>(s.count_a + s.count_b);
    t.by_occurrence[k] += occ;
    occurrences += occ;
  }
  const double n = static_cast<double>(tokens.size());
  for (auto& v : t.by_type) v = n > 0 ? 100.0 * v / n : 0.0;
  for (auto& v : t.by_occurrence) v = occurrences > 0 ? 100.0 * v / occurrences : 0.0;
  return t;
}

}  // namespace detail

// Per-token B - A deltas over everything seen in either corpus.
inline ShiftReport distribution_shift(std::span<const std::vector<TokenId>> corpus_a,
                                      std::span<const std::vector<TokenId>> corpus_b, std::size_t vocab_size,
                                      const ShiftOptions& options = {}) {
  detail::check_edges(options.count_edges);
  detail::check_edges(options.frequency_edges);
  std::vector<std::int64_t> ca(vocab_size, 0), cb(vocab_size, 0);
  auto tally = [&](std::span<const std::vector<TokenId>> corpus, std::vector<std::int64_t>& counts,
                   const char* name) {
    std::int64_t total = 0;
    for (const auto& doc : corpus) {
      for (auto id : doc) {
        if (id >= vocab_size) throw InvalidInput(std::string("corpus ") + name + ": token id out of range");
        ++counts[id];
        ++total;
      }
    }
    if (total == 0) throw InvalidInput(std::string("corpus ") + name + " is empty");
    return total;
  };
  ShiftReport r;
  r.total_a = tally(corpus_a, ca, "A");
  r.total_b = tally(corpus_b, cb, "B");
  const double ta = static_cast<double>(r.total_a), tb = static_cast<double>(r.total_b);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    if (ca[i] == 0 && cb[i] == 0) continue;
    TokenShift s;
    s.id = static_cast<TokenId>(i);
    s.count_a = ca[i];
    s.count_b = cb[i];
    s.delta_count = cb[i] - ca[i];
    s.delta_frequency = 100.0 * (static_cast<double>(cb[i]) / tb - static_cast<double>(ca[i]) / ta);
    r.tokens.push_back(s);
  }
  r.count_buckets = detail::bucket(r.tokens, options.count_edges,
                                   [](const TokenShift& s) { return std::abs(static_cast<double>(s.delta_count)); });
  r.frequency_buckets =
      detail::bucket(r.tokens, options.frequency_edges, [](const TokenShift& s) { return std::abs(s.delta_frequency); });
  return r;
}

inline std::string bucket_label(const std::vector<double>& edges, std::size_t k) {
  auto edge = [](double x) { return std::isinf(x) ? std::string("+inf") : format_real(x); };
  return "[" + edge(edges[k]) + "," + edge(edges[k + 1]) + ")";
}

inline void write_shift_report(std::ostream& os, const ShiftReport& r, const Vocab& vocab) {
  os << "token\tcount_A\tcount_B\tdelta_count\tdelta_frequency_pp\n";
  for (const auto& s : r.tokens) {
    os << vocab.token_of(s.id) << '\t' << s.count_a << '\t' << s.count_b << '\t' << s.delta_count << '\t'
       << format_real(s.delta_frequency) << '\n';
  }
  auto table = [&](const char* name, const BucketTable& t) {
    os << "# " << name << "\tbucket\tpct_token_types\tpct_occurrences\n";
    for (std::size_t k = 0; k + 1 < t.edges.size(); ++k) {
      os << "# " << name << '\t' << bucket_label(t.edges, k) << '\t' << format_real(t.by_type[k]) << '\t'
         << format_real(t.by_occurrence[k]) << '\n';
    }
  };
  table("abs_delta_count", r.count_buckets);
  table("abs_delta_frequency_pp", r.frequency_buckets);
}

// ---------------------------------------------------------------------------
// Decoding helpers for producing comparison corpora
// ---------------------------------------------------------------------------

// Argmax continuation; ties go to the lowest id.
inline std::vector<TokenId> greedy_decode(const BigramModel& model, std::span<const TokenId> prompt,
                                          std::size_t length) {
  std::vector<TokenId> out;
  out.reserve(length);
  TokenId context = prompt.empty() ? Vocab::bos_id : prompt.back();
  for (std::size_t t = 0; t < length; ++t) {
    const auto r = model.row(context);
    context = static_cast<TokenId>(std::max_element(r.begin(), r.end()) - r.begin());
    out.push_back(context);
  }
  return out;
}

// Inverse-CDF sampling with one uniform draw per token, so two models fed
// the same stream produce coupled samples.
inline std::vector<TokenId> sample_decode(const BigramModel& model, std::span<const TokenId> prompt,
                                          std::size_t length, Rng& rng) {
  std::vector<TokenId> out;
  out.reserve(length);
  TokenId context = prompt.empty() ? Vocab::bos_id : prompt.back();
  for (std::size_t t = 0; t < length; ++t) {
    const auto r = model.row(context);
    const double lse = model.log_normalizer(context);
    const double u = rng.uniform();
    double cdf = 0.0;
    TokenId pick = static_cast<TokenId>(r.size() - 1);
    for (std::size_t j = 0; j < r.size(); ++j) {
      cdf += std::exp(r[j] - lse);
      if (u < cdf) {
        pick = static_cast<TokenId>(j);
        break;
      }
    }
    context = pick;
    out.push_back(pick);
  }
  return out;
}

// One sampled continuation per prompt; prompt k uses stream (seed, k).
inline std::vector<std::vector<TokenId>> sample_corpus(const BigramModel& model,
                                                       std::span<const std::vector<TokenId>> prompts,
                                                       std::size_t length, std::uint64_t seed) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(prompts.size());
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    auto rng = Rng::stream(seed, k);
    out.push_back(sample_decode(model, prompts[k], length, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline double median(std::vector<double> values) {
  if (values.empty()) throw InvalidInput("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// NaN when either side is constant.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidInput("correlation needs two equal-length series of size >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

struct CorrelationTest {
  double rho = 0.0;
  double p_value = 1.0;  // one-sided, H1: rho < 0
};

// Permutation test on Spearman's rho against the alternative of negative
// correlation. A constant series gives rho = NaN and p = 1.
inline CorrelationTest spearman_negative_test(std::span<const double> x, std::span<const double> y,
                                              std::size_t permutations, std::uint64_t seed) {
  CorrelationTest t;
  const auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  t.rho = pearson(rx, ry);
  if (std::isnan(t.rho)) return t;
  Rng rng(seed);
  std::size_t at_least_as_low = 0;
  for (std::size_t k = 0; k < permutations; ++k) {
    rng.shuffle(ry);
    if (pearson(rx, ry) <= t.rho) ++at_least_as_low;
  }
  t.p_value = static_cast<double>(at_least_as_low + 1) / static_cast<double>(permutations + 1);
  return t;
}

// ---------------------------------------------------------------------------
// Fraction sweep
// ---------------------------------------------------------------------------

struct SweepRun {
  double fraction = 0.0;
  std::uint64_t seed = 0;
  std::size_t quota = 0;
  double metric = 0.0;
};

struct SweepPoint {
  double fraction = 0.0;
  std::size_t quota = 0;
  double median_metric = 0.0;
};

struct SweepResult {
  std::vector<SweepRun> runs;       // fraction-major, seeds in the given order
  std::vector<SweepPoint> summary;  // ascending fraction

  const SweepPoint& at(double fraction) const {
    for (const auto& p : summary) {
      if (p.fraction == fraction) return p;
    }
    throw InvalidInput("fraction " + format_real(fraction) + " is not part of the sweep");
  }
};

// The closure runs filter -> train -> evaluate for one (fraction, seed) and
// returns the metric. `threads` > 1 runs the pairs concurrently; results are
// placed by index so the output does not depend on scheduling.
using SweepPipeline = std::function<double(double fraction, std::uint64_t seed)>;

inline SweepResult fraction_sweep(std::vector<double> fractions, std::span<const std::uint64_t> seeds,
                                  std::size_t dataset_size, const SweepPipeline& pipeline, unsigned threads = 1) {
  if (fractions.empty()) throw InvalidInput("no fractions given");
  if (seeds.empty()) throw InvalidInput("no seeds given");
  for (double f : fractions) selection_quota(dataset_size, f);
  std::sort(fractions.begin(), fractions.end());
  if (std::adjacent_find(fractions.begin(), fractions.end()) != fractions.end()) {
    throw InvalidInput("duplicate fraction in sweep");
  }
  SweepResult result;
  for (double f : fractions) {
    for (auto s : seeds) result.runs.push_back({f, s, selection_quota(dataset_size, f), 0.0});
  }
  std::vector<std::exception_ptr> errors(result.runs.size());
  auto run = [&](std::size_t i) {
    try {
      result.runs[i].metric = pipeline(result.runs[i].fraction, result.runs[i].seed);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, result.runs.size());
  if (n_threads == 1) {
    for (std::size_t i = 0; i < result.runs.size(); ++i) run(i);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < n_threads; ++t) {
      workers.emplace_back([&, t] {
        for (std::size_t i = t; i < result.runs.size(); i += n_threads) run(i);
      });
    }
    for (auto& w : workers) w.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    std::vector<double> metrics;
    for (std::size_t j = 0; j < seeds.size(); ++j) metrics.push_back(result.runs[k * seeds.size() + j].metric);
    result.summary.push_back({fractions[k], selection_quota(dataset_size, fractions[k]), median(metrics)});
  }
  return result;
}

inline void write_sweep(std::ostream& os, const SweepResult& r) {
  os << "fraction\tseed\tquota\tmetric\n";
  for (const auto& run : r.runs) {
    os << format_real(run.fraction) << '\t' << run.seed << '\t' << run.quota << '\t' << format_real(run.metric) << '\n';
  }
  os << "# fraction\tquota\tmedian_metric\n";
  for (const auto& p : r.summary) {
    os << "# " << format_real(p.fraction) << '\t' << p.quota << '\t' << format_real(p.median_metric) << '\n';
  }
}

}  // namespace deft
