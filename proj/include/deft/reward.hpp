#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "deft/corpus.hpp"
#include "deft/distill.hpp"
#include "deft/error.hpp"
#include "deft/text_io.hpp"

namespace deft {

inline constexpr double kNormalizationTolerance = 1e-9;

// Row-major ||y|| x V natural-log probabilities; row t is the teacher-forced
// next-token distribution at response position t.
class LogprobMatrix {
 public:
  LogprobMatrix() = default;
  LogprobMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<double> row(std::size_t t) { return {data_.data() + t * cols_, cols_}; }
  std::span<const double> row(std::size_t t) const { return {data_.data() + t * cols_, cols_}; }
  double operator()(std::size_t t, std::size_t i) const { return data_[t * cols_ + i]; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Mean log-probability per token over a response's timesteps.
struct AvgLogprobVector {
  std::vector<double> values;
  std::size_t response_length = 0;

  std::size_t vocab_size() const noexcept { return values.size(); }
};

inline void check_row_normalized(std::span<const double> row, std::size_t index) {
  double mass = 0.0;
  for (double lp : row) mass += std::exp(lp);
  if (!(std::abs(mass - 1.0) <= kNormalizationTolerance)) {
    throw InvalidInput("log-probability row " + std::to_string(index) + " sums to " + format_real(mass) +
                       " in probability space");
  }
}

inline AvgLogprobVector average_logprobs(const LogprobMatrix& rows) {
  if (rows.rows() == 0 || rows.cols() == 0) throw InvalidInput("empty log-probability matrix");
  AvgLogprobVector avg;
  avg.values.assign(rows.cols(), 0.0);
  avg.response_length = rows.rows();
  for (std::size_t t = 0; t < rows.rows(); ++t) {
    check_row_normalized(rows.row(t), t);
    const auto r = rows.row(t);
    for (std::size_t i = 0; i < r.size(); ++i) avg.values[i] += r[i];
  }
  const double inv = 1.0 / static_cast<double>(rows.rows());
  for (auto& v : avg.values) v *= inv;
  return avg;
}

// R_Q: dot product of the discrepancy weights with the averaged log output
// distribution, summed over the weights' support.
inline double distribution_reward(const DiscrepancyDistribution& q_diff, std::span<const double> avg_values) {
  if (q_diff.vocab_size() != avg_values.size()) {
    throw InvalidInput("vocab mismatch: discrepancy over " + std::to_string(q_diff.vocab_size()) +
                       " tokens, log-probs over " + std::to_string(avg_values.size()));
  }
  double r = 0.0;
  for (auto id : q_diff.support()) r += q_diff.weight(id) * avg_values[id];
  return r;
}

inline double distribution_reward(const DiscrepancyDistribution& q_diff, const AvgLogprobVector& q_avg) {
  return distribution_reward(q_diff, std::span<const double>(q_avg.values));
}

// Anything that can teacher-force a response and return full-vocabulary
// log-probability rows.
template <class S>
concept LogprobSource = requires(const S& s, std::span<const TokenId> prompt, std::span<const TokenId> response) {
  { s.vocab_size() } -> std::convertible_to<std::size_t>;
  { s.logprob_rows(prompt, response) } -> std::same_as<LogprobMatrix>;
};

enum class ResponseSelector {
  chosen,  // top-ranked response only
  all,     // mean of R_Q over every ranked response
};

inline ResponseSelector parse_selector(const std::string& name) {
  if (name == "chosen") return ResponseSelector::chosen;
  if (name == "all") return ResponseSelector::all;
  throw InvalidInput("response selector must be 'chosen' or 'all', got '" + name + "'");
}

inline std::string selector_name(ResponseSelector s) { return s == ResponseSelector::chosen ? "chosen" : "all"; }

template <LogprobSource S>
double sample_reward(const TokenizedSample& s, const S& source, const DiscrepancyDistribution& q_diff,
                     ResponseSelector selector = ResponseSelector::chosen) {
  auto reward_of = [&](const std::vector<TokenId>& response) {
    return distribution_reward(q_diff, average_logprobs(source.logprob_rows(s.prompt, response)));
  };
  if (selector == ResponseSelector::chosen) return reward_of(s.responses.front());
  double total = 0.0;
  for (const auto& r : s.responses) total += reward_of(r);
  return total / static_cast<double>(s.responses.size());
}

// Per-sample R_Q in dataset order. The source is only read. Either every
// sample is scored or an error naming the failing sample is thrown.
template <LogprobSource S>
std::vector<double> score_dataset(std::span<const TokenizedSample> samples, const S& source,
                                  const DiscrepancyDistribution& q_diff,
                                  ResponseSelector selector = ResponseSelector::chosen, unsigned threads = 1) {
  if (source.vocab_size() != q_diff.vocab_size()) {
    throw InvalidInput("vocab mismatch between log-prob source and discrepancy");
  }
  std::vector<double> scores(samples.size(), 0.0);
  std::vector<std::exception_ptr> errors(samples.size());
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        scores[i] = sample_reward(samples[i], source, q_diff, selector);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(samples.size(), 1));
  if (n_threads == 1) {
    run(0, samples.size());
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (samples.size() + n_threads - 1) / n_threads;
    for (std::size_t t = 0; t < n_threads; ++t) {
      const std::size_t b = std::min(samples.size(), t * chunk);
      workers.emplace_back(run, b, std::min(samples.size(), b + chunk));
    }
    for (auto& w : workers) w.join();
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw Error("scoring sample '" + samples[i].id + "' failed: " + e.what());
    }
  }
  return scores;
}

// ---------------------------------------------------------------------------
// External log-prob dumps
// ---------------------------------------------------------------------------

// Pre-averaged log-probs computed elsewhere (e.g. by a real LLM), one JSON
// record per line: {"id": ..., "avg_logprobs": [V values]} or
// {"id": ..., "sparse": {"token": value, ...}} covering the discrepancy support.
class LogprobDump {
 public:
  struct Entry {
    std::vector<double> dense;
    std::unordered_map<TokenId, double> sparse;
  };

  static LogprobDump load(const std::filesystem::path& path, const Vocab& vocab) {
    LogprobDump dump;
    dump.vocab_size_ = vocab.size();
    std::size_t line_no = 0;
    for (const auto& line : read_lines(path)) {
      ++line_no;
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      const auto where = path.string() + ": line " + std::to_string(line_no) + ": ";
      Entry e;
      std::string id;
      try {
        const auto j = nlohmann::json::parse(line);
        id = detail::json_id(j.at("id"));
        if (j.contains("avg_logprobs")) {
          e.dense = j.at("avg_logprobs").get<std::vector<double>>();
          if (e.dense.size() != vocab.size()) {
            throw InvalidInput(where + "avg_logprobs has " + std::to_string(e.dense.size()) +
                               " entries, vocab has " + std::to_string(vocab.size()));
          }
        } else if (j.contains("sparse")) {
          for (const auto& [tok, v] : j.at("sparse").items()) {
            if (!vocab.contains(tok)) throw InvalidInput(where + "token '" + tok + "' not in vocab");
            e.sparse.emplace(vocab.lookup(tok), v.get<double>());
          }
        } else {
          throw InvalidInput(where + "record needs 'avg_logprobs' or 'sparse'");
        }
      } catch (const nlohmann::json::exception& ex) {
        throw InvalidInput(where + "malformed record: " + ex.what());
      }
      if (!dump.entries_.emplace(id, std::move(e)).second) throw InvalidInput(where + "duplicate id '" + id + "'");
    }
    return dump;
  }

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  bool contains(const std::string& id) const { return entries_.count(id) != 0; }

  double reward(const std::string& id, const DiscrepancyDistribution& q_diff) const {
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidInput("no log-prob record for sample '" + id + "'");
    const auto& e = it->second;
    if (!e.dense.empty()) return distribution_reward(q_diff, e.dense);
    double r = 0.0;
    for (auto tok : q_diff.support()) {
      const auto v = e.sparse.find(tok);
      if (v == e.sparse.end()) {
        throw InvalidInput("sample '" + id + "': sparse record misses support token " + std::to_string(tok));
      }
      r += q_diff.weight(tok) * v->second;
    }
    return r;
  }

  void add_dense(const std::string& id, std::vector<double> values) {
    entries_[id].dense = std::move(values);
    vocab_size_ = entries_[id].dense.size();
  }

 private:
  std::size_t vocab_size_ = 0;
  std::map<std::string, Entry> entries_;
};

inline std::vector<double> score_dataset(std::span<const TokenizedSample> samples, const LogprobDump& dump,
                                         const DiscrepancyDistribution& q_diff) {
  if (dump.vocab_size() != q_diff.vocab_size()) throw InvalidInput("vocab mismatch between dump and discrepancy");
  std::vector<double> scores;
  scores.reserve(samples.size());
  for (const auto& s : samples) scores.push_back(dump.reward(s.id, q_diff));
  return scores;
}

// ---------------------------------------------------------------------------
// Score report
// ---------------------------------------------------------------------------

struct ScoredSample {
  std::string id;
  std::string subset;
  double reward = 0.0;
};

inline void write_score_report(std::ostream& os, std::span<const ScoredSample> rows) {
  os << "id\tsubset\tR_Q\n";
  for (const auto& r : rows) os << r.id << '\t' << r.subset << '\t' << format_real(r.reward) << '\n';
}

inline std::vector<ScoredSample> read_score_report(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "id\tsubset\tR_Q") {
    throw InvalidInput("'" + path.string() + "' is not a score report");
  }
  std::vector<ScoredSample> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_tabs(lines[i]);
    if (f.size() != 3) throw InvalidInput("'" + path.string() + "' line " + std::to_string(i + 1) + ": expected 3 fields");
    rows.push_back({f[0], f[1], parse_real(f[2], "R_Q")});
  }
  return rows;
}

}  // namespace deft
