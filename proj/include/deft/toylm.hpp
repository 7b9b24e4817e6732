#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
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

namespace deft {

// Previous-token categorical model: a V x V logit table whose row c is the
// next-token distribution after token c. Row bos_id serves position 0 of a
// response with an empty prompt.
class BigramModel {
 public:
  static constexpr std::size_t context_arity = 1;

  BigramModel() = default;
  explicit BigramModel(std::size_t vocab_size, std::uint64_t seed = 0)
      : vocab_size_(vocab_size), seed_(seed), logits_(vocab_size * vocab_size, 0.0) {
    if (vocab_size < 2) throw InvalidInput("model vocabulary needs at least 2 tokens");
  }

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::span<const double> row(TokenId context) const {
    check_id(context);
    return {logits_.data() + static_cast<std::size_t>(context) * vocab_size_, vocab_size_};
  }
  std::span<double> row(TokenId context) {
    check_id(context);
    return {logits_.data() + static_cast<std::size_t>(context) * vocab_size_, vocab_size_};
  }

  const std::vector<double>& parameters() const noexcept { return logits_; }
  std::vector<double>& parameters() noexcept { return logits_; }

  double log_normalizer(TokenId context) const {
    const auto r = row(context);
    const double m = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double x : r) s += std::exp(x - m);
    return m + std::log(s);
  }

  // Context of response position t under teacher forcing.
  TokenId context_at(std::span<const TokenId> prompt, std::span<const TokenId> response, std::size_t t) const {
    if (t > 0) return response[t - 1];
    return prompt.empty() ? Vocab::bos_id : prompt.back();
  }

  void check_tokens(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
    if (response.empty()) throw InvalidInput("response is empty");
    for (auto id : prompt) check_id(id);
    for (auto id : response) check_id(id);
  }

  LogprobMatrix logprob_rows(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
    check_tokens(prompt, response);
    LogprobMatrix out(response.size(), vocab_size_);
    for (std::size_t t = 0; t < response.size(); ++t) {
      const TokenId c = context_at(prompt, response, t);
      const double lse = log_normalizer(c);
      const auto r = row(c);
      auto dst = out.row(t);
      for (std::size_t j = 0; j < vocab_size_; ++j) dst[j] = r[j] - lse;
    }
    return out;
  }

  friend bool operator==(const BigramModel&, const BigramModel&) = default;

 private:
  void check_id(TokenId id) const {
    if (id >= vocab_size_) {
      throw InvalidInput("token id " + std::to_string(id) + " out of range for vocab of size " +
                         std::to_string(vocab_size_));
    }
  }

  std::size_t vocab_size_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> logits_;
};

static_assert(LogprobSource<BigramModel>);

struct InitOptions {
  enum class Kind { zero, gaussian } kind = Kind::zero;
  double sigma = 0.1;
};

// Gaussian entries are drawn row-major from Rng(seed).normal(0, sigma).
inline BigramModel init_model(std::size_t vocab_size, const InitOptions& options = {}, std::uint64_t seed = 0) {
  BigramModel model(vocab_size, seed);
  if (options.kind == InitOptions::Kind::gaussian) {
    if (!(options.sigma >= 0.0) || !std::isfinite(options.sigma)) throw InvalidInput("init sigma must be finite and >= 0");
    Rng rng(seed);
    for (auto& x : model.parameters()) x = rng.normal(0.0, options.sigma);
  }
  return model;
}

inline LogprobMatrix forward_logprobs(const BigramModel& model, std::span<const TokenId> prompt,
                                      std::span<const TokenId> response) {
  return model.logprob_rows(prompt, response);
}

// Frozen deep copy of a model, shareable across threads.
class ParameterSnapshot {
 public:
  ParameterSnapshot() = default;
  explicit ParameterSnapshot(const BigramModel& model) : model_(std::make_shared<const BigramModel>(model)) {}

  bool empty() const noexcept { return !model_; }
  const BigramModel& model() const {
    if (!model_) throw InvalidInput("missing reference snapshot");
    return *model_;
  }

  // FNV-1a over the raw parameter bytes.
  std::uint64_t fingerprint() const { return fingerprint_of(model()); }

  static std::uint64_t fingerprint_of(const BigramModel& m) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    const auto& p = m.parameters();
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
    for (std::size_t i = 0; i < p.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
    return h;
  }

 private:
  std::shared_ptr<const BigramModel> model_;
};

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

// Dense gradient with the same shape as the logit table. Rows that received
// no contribution are tracked so clearing and updating skip them.
class GradientTable {
 public:
  GradientTable() = default;
  explicit GradientTable(std::size_t vocab_size)
      : vocab_size_(vocab_size), values_(vocab_size * vocab_size, 0.0), touched_flag_(vocab_size, 0) {}

  std::size_t vocab_size() const noexcept { return vocab_size_; }

  std::span<double> row(TokenId context) {
    if (!touched_flag_[context]) {
      touched_flag_[context] = 1;
      touched_.push_back(context);
    }
    return {values_.data() + static_cast<std::size_t>(context) * vocab_size_, vocab_size_};
  }
  std::span<const double> row(TokenId context) const {
    return {values_.data() + static_cast<std::size_t>(context) * vocab_size_, vocab_size_};
  }
  double at(TokenId context, TokenId next) const {
    return values_[static_cast<std::size_t>(context) * vocab_size_ + next];
  }

  const std::vector<TokenId>& touched_rows() const noexcept { return touched_; }
  const std::vector<double>& values() const noexcept { return values_; }

  void clear() {
    for (auto c : touched_) {
      std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(c * vocab_size_), vocab_size_, 0.0);
      touched_flag_[c] = 0;
    }
    touched_.clear();
  }

  bool all_finite() const {
    for (auto c : touched_) {
      for (double g : row(c)) {
        if (!std::isfinite(g)) return false;
      }
    }
    return true;
  }

 private:
  std::size_t vocab_size_ = 0;
  std::vector<double> values_;
  std::vector<char> touched_flag_;
  std::vector<TokenId> touched_;
};

// Sum over t of log p(y_t | context(t)). When `grad` is given, adds
// scale * d/dlogits using dlog softmax_i / dlogit_j = [i == j] - softmax_j.
inline double accumulate_sequence_logprob(const BigramModel& model, std::span<const TokenId> prompt,
                                          std::span<const TokenId> response, double scale = 1.0,
                                          GradientTable* grad = nullptr) {
  model.check_tokens(prompt, response);
  const std::size_t V = model.vocab_size();
  double total = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    const TokenId c = model.context_at(prompt, response, t);
    const double lse = model.log_normalizer(c);
    const auto r = model.row(c);
    total += r[response[t]] - lse;
    if (grad) {
      auto g = grad->row(c);
      for (std::size_t j = 0; j < V; ++j) g[j] -= scale * std::exp(r[j] - lse);
      g[response[t]] += scale;
    }
  }
  return total;
}

inline double sequence_logprob(const BigramModel& model, std::span<const TokenId> prompt,
                               std::span<const TokenId> response) {
  return accumulate_sequence_logprob(model, prompt, response);
}

// R_Q of one teacher-forced response, computed with the same arithmetic as
// average_logprobs + distribution_reward restricted to the weight support.
// The gradient w.r.t. logit row c at one timestep is (w_j - W softmax_j) / T
// with W the total weight.
inline double accumulate_average_reward(const BigramModel& model, std::span<const TokenId> prompt,
                                        std::span<const TokenId> response, const DiscrepancyDistribution& q_diff,
                                        double scale = 1.0, GradientTable* grad = nullptr) {
  if (q_diff.vocab_size() != model.vocab_size()) {
    throw InvalidInput("vocab mismatch: discrepancy over " + std::to_string(q_diff.vocab_size()) +
                       " tokens, model over " + std::to_string(model.vocab_size()));
  }
  model.check_tokens(prompt, response);
  const auto& support = q_diff.support();
  const std::size_t T = response.size();
  const double inv = 1.0 / static_cast<double>(T);
  std::vector<double> avg(support.size(), 0.0);
  double weight_sum = 0.0;
  for (auto id : support) weight_sum += q_diff.weight(id);
  const std::size_t V = model.vocab_size();
  for (std::size_t t = 0; t < T; ++t) {
    const TokenId c = model.context_at(prompt, response, t);
    const double lse = model.log_normalizer(c);
    const auto r = model.row(c);
    for (std::size_t k = 0; k < support.size(); ++k) avg[k] += r[support[k]] - lse;
    if (grad) {
      auto g = grad->row(c);
      const double s = scale * inv;
      if (weight_sum != 0.0) {
        for (std::size_t j = 0; j < V; ++j) g[j] -= s * weight_sum * std::exp(r[j] - lse);
      }
      for (auto id : support) g[id] += s * q_diff.weight(id);
    }
  }
  double reward = 0.0;
  for (std::size_t k = 0; k < support.size(); ++k) reward += q_diff.weight(support[k]) * (avg[k] * inv);
  return reward;
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

template <class O>
concept Optimizer = requires(O& o, BigramModel& m, const GradientTable& g) { o.step(m, g); };

// theta <- theta - lr * g
struct Sgd {
  double learning_rate = 0.1;

  void step(BigramModel& model, const GradientTable& grad) const {
    const std::size_t V = model.vocab_size();
    for (auto c : grad.touched_rows()) {
      auto p = model.row(c);
      const auto g = grad.row(c);
      for (std::size_t j = 0; j < V; ++j) p[j] -= learning_rate * g[j];
    }
  }
};

static_assert(Optimizer<Sgd>);

template <Optimizer O>
void apply_update(BigramModel& model, const GradientTable& grad, O& optimizer) {
  if (grad.vocab_size() != model.vocab_size()) throw Error("gradient and model shapes differ");
  if (!grad.all_finite()) throw Error("non-finite gradient");
  optimizer.step(model, grad);
}

inline void apply_update(BigramModel& model, const GradientTable& grad, double learning_rate) {
  Sgd sgd{learning_rate};
  apply_update(model, grad, sgd);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'F', 'T', 'B', 'G', 'M', '1'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InvalidInput("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

// Header (magic, V, context arity, seed) then the row-major logits as
// little-endian IEEE-754 doubles.
inline void write_checkpoint(std::ostream& os, const BigramModel& model) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(os, model.vocab_size());
  detail::put_u64(os, BigramModel::context_arity);
  detail::put_u64(os, model.seed());
  for (double x : model.parameters()) detail::put_u64(os, std::bit_cast<std::uint64_t>(x));
}

inline BigramModel read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw InvalidInput("not a model checkpoint");
  }
  const auto V = detail::get_u64(is);
  const auto arity = detail::get_u64(is);
  const auto seed = detail::get_u64(is);
  if (arity != BigramModel::context_arity) throw InvalidInput("unsupported context arity " + std::to_string(arity));
  if (V < 2 || V > (1u << 16)) throw InvalidInput("implausible checkpoint vocab size " + std::to_string(V));
  BigramModel model(V, seed);
  for (auto& x : model.parameters()) x = std::bit_cast<double>(detail::get_u64(is));
  if (is.peek() != std::char_traits<char>::eof()) throw InvalidInput("trailing bytes after checkpoint payload");
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const BigramModel& model) {
  write_atomically(path, [&](std::ostream& os) { write_checkpoint(os, model); });
}

inline BigramModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open checkpoint '" + path.string() + "'");
  try {
    return read_checkpoint(in);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

}  // namespace deft
