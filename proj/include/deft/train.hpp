#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
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

enum class Method { sft, dpo, pro };

inline Method parse_method(const std::string& name) {
  if (name == "sft") return Method::sft;
  if (name == "dpo") return Method::dpo;
  if (name == "pro") return Method::pro;
  throw InvalidInput("method must be one of sft, dpo, pro; got '" + name + "'");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::sft: return "sft";
    case Method::dpo: return "dpo";
    case Method::pro: return "pro";
  }
  return "?";
}

// Defaults follow the published DEFT settings (2 epochs, beta 0.1, SFT weight
// 5e-2) except omega and the learning rate, which are rescaled for the toy model.
struct TrainConfig {
  Method method = Method::sft;
  double omega = 0.1;
  double beta = 0.1;
  double sft_weight = 0.05;
  double learning_rate = 0.5;
  std::size_t epochs = 2;
  std::uint64_t seed = 0;
  bool rq_in_loss = true;
  bool rq_stop_gradient = false;  // keep -omega R_Q in the loss value, drop it from the gradient
  ResponseSelector selector = ResponseSelector::chosen;
  std::size_t batch_size = 1;
  std::filesystem::path abort_dump;  // checkpoint written when training aborts

  void validate() const {
    auto finite = [](double x) { return std::isfinite(x); };
    if (!finite(omega) || omega < 0.0) throw InvalidInput("omega must be finite and >= 0");
    if (!finite(beta) || beta <= 0.0) throw InvalidInput("beta must be finite and > 0");
    if (!finite(sft_weight) || sft_weight < 0.0) throw InvalidInput("sft-weight must be finite and >= 0");
    if (!finite(learning_rate) || learning_rate < 0.0) throw InvalidInput("learning rate must be finite and >= 0");
    if (batch_size == 0) throw InvalidInput("batch size must be positive");
  }
};

// ---------------------------------------------------------------------------
// Base losses. Each returns the loss value and, when `grad` is non-null, adds
// scale * dloss/dlogits.
// ---------------------------------------------------------------------------

// Length-normalized negative log-likelihood of the top-ranked response.
inline double sft_loss(const BigramModel& model, const TokenizedSample& s, double scale = 1.0,
                       GradientTable* grad = nullptr) {
  if (s.responses.empty() || s.responses.front().empty()) {
    throw InvalidInput("sample '" + s.id + "': sft needs a non-empty top response");
  }
  const auto& y = s.responses.front();
  const double inv_len = 1.0 / static_cast<double>(y.size());
  return -accumulate_sequence_logprob(model, s.prompt, y, -scale * inv_len, grad) * inv_len;
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// -log sigmoid(beta * margin), with margin the policy-minus-reference log-ratio
// of the top response minus that of the bottom response. Gradients flow
// through the policy only.
inline double dpo_loss(const BigramModel& model, const ParameterSnapshot* reference, const TokenizedSample& s,
                       double beta, double scale = 1.0, GradientTable* grad = nullptr) {
  if (!reference || reference->empty()) throw InvalidInput("dpo needs a reference snapshot");
  if (s.responses.size() < 2) throw InvalidInput("sample '" + s.id + "': dpo needs at least 2 responses");
  const auto& ref = reference->model();
  if (ref.vocab_size() != model.vocab_size()) throw InvalidInput("reference and policy vocab sizes differ");
  const auto& win = s.responses.front();
  const auto& lose = s.responses.back();
  const double margin = (sequence_logprob(model, s.prompt, win) - sequence_logprob(ref, s.prompt, win)) -
                        (sequence_logprob(model, s.prompt, lose) - sequence_logprob(ref, s.prompt, lose));
  const double loss = softplus(-beta * margin);
  if (grad) {
    const double dmargin = -beta * sigmoid(-beta * margin);
    accumulate_sequence_logprob(model, s.prompt, win, scale * dmargin, grad);
    accumulate_sequence_logprob(model, s.prompt, lose, -scale * dmargin, grad);
  }
  return loss;
}

// Listwise ranking term sum_k -log(exp(s_k) / sum_{j>=k} exp(s_j)) over
// k < l-1, and its derivative with respect to each score.
inline double pro_ranking_term(std::span<const double> scores, std::vector<double>* dscores = nullptr) {
  const std::size_t l = scores.size();
  if (l < 2) throw InvalidInput("rank_length < 2");
  if (dscores) dscores->assign(l, 0.0);
  double loss = 0.0;
  for (std::size_t k = 0; k + 1 < l; ++k) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = k; j < l; ++j) m = std::max(m, scores[j]);
    double z = 0.0;
    for (std::size_t j = k; j < l; ++j) z += std::exp(scores[j] - m);
    const double lse = m + std::log(z);
    loss += lse - scores[k];
    if (dscores) {
      for (std::size_t j = k; j < l; ++j) (*dscores)[j] += std::exp(scores[j] - lse);
      (*dscores)[k] -= 1.0;
    }
  }
  return loss;
}

// Ranking term over length-normalized sequence log-probs plus
// sft_weight * sft_loss.
inline double pro_loss(const BigramModel& model, const TokenizedSample& s, double sft_weight, double scale = 1.0,
                       GradientTable* grad = nullptr) {
  const std::size_t l = s.responses.size();
  if (l < 2) throw InvalidInput("sample '" + s.id + "': rank_length < 2");
  std::vector<double> scores(l);
  for (std::size_t j = 0; j < l; ++j) {
    scores[j] = sequence_logprob(model, s.prompt, s.responses[j]) / static_cast<double>(s.responses[j].size());
  }
  std::vector<double> dscores;
  const double ranking = pro_ranking_term(scores, grad ? &dscores : nullptr);
  if (grad) {
    for (std::size_t j = 0; j < l; ++j) {
      if (dscores[j] == 0.0) continue;
      accumulate_sequence_logprob(model, s.prompt, s.responses[j],
                                  scale * dscores[j] / static_cast<double>(s.responses[j].size()), grad);
    }
  }
  double sft = 0.0;
  if (sft_weight != 0.0) sft = sft_loss(model, s, scale * sft_weight, grad);
  return ranking + sft_weight * sft;
}

inline double base_loss(const TrainConfig& cfg, const BigramModel& model, const ParameterSnapshot* reference,
                        const TokenizedSample& s, double scale = 1.0, GradientTable* grad = nullptr) {
  switch (cfg.method) {
    case Method::sft: return sft_loss(model, s, scale, grad);
    case Method::dpo: return dpo_loss(model, reference, s, cfg.beta, scale, grad);
    case Method::pro: return pro_loss(model, s, cfg.sft_weight, scale, grad);
  }
  throw Error("unknown method");
}

// ---------------------------------------------------------------------------
// Distribution-guided loss
// ---------------------------------------------------------------------------

// R_Q of the selected response(s) under the live model.
inline double selected_reward(const BigramModel& model, const TokenizedSample& s, const DiscrepancyDistribution& q_diff,
                              ResponseSelector selector, double scale = 1.0, GradientTable* grad = nullptr) {
  if (selector == ResponseSelector::chosen) {
    return accumulate_average_reward(model, s.prompt, s.responses.front(), q_diff, scale, grad);
  }
  const double inv = 1.0 / static_cast<double>(s.responses.size());
  double total = 0.0;
  for (const auto& r : s.responses) total += accumulate_average_reward(model, s.prompt, r, q_diff, scale * inv, grad);
  return total * inv;
}

// L_m - omega * R_Q when the reward is part of the loss, L_m otherwise.
inline double deft_total(double base, double reward, double omega, bool rq_in_loss) {
  return rq_in_loss ? base - omega * reward : base;
}

struct StepLoss {
  double base = 0.0;
  double reward = 0.0;
  double total = 0.0;
};

// Evaluates one sample. With a discrepancy present R_Q is always computed for
// logging; it contributes -omega dR_Q/dtheta to the gradient only when it is
// part of the loss, omega is non-zero and the stop-gradient ablation is off.
inline StepLoss deft_loss(const TrainConfig& cfg, const BigramModel& model, const ParameterSnapshot* reference,
                          const DiscrepancyDistribution* q_diff, const TokenizedSample& s, double scale = 1.0,
                          GradientTable* grad = nullptr) {
  StepLoss out;
  out.base = base_loss(cfg, model, reference, s, scale, grad);
  if (q_diff) {
    const bool backprop = grad && cfg.rq_in_loss && cfg.omega != 0.0 && !cfg.rq_stop_gradient;
    out.reward = selected_reward(model, s, *q_diff, cfg.selector, -cfg.omega * scale, backprop ? grad : nullptr);
  }
  out.total = deft_total(out.base, out.reward, cfg.omega, cfg.rq_in_loss && q_diff != nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double base_loss = 0.0;
  double reward = 0.0;
  double total = 0.0;
  double learning_rate = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_reward = 0.0;  // over this epoch's training steps
  double mean_total = 0.0;
  bool has_validation = false;
  double validation_total = 0.0;
  double validation_reward = 0.0;

  friend bool operator==(const EpochSummary&, const EpochSummary&) = default;
};

struct MetricsLog {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;

  std::vector<double> reward_trace() const {
    std::vector<double> r;
    r.reserve(steps.size());
    for (const auto& s : steps) r.push_back(s.reward);
    return r;
  }

  friend bool operator==(const MetricsLog&, const MetricsLog&) = default;
};

inline void write_metrics(std::ostream& os, const MetricsLog& log) {
  os << "step\tepoch\tL_m\tR_Q\ttotal\tlr\n";
  for (const auto& s : log.steps) {
    os << s.step << '\t' << s.epoch << '\t' << format_real(s.base_loss) << '\t' << format_real(s.reward) << '\t'
       << format_real(s.total) << '\t' << format_real(s.learning_rate) << '\n';
  }
  os << "# epoch\tmean_R_Q\tmean_total\tval_total\tval_R_Q\n";
  for (const auto& e : log.epochs) {
    os << "# " << e.epoch << '\t' << format_real(e.mean_reward) << '\t' << format_real(e.mean_total) << '\t'
       << (e.has_validation ? format_real(e.validation_total) : "-") << '\t'
       << (e.has_validation ? format_real(e.validation_reward) : "-") << '\n';
  }
}

struct TrainResult {
  BigramModel model;
  MetricsLog log;
  std::optional<std::size_t> best_epoch;  // set when a validation set was given
};

struct ValidationScore {
  double total = 0.0;
  double reward = 0.0;
};

inline ValidationScore evaluate_validation(const TrainConfig& cfg, const BigramModel& model,
                                           const ParameterSnapshot* reference, const DiscrepancyDistribution* q_diff,
                                           std::span<const TokenizedSample> validation) {
  ValidationScore v;
  for (const auto& s : validation) {
    const auto l = deft_loss(cfg, model, reference, q_diff, s);
    v.total += l.total;
    v.reward += l.reward;
  }
  const double n = static_cast<double>(std::max<std::size_t>(validation.size(), 1));
  v.total /= n;
  v.reward /= n;
  return v;
}

inline void check_training_inputs(const TrainConfig& cfg, std::span<const TokenizedSample> data,
                                  const DiscrepancyDistribution* q_diff, const BigramModel& model,
                                  const ParameterSnapshot* reference) {
  cfg.validate();
  if (cfg.omega != 0.0 && cfg.rq_in_loss && !q_diff) {
    throw InvalidInput("omega > 0 with the reward in the loss needs a discrepancy distribution");
  }
  if (q_diff && q_diff->vocab_size() != model.vocab_size()) {
    throw InvalidInput("vocab mismatch between discrepancy and model");
  }
  if (cfg.method == Method::dpo && (!reference || reference->empty())) {
    throw InvalidInput("dpo needs a reference snapshot (--reference)");
  }
  for (const auto& s : data) {
    if (s.responses.empty()) throw InvalidInput("sample '" + s.id + "' has no responses");
    if (cfg.method != Method::sft && s.responses.size() < 2) {
      throw InvalidInput("sample '" + s.id + "': " + method_name(cfg.method) + " needs rank_length >= 2");
    }
  }
}

// Epochs over a per-epoch seeded shuffle, one optimizer step per batch with
// mean reduction. With a validation set the best-validation model (lowest
// mean total loss) is returned.
inline TrainResult run_training(const TrainConfig& cfg, std::span<const TokenizedSample> data,
                                const DiscrepancyDistribution* q_diff, BigramModel model,
                                const ParameterSnapshot* reference = nullptr,
                                std::span<const TokenizedSample> validation = {}) {
  check_training_inputs(cfg, data, q_diff, model, reference);
  TrainResult result{model, {}, std::nullopt};
  if (cfg.epochs == 0 || data.empty()) return result;

  Sgd optimizer{cfg.learning_rate};
  GradientTable grad(model.vocab_size());
  std::optional<BigramModel> best;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  auto abort = [&](const std::string& why) {
    if (!cfg.abort_dump.empty()) save_checkpoint(cfg.abort_dump, model);
    throw TrainingAborted(step, why);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = Rng::stream(cfg.seed, epoch);
    rng.shuffle(order);

    EpochSummary summary;
    summary.epoch = epoch;
    std::size_t steps_in_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - begin);
      grad.clear();
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.learning_rate = cfg.learning_rate;
      for (std::size_t k = begin; k < end; ++k) {
        const auto l = deft_loss(cfg, model, reference, q_diff, data[order[k]], scale, &grad);
        rec.base_loss += scale * l.base;
        rec.reward += scale * l.reward;
        rec.total += scale * l.total;
      }
      if (!std::isfinite(rec.total)) abort("non-finite loss");
      try {
        apply_update(model, grad, optimizer);
      } catch (const Error& e) {
        abort(e.what());
      }
      summary.mean_reward += rec.reward;
      summary.mean_total += rec.total;
      ++steps_in_epoch;
      result.log.steps.push_back(rec);
      ++step;
    }
    summary.mean_reward /= static_cast<double>(steps_in_epoch);
    summary.mean_total /= static_cast<double>(steps_in_epoch);
    if (!validation.empty()) {
      const auto v = evaluate_validation(cfg, model, reference, q_diff, validation);
      summary.has_validation = true;
      summary.validation_total = v.total;
      summary.validation_reward = v.reward;
      if (v.total < best_validation) {
        best_validation = v.total;
        best = model;
        result.best_epoch = epoch;
      }
    }
    result.log.epochs.push_back(summary);
  }
  result.model = best ? std::move(*best) : std::move(model);
  return result;
}

}  // namespace deft
