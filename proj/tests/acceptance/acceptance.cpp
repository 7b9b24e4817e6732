// Acceptance suite: one line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "../support.hpp"

#ifndef DEFT_CLI_PATH
#error "DEFT_CLI_PATH must point at the deft executable"
#endif

namespace deft {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

// --- 1 ---------------------------------------------------------------------

Outcome quotas() {
  const std::pair<std::size_t, std::size_t> cases[] = {{42536, 2127}, {43835, 2192}, {22002, 1101}, {52420, 2621}};
  Outcome o{true, ""};
  for (auto [n, want] : cases) {
    // Run the selection itself, not just the quota helper.
    std::vector<ScoredSample> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = {std::to_string(i), "x", static_cast<double>((i * 7919) % 1000)};
    const auto r = select_lowest(s, 0.05);
    const auto got = r.selected_ids().size();
    o.pass = o.pass && got == want && r.quotas.at("x").quota == want;
    o.detail += std::to_string(n) + "->" + std::to_string(got) + " ";
  }
  return o;
}

// --- 2 ---------------------------------------------------------------------

Outcome distribution_algebra() {
  std::size_t bad_sum = 0, bad_anti = 0, bad_dup = 0;
  double worst = 0;
  for (int seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 gen(seed);
    const std::size_t V = 3 + gen() % 40;
    std::vector<TokenizedSample> samples;
    const std::size_t n = 1 + gen() % 8;
    for (std::size_t i = 0; i < n; ++i) {
      auto s = test::random_sample(gen, V, 2 + gen() % 4, 8);
      s.id = std::to_string(i);
      samples.push_back(s);
    }
    const auto q = extract_discrepancy(samples, V);
    double sum = 0;
    for (double w : q.weights()) sum += w;
    worst = std::max(worst, std::abs(sum));
    bad_sum += std::abs(sum) > 1e-9;

    auto reversed = samples;
    for (auto& s : reversed) std::reverse(s.responses.begin(), s.responses.end());
    const auto r = extract_discrepancy(reversed, V);
    for (TokenId i = 0; i < V; ++i) {
      if (r.weight(i) != -q.weight(i)) {
        ++bad_anti;
        break;
      }
    }

    auto doubled = samples;
    for (auto& s : doubled) {
      for (auto& resp : s.responses) {
        const auto copy = resp;
        resp.insert(resp.end(), copy.begin(), copy.end());
      }
    }
    bad_dup += extract_discrepancy(doubled, V).weights() != q.weights();
  }
  return {bad_sum + bad_anti + bad_dup == 0,
          fmt("max|sum|=%.2e", worst) + " sum/anti/dup failures " + std::to_string(bad_sum) + "/" +
              std::to_string(bad_anti) + "/" + std::to_string(bad_dup)};
}

// --- 3 ---------------------------------------------------------------------

Outcome reward_invariants() {
  std::size_t fails[4] = {0, 0, 0, 0};
  for (int seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 gen(seed + 5000);
    const std::size_t V = 4 + gen() % 30;
    const auto q = test::random_discrepancy(gen, V);
    std::uniform_real_distribution<double> val(-8.0, -0.01), shift(-5, 5), scale(-3, 3);
    std::vector<double> v(V), u(V);
    for (auto& x : v) x = val(gen);
    for (auto& x : u) x = val(gen);
    const double r = distribution_reward(q, v);

    auto shifted = v;
    const double c = shift(gen);
    for (auto& x : shifted) x += c;
    fails[0] += std::abs(distribution_reward(q, shifted) - r) > 1e-9;

    // Uniform model: a zero-logit policy teacher-forced over a random response.
    const auto response = test::random_tokens(gen, 1 + gen() % 10, V);
    const double ru = distribution_reward(q, average_logprobs(forward_logprobs(init_model(V), {}, response)));
    fails[1] += std::abs(ru) > 1e-9;

    const double a = scale(gen);
    std::vector<double> sum(V);
    for (std::size_t i = 0; i < V; ++i) sum[i] = v[i] + u[i];
    const bool linear = std::abs(distribution_reward(q.scaled(a), v) - a * r) <= 1e-9 &&
                        std::abs(distribution_reward(q, sum) - r - distribution_reward(q, u)) <= 1e-9;
    fails[2] += !linear;

    bool strict = true;
    for (auto id : q.support()) {
      auto bumped = v;
      bumped[id] += 0.5;
      const double rb = distribution_reward(q, bumped);
      if (q.weight(id) > 0 && !(rb > r)) strict = false;
      if (q.weight(id) < 0 && !(rb < r)) strict = false;
    }
    fails[3] += !strict;
  }
  const bool pass = fails[0] + fails[1] + fails[2] + fails[3] == 0;
  return {pass, "failures shift/uniform/linear/monotone " + std::to_string(fails[0]) + "/" + std::to_string(fails[1]) +
                    "/" + std::to_string(fails[2]) + "/" + std::to_string(fails[3])};
}

// --- 4 ---------------------------------------------------------------------

Outcome gradient_oracle() {
  double worst = 0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 gen(seed);
    const std::size_t V = 6;
    const auto model = test::gaussian_model(V, seed);
    const ParameterSnapshot reference(test::gaussian_model(V, seed + 100));
    const auto q = test::random_discrepancy(gen, V);
    std::vector<TokenizedSample> batch;
    for (int k = 0; k < 3; ++k) batch.push_back(test::random_sample(gen, V, 3, 5));
    for (auto method : {Method::sft, Method::dpo, Method::pro}) {
      for (bool deft : {false, true}) {
        TrainConfig cfg;
        cfg.method = method;
        cfg.omega = deft ? 0.7 : 0.0;
        const test::LossFn loss = [&](const BigramModel& m, GradientTable* g) {
          double total = 0;
          for (const auto& s : batch) total += deft_loss(cfg, m, &reference, deft ? &q : nullptr, s, 1.0, g).total;
          return total;
        };
        const double e = test::max_gradient_error(model, loss, 1e-5);
        if (e >= worst) {
          worst = e;
          worst_name = (deft ? "DEFT-" : "") + method_name(method);
        }
      }
    }
  }
  return {worst < 1e-4, fmt("max relative error %.2e", worst) + " (" + worst_name + ")"};
}

// --- 5 ---------------------------------------------------------------------

Outcome convergence() {
  auto median_l1 = [](std::size_t n) {
    std::vector<double> l1;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SyntheticSpec spec;
      spec.sample_count = n;
      spec.seed = seed;
      const auto data = generate(spec);
      const auto q = extract_discrepancy(data.samples, data.vocab.size());
      double d = 0;
      for (TokenId i = 0; i < q.vocab_size(); ++i) d += std::abs(q.weight(i) - data.truth.weight(i));
      l1.push_back(d);
    }
    return median(l1);
  };
  const double small = median_l1(4000), large = median_l1(64000);
  return {large < 0.5 * small, fmt("L1 N=4000 %.4g, N=64000 %.4g, ratio %.3f", small, large, large / small)};
}

// --- 6 ---------------------------------------------------------------------

ExperimentConfig experiment(ExperimentConfig::Scorer scorer) {
  ExperimentConfig cfg;
  cfg.data.sample_count = 20000;
  cfg.fraction = 0.05;
  cfg.scorer = scorer;
  return cfg;
}

struct FilterComparison {
  int wins = 0;
  std::vector<double> lowest, random;
};

FilterComparison compare_selection(ExperimentConfig::Scorer scorer) {
  FilterComparison c;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = experiment(scorer);
    const auto prepared = prepare_experiment(cfg, seed);
    const double a = run_prepared(prepared, cfg, seed).true_score;
    cfg.selection = ExperimentConfig::Selection::random;
    const double b = run_prepared(prepared, cfg, seed).true_score;
    c.lowest.push_back(a);
    c.random.push_back(b);
    c.wins += a > b;
  }
  return c;
}

Outcome filtering_beats_random() {
  const auto c = compare_selection(ExperimentConfig::Scorer::initial);
  return {c.wins >= 8, std::to_string(c.wins) + "/10 seeds; median true score lowest " +
                           fmt("%.4f vs random %.4f", median(c.lowest), median(c.random))};
}

// --- 7 ---------------------------------------------------------------------

Outcome guidance_effect() {
  int wins = 0;
  bool identical = true;
  double gap = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec spec;
    spec.sample_count = 2000;
    spec.seed = seed;
    const auto data = generate(spec);
    const auto q = extract_discrepancy(data.samples, data.vocab.size());
    const auto m0 = init_model(spec.vocab_size());
    TrainConfig base;
    base.method = Method::pro;
    base.seed = seed;
    base.omega = 0.0;
    TrainConfig guided = base;
    guided.omega = 0.1;
    TrainConfig monitor = base;
    monitor.omega = 0.1;
    monitor.rq_in_loss = false;
    const auto a = run_training(base, data.samples, &q, m0);
    const auto b = run_training(guided, data.samples, &q, m0);
    const auto m = run_training(monitor, data.samples, &q, m0);
    const double ra = a.log.epochs.back().mean_reward, rb = b.log.epochs.back().mean_reward;
    wins += rb > ra;
    gap += (rb - ra) / 10;
    const auto ta = a.log.reward_trace(), tm = m.log.reward_trace();
    identical = identical && ta.size() == tm.size() &&
                std::equal(ta.begin(), ta.end(), tm.begin(), [](double x, double y) {
                  return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
                });
  }
  return {wins >= 8 && identical, std::to_string(wins) + "/10 seeds, mean final-epoch R_Q gain " + fmt("%.3g", gap) +
                                      (identical ? ", monitoring trace bit-identical" : ", monitoring trace DIFFERS")};
}

// --- 8 ---------------------------------------------------------------------

Outcome cost_reduction() {
  auto cfg = experiment(ExperimentConfig::Scorer::initial);
  const auto prepared = prepare_experiment(cfg, 0);
  double subset = 1e300, full = 1e300;
  for (int rep = 0; rep < 3; ++rep) {
    cfg.fraction = 0.05;
    subset = std::min(subset, run_prepared(prepared, cfg, 0).train_seconds);
    cfg.fraction = 1.0;
    full = std::min(full, run_prepared(prepared, cfg, 0).train_seconds);
  }
  return {subset <= 0.1 * full, fmt("5%%: %.4f s, full: %.4f s, ratio %.3f", subset, full, subset / full)};
}

// --- 9 ---------------------------------------------------------------------

Outcome sweep_shape() {
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  const auto cfg = experiment(ExperimentConfig::Scorer::initial);
  const auto r = fraction_sweep({0.03, 0.05, 0.1, 0.2, 1.0}, seeds, cfg.data.sample_count,
                                [&](double f, std::uint64_t seed) {
                                  auto c = cfg;
                                  c.fraction = f;
                                  return run_experiment(c, seed).true_score;
                                },
                                4);
  std::string detail = "medians";
  for (const auto& p : r.summary) detail += fmt(" %g:%.4f", p.fraction, p.median_metric);
  return {r.at(0.05).median_metric >= r.at(1.0).median_metric, detail};
}

// --- 10 --------------------------------------------------------------------

Outcome cli_determinism() {
  test::TempDir root;
  const std::string exe = DEFT_CLI_PATH;
  const std::vector<std::vector<std::string>> commands = {
      {"synth", "--samples", "300", "--seed", "5", "--out", "syn"},
      {"vocab", "--data", "syn/data.jsonl", "--out", "vocab.txt"},
      {"extract", "--data", "syn/data.jsonl", "--vocab", "syn/vocab.txt", "--seed", "5", "--out", "q.tsv"},
      {"score", "--data", "syn/data.jsonl", "--vocab", "syn/vocab.txt", "--qdiff", "q.tsv", "--init", "gaussian",
       "--seed", "5", "--out", "scores.tsv"},
      {"filter", "--scores", "scores.tsv", "--fraction", "0.1", "--data", "syn/data.jsonl", "--data-out", "sub.jsonl",
       "--seed", "5", "--out", "decisions.tsv"},
      {"train", "--data", "syn/data.jsonl", "--vocab", "syn/vocab.txt", "--qdiff", "q.tsv", "--omega", "0", "--seed",
       "5", "--metrics", "base.tsv", "--out", "base.bin"},
      {"train", "--data", "sub.jsonl", "--vocab", "syn/vocab.txt", "--qdiff", "q.tsv", "--omega", "0.1", "--seed", "5",
       "--metrics", "deft.tsv", "--out", "deft.bin"},
      {"shift", "--vocab", "syn/vocab.txt", "--model-a", "base.bin", "--model-b", "deft.bin", "--data",
       "syn/data.jsonl", "--seed", "5", "--out", "shift.tsv"},
      {"sweep", "--samples", "300", "--held-out", "50", "--fractions", "0.1,1", "--seeds", "2", "--seed", "5",
       "--threads", "2", "--out", "sweep.tsv"},
  };
  const char* outputs[] = {"syn/data.jsonl", "syn/vocab.txt", "syn/truth.tsv", "syn/annotations.tsv", "vocab.txt",
                           "q.tsv",          "scores.tsv",    "decisions.tsv", "sub.jsonl",           "base.tsv",
                           "base.bin",       "deft.tsv",      "deft.bin",      "shift.tsv",           "sweep.tsv"};
  for (const char* round : {"a", "b"}) {
    const auto dir = root / round;
    std::filesystem::create_directories(dir);
    for (const auto& args : commands) {
      std::string line = "cd '" + dir.string() + "' && '" + exe + "'";
      for (const auto& a : args) line += " '" + a + "'";
      line += " > /dev/null 2>&1";
      if (std::system(line.c_str()) != 0) return {false, "'" + args[0] + "' exited non-zero"};
    }
  }
  std::string differing;
  for (const char* f : outputs) {
    const auto a = root / "a" / f, b = root / "b" / f;
    if (!std::filesystem::exists(a) || test::slurp(a) != test::slurp(b)) differing += std::string(" ") + f;
  }
  return {differing.empty(), differing.empty() ? "8 subcommands, " + std::to_string(std::size(outputs)) +
                                                     " output files byte-identical"
                                               : "differs:" + differing};
}

struct Criterion {
  int number;
  const char* name;
  double budget_seconds;  // 0 = no runtime bound
  Outcome (*run)();
};

}  // namespace
}  // namespace deft

int main() {
  using namespace deft;
  const Criterion criteria[] = {
      {1, "quota arithmetic", 1.0, quotas},
      {2, "distribution algebra", 10.0, distribution_algebra},
      {3, "reward invariants", 10.0, reward_invariants},
      {4, "gradient oracle", 60.0, gradient_oracle},
      {5, "convergence", 120.0, convergence},
      {6, "filtering beats random", 300.0, filtering_beats_random},
      {7, "guidance effect", 0.0, guidance_effect},
      {8, "cost reduction", 0.0, cost_reduction},
      {9, "sweep shape", 0.0, sweep_shape},
      {10, "CLI determinism", 0.0, cli_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double t = seconds_since(start);
    const bool in_time = c.budget_seconds == 0.0 || t < c.budget_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << c.number << " (" << c.name << "): " << o.detail
              << fmt(" [%.2f s", t) << (c.budget_seconds > 0 ? fmt(" / %.0f s]", c.budget_seconds) : "]")
              << (in_time ? "" : " over time budget") << std::endl;
    if (c.number == 6) {
      // Not a criterion: the same comparison with a scorer that has seen one SFT epoch.
      const auto d = compare_selection(ExperimentConfig::Scorer::sft_base);
      std::cout << "      diagnostic (sft_base scorer): " << d.wins << "/10 seeds; median lowest "
                << fmt("%.4f vs random %.4f", median(d.lowest), median(d.random)) << std::endl;
    }
  }
  std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
