#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support.hpp"

namespace deft {
namespace {

using Corpus = std::vector<std::vector<TokenId>>;

double sum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

TEST(Shift, IdenticalCorporaHaveNoShift) {
  const Corpus a{{2, 3, 3}, {4}};
  const auto r = distribution_shift(a, a, 5);
  ASSERT_EQ(r.tokens.size(), 3u);
  for (const auto& t : r.tokens) {
    EXPECT_EQ(t.delta_count, 0);
    EXPECT_EQ(t.delta_frequency, 0.0);
  }
  EXPECT_EQ(r.count_buckets.by_type[0], 100.0);
  EXPECT_EQ(r.frequency_buckets.by_type[0], 100.0);
  EXPECT_EQ(r.count_buckets.by_occurrence[0], 100.0);
}

TEST(Shift, HandCounts) {
  const Vocab v({"a", "b"});
  const Corpus a{tokenize("a a", v)}, b{tokenize("a b", v)};
  const auto r = distribution_shift(a, b, v.size());
  ASSERT_EQ(r.tokens.size(), 2u);
  EXPECT_EQ(r.tokens[0].delta_count, -1);
  EXPECT_EQ(r.tokens[1].delta_count, 1);
  EXPECT_DOUBLE_EQ(r.tokens[0].delta_frequency, -50.0);
  EXPECT_DOUBLE_EQ(r.tokens[1].delta_frequency, 50.0);
  EXPECT_EQ(r.count_buckets.by_type[0], 100.0);  // |1| < 5
  EXPECT_EQ(r.frequency_buckets.by_type.back(), 100.0);
}

TEST(Shift, EmptyCorpusIsAnError) {
  EXPECT_THROW(distribution_shift(Corpus{}, Corpus{{2}}, 4), InvalidInput);
  EXPECT_THROW(distribution_shift(Corpus{{2}}, Corpus{{}}, 4), InvalidInput);
  EXPECT_THROW(distribution_shift(Corpus{{9}}, Corpus{{2}}, 4), InvalidInput);
}

TEST(Shift, BucketEdgesAreHalfOpen) {
  const auto& e = default_count_edges();
  EXPECT_EQ(detail::bucket_of(0, e), 0u);
  EXPECT_EQ(detail::bucket_of(4.999, e), 0u);
  EXPECT_EQ(detail::bucket_of(5, e), 1u);
  EXPECT_EQ(detail::bucket_of(200, e), 5u);
  EXPECT_EQ(detail::bucket_of(1e9, e), 5u);
  EXPECT_EQ(bucket_label(e, 5), "[200,+inf)");
  EXPECT_EQ(bucket_label(default_frequency_edges(), 0), "[0,0.001)");
}

class ShiftRandom : public ::testing::TestWithParam<int> {};

TEST_P(ShiftRandom, AntisymmetryAndConservation) {
  std::mt19937_64 gen(GetParam());
  const std::size_t V = 5 + gen() % 30;
  Corpus a, b;
  for (int k = 0; k < 20; ++k) {
    a.push_back(test::random_tokens(gen, 1 + gen() % 30, V));
    b.push_back(test::random_tokens(gen, 1 + gen() % 30, V));
  }
  const auto ab = distribution_shift(a, b, V);
  const auto ba = distribution_shift(b, a, V);
  ASSERT_EQ(ab.tokens.size(), ba.tokens.size());
  double total = 0;
  for (std::size_t i = 0; i < ab.tokens.size(); ++i) {
    EXPECT_EQ(ab.tokens[i].delta_count, -ba.tokens[i].delta_count);
    EXPECT_EQ(ab.tokens[i].delta_frequency, -ba.tokens[i].delta_frequency);
    total += ab.tokens[i].delta_frequency;
  }
  EXPECT_NEAR(total, 0.0, 1e-9);
  for (const auto* t : {&ab.count_buckets, &ab.frequency_buckets}) {
    EXPECT_NEAR(sum(t->by_type), 100.0, 0.01);
    EXPECT_NEAR(sum(t->by_occurrence), 100.0, 0.01);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, ShiftRandom, ::testing::Range(0, 30));

TEST(Shift, ReportLayout) {
  const Vocab v({"a", "b"});
  std::ostringstream os;
  write_shift_report(os, distribution_shift(Corpus{{2, 2}}, Corpus{{2, 3}}, v.size()), v);
  const auto text = os.str();
  EXPECT_EQ(text.rfind("token\tcount_A\tcount_B\tdelta_count\tdelta_frequency_pp\na\t2\t1\t-1\t-50\n", 0), 0u);
  EXPECT_NE(text.find("# abs_delta_count\t[0,5)\t100\t100\n"), std::string::npos);
  EXPECT_NE(text.find("# abs_delta_frequency_pp\t[0.05,+inf)\t100\t100\n"), std::string::npos);
}

TEST(Shift, GuidedModelShiftsFewTokensFarFromBaseline) {
  // Baseline PRO vs PRO+guidance from the same start and data; generations
  // share the sampling stream so differences come from the models only.
  SyntheticSpec spec;
  spec.sample_count = 400;
  spec.seed = 8;
  const auto d = generate(spec);
  const auto q = extract_discrepancy(d.samples, d.vocab.size());
  TrainConfig base;
  base.method = Method::pro;
  base.omega = 0.0;
  TrainConfig guided = base;
  guided.omega = 0.1;
  const auto m0 = init_model(spec.vocab_size());
  const auto ma = run_training(base, d.samples, &q, m0).model;
  const auto mb = run_training(guided, d.samples, &q, m0).model;
  Corpus prompts;
  for (const auto& s : d.samples) prompts.push_back(s.prompt);
  const auto r = distribution_shift(sample_corpus(ma, prompts, 16, 3), sample_corpus(mb, prompts, 16, 3), d.vocab.size());
  EXPECT_GT(r.count_buckets.by_type[0] + r.count_buckets.by_type[1], 50.0);
}

TEST(Decode, GreedyAndSampled) {
  BigramModel m(4);
  m.row(Vocab::bos_id)[2] = 3.0;
  m.row(2)[3] = 3.0;
  m.row(3)[2] = 3.0;
  EXPECT_EQ(greedy_decode(m, {}, 4), (std::vector<TokenId>{2, 3, 2, 3}));
  EXPECT_EQ(greedy_decode(BigramModel(4), std::vector<TokenId>{3}, 2), (std::vector<TokenId>{0, 0}));
  Rng r1(4), r2(4);
  EXPECT_EQ(sample_decode(m, {}, 50, r1), sample_decode(m, {}, 50, r2));

  // Sampled frequencies track the model distribution.
  BigramModel flat(3);
  flat.row(0)[2] = std::log(3.0);  // p = (0.2, 0.2, 0.6) after context 0
  Rng rng(9);
  std::vector<double> counts(3);
  for (int k = 0; k < 20000; ++k) counts[sample_decode(flat, std::vector<TokenId>{0}, 1, rng)[0]] += 1;
  EXPECT_NEAR(counts[2] / 20000, 0.6, 0.02);
}

TEST(Stats, MedianRanksAndSpearman) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), InvalidInput);
  EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{8, 6, 4, 1}), -1.0, 1e-15);
  EXPECT_TRUE(std::isnan(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{0, 0, 0})));
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, y{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  EXPECT_LT(spearman_negative_test(x, y, 999, 1).p_value, 0.01);
  EXPECT_GT(spearman_negative_test(x, x, 999, 1).p_value, 0.5);
}

TEST(Sweep, SingleFullFractionEqualsFullTraining) {
  std::size_t calls = 0;
  const std::vector<std::uint64_t> seeds{7};
  const auto r = fraction_sweep({1.0}, seeds, 40, [&](double f, std::uint64_t s) {
    ++calls;
    return f * 10 + static_cast<double>(s);
  });
  EXPECT_EQ(calls, 1u);
  ASSERT_EQ(r.summary.size(), 1u);
  EXPECT_EQ(r.summary[0].quota, 40u);
  EXPECT_EQ(r.summary[0].median_metric, 17.0);
}

TEST(Sweep, QuotaArithmeticOrderingAndMedians) {
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto r = fraction_sweep({1.0, 0.05}, seeds, 2001, [](double f, std::uint64_t s) { return f + 100.0 * s; });
  ASSERT_EQ(r.summary.size(), 2u);
  EXPECT_EQ(r.summary[0].fraction, 0.05);
  EXPECT_EQ(r.summary[0].quota, 101u);
  EXPECT_EQ(r.summary[1].quota, 2001u);
  ASSERT_EQ(r.runs.size(), 4u);
  EXPECT_EQ(r.at(0.05).median_metric, 150.05);
  EXPECT_THROW(r.at(0.5), InvalidInput);
  EXPECT_THROW(fraction_sweep({0.5, 0.5}, seeds, 10, [](double, std::uint64_t) { return 0.0; }), InvalidInput);
  EXPECT_THROW(fraction_sweep({0.0}, seeds, 10, [](double, std::uint64_t) { return 0.0; }), InvalidInput);
}

TEST(Sweep, ParallelModeMatchesSequential) {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  auto pipeline = [](double f, std::uint64_t s) {
    ExperimentConfig cfg;
    cfg.data.sample_count = 200;
    cfg.held_out = 50;
    cfg.fraction = f;
    return run_experiment(cfg, s).true_score;
  };
  const auto a = fraction_sweep({0.1, 0.5}, seeds, 200, pipeline, 1);
  const auto b = fraction_sweep({0.1, 0.5}, seeds, 200, pipeline, 3);
  std::ostringstream sa, sb;
  write_sweep(sa, a);
  write_sweep(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Pipeline, SelectionUsesTheQuota) {
  ExperimentConfig cfg;
  cfg.data.sample_count = 300;
  cfg.held_out = 20;
  cfg.fraction = 0.05;
  EXPECT_EQ(run_experiment(cfg, 1).selected, 15u);
  cfg.selection = ExperimentConfig::Selection::random;
  EXPECT_EQ(run_experiment(cfg, 1).selected, 15u);
  cfg.train.method = Method::dpo;
  EXPECT_NO_THROW(run_experiment(cfg, 1));
}

}  // namespace
}  // namespace deft
