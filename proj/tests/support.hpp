#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "deft/deft.hpp"

namespace deft::test {

// Loss under test: returns the value and, when grad is non-null, adds its
// gradient.
using LossFn = std::function<double(const BigramModel&, GradientTable*)>;

// |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
// parameter, numeric by central differences.
inline double max_gradient_error(const BigramModel& model, const LossFn& loss, double h = 1e-5,
                                 double floor = 1e-6) {
  GradientTable g(model.vocab_size());
  loss(model, &g);
  BigramModel probe = model;
  double worst = 0.0;
  const std::size_t V = model.vocab_size();
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t j = 0; j < V; ++j) {
      auto row = probe.row(static_cast<TokenId>(c));
      const double saved = row[j];
      row[j] = saved + h;
      const double up = loss(probe, nullptr);
      row[j] = saved - h;
      const double down = loss(probe, nullptr);
      row[j] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g.at(static_cast<TokenId>(c), static_cast<TokenId>(j));
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& gen, std::size_t n, std::size_t V, TokenId lo = 2) {
  std::uniform_int_distribution<std::size_t> pick(lo, V - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(pick(gen));
  return out;
}

inline TokenizedSample random_sample(std::mt19937_64& gen, std::size_t V, std::size_t l, std::size_t max_len = 5) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  TokenizedSample s;
  s.id = std::to_string(gen() % 100000);
  s.prompt = random_tokens(gen, len(gen) - 1, V);
  for (std::size_t k = 0; k < l; ++k) s.responses.push_back(random_tokens(gen, len(gen), V));
  return s;
}

inline BigramModel gaussian_model(std::size_t V, std::uint64_t seed, double sigma = 1.0) {
  InitOptions o;
  o.kind = InitOptions::Kind::gaussian;
  o.sigma = sigma;
  return init_model(V, o, seed);
}

// Q_diff with random signed weights summing to zero.
inline DiscrepancyDistribution random_discrepancy(std::mt19937_64& gen, std::size_t V) {
  CountTable pos(V), neg(V);
  std::uniform_int_distribution<std::size_t> pick(2, V - 1);
  for (int k = 0; k < 30; ++k) {
    pos.add(std::vector<TokenId>{static_cast<TokenId>(pick(gen))});
    neg.add(std::vector<TokenId>{static_cast<TokenId>(pick(gen))});
  }
  return discrepancy_from_counts(pos, neg);
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("deft_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace deft::test
