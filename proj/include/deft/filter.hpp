#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "deft/error.hpp"
#include "deft/reward.hpp"
#include "deft/text_io.hpp"

namespace deft {

// ceil(fraction * n). Products that land within floating-point noise of an
// integer are treated as that integer (0.05 * 52420 is exactly 2621).
inline std::size_t selection_quota(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidInput("fraction must be in (0,1]");
  const double x = fraction * static_cast<double>(n);
  const double nearest = std::round(x);
  const double q = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(q));
}

struct FilterDecision {
  std::string id;
  std::string subset;
  double reward = 0.0;
  std::size_t rank = 0;  // ascending R_Q within the subset, 0 = lowest
  bool selected = false;
};

struct SubsetQuota {
  std::size_t size = 0;
  std::size_t quota = 0;
};

struct FilterResult {
  std::vector<FilterDecision> decisions;  // input order
  std::map<std::string, SubsetQuota> quotas;

  std::vector<std::string> selected_ids() const {
    std::vector<std::string> ids;
    for (const auto& d : decisions) {
      if (d.selected) ids.push_back(d.id);
    }
    return ids;
  }
};

enum class QuotaScope { per_subset, global };

// Keeps the lowest-R_Q fraction of each subset. Ties are broken by ascending
// id so the outcome never depends on input order.
inline FilterResult select_lowest(std::span<const ScoredSample> scores, double fraction,
                                  QuotaScope scope = QuotaScope::per_subset) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidInput("fraction must be in (0,1]");
  for (const auto& s : scores) {
    if (!std::isfinite(s.reward)) throw InvalidInput("sample '" + s.id + "' has a non-finite R_Q");
  }
  FilterResult result;
  result.decisions.reserve(scores.size());
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    result.decisions.push_back({scores[i].id, scores[i].subset, scores[i].reward, 0, false});
    groups[scope == QuotaScope::global ? std::string("*") : scores[i].subset].push_back(i);
  }
  for (auto& [tag, members] : groups) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a].reward != scores[b].reward) return scores[a].reward < scores[b].reward;
      return scores[a].id < scores[b].id;
    });
    const auto quota = selection_quota(members.size(), fraction);
    result.quotas[tag] = {members.size(), quota};
    for (std::size_t r = 0; r < members.size(); ++r) {
      auto& d = result.decisions[members[r]];
      d.rank = r;
      d.selected = r < quota;
    }
  }
  return result;
}

inline void write_decisions(std::ostream& os, const FilterResult& result) {
  os << "id\tsubset\tR_Q\trank\tselected\n";
  for (const auto& d : result.decisions) {
    os << d.id << '\t' << d.subset << '\t' << format_real(d.reward) << '\t' << d.rank << '\t'
       << (d.selected ? 1 : 0) << '\n';
  }
  os << "# subset\tn\tquota\n";
  for (const auto& [tag, q] : result.quotas) os << "# " << tag << '\t' << q.size << '\t' << q.quota << '\n';
}

}  // namespace deft
