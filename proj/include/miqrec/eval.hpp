#pragma once

#include <span>
#include <string>
#include <vector>

#include "miqrec/data.hpp"
#include "miqrec/model.hpp"

namespace miqrec::eval {

struct MetricReport {
  std::string phase;
  std::vector<int> ks;
  std::vector<double> hr;
  std::vector<double> ndcg;
  long long users = 0;
  bool exclude_history = true;
};

// 1-based rank of the target among {target} + all items outside the user's
// history, ties broken by ascending item id. scores is indexed by item id
// (entry 0 ignored); history is an item-id indicator.
int rank_of_target(std::span<const double> scores, int target, const std::vector<char>& history);

double hr_at_k(std::span<const int> ranks, int k);
double ndcg_at_k(std::span<const int> ranks, int k);

enum class Phase { kValid, kTest };

// Full-corpus leave-one-out ranking. Parallel over users against the frozen
// model; per-user ranks are exact, so results do not depend on thread count.
MetricReport evaluate(const model::SeqRecModel& m, const data::SplitSet& split, Phase phase,
                      std::span<const int> ks, bool exclude_history = true);

std::string report_csv(const MetricReport& report);

}  // namespace miqrec::eval
