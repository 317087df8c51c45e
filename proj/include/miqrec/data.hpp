#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "miqrec/matrix.hpp"
#include "miqrec/rng.hpp"

namespace miqrec::data {

enum class LogFormat { kUmt, kUmrt, kMovielens };
LogFormat format_from_string(const std::string& s);

// Interaction records with ids reindexed to contiguous 1..U / 1..I
// (0 is reserved for padding). Input order is preserved.
struct InteractionLog {
  struct Record {
    int user = 0;
    int item = 0;
    int64_t ts = 0;
  };
  std::vector<Record> records;
  int user_count = 0;
  int item_count = 0;
  std::vector<int64_t> raw_user_ids;  // index 1..user_count
  std::vector<int64_t> raw_item_ids;  // index 1..item_count
};

// umt: "user item timestamp" whitespace separated; umrt adds an ignored rating
// column; movielens: "user::item::rating::timestamp".
InteractionLog parse_interactions(std::istream& in, LogFormat fmt);

// Iteratively removes users and items with fewer than k actions until every
// survivor has at least k, then reindexes.
InteractionLog kcore_filter(const InteractionLog& log, int k);

struct UserSequence {
  int user = 0;
  std::vector<int> items;  // chronological, ties kept in input order
};

// Per-user chronological sequences; users with fewer than 3 actions dropped.
std::vector<UserSequence> build_sequences(const InteractionLog& log);

struct UserSplit {
  int user = 0;
  std::vector<int> train;  // s_1 .. s_{n-2}
  int valid = 0;           // s_{n-1}
  int test = 0;            // s_n
};
using SplitSet = std::vector<UserSplit>;

SplitSet leave_one_out_split(const std::vector<UserSequence>& seqs);

// Keeps the seq_len most recent items, left-padding with 0.
std::vector<int> pad_truncate(std::span<const int> items, int seq_len);

// Uniform draw over items not owned by the user (never 0). owned is indexed by
// item id (size item_count + 1).
int sample_negative(RngStream& rng, const std::vector<char>& owned, int item_count);

struct DatasetStats {
  std::string name;
  long long users = 0;
  long long items = 0;
  long long actions = 0;
  double avg_actions_user = 0.0;
  double avg_actions_item = 0.0;
};

DatasetStats dataset_stats(const InteractionLog& log, std::string name);

struct SuggestedWindow {
  int m = 1;
  bool unsuitable = false;  // window of 1 leaves nothing to diversify
  std::string message;
};

// m = max(1, round(avg actions per user / 10)), with a warning when m = 1.
SuggestedWindow suggest_query_window(const DatasetStats& stats);

// Immutable processed dataset: sequences plus the log-level statistics.
struct Dataset {
  std::string name;
  int item_count = 0;
  DatasetStats stats;
  std::vector<UserSequence> sequences;
};

Dataset make_dataset(const InteractionLog& log, std::string name);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

std::string stats_csv(const DatasetStats& stats);

}  // namespace miqrec::data
