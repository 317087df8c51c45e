#include "miqrec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>
#include <unordered_map>

#include "miqrec/io_util.hpp"

namespace miqrec::data {

LogFormat format_from_string(const std::string& s) {
  if (s == "umt") return LogFormat::kUmt;
  if (s == "umrt") return LogFormat::kUmrt;
  if (s == "movielens") return LogFormat::kMovielens;
  throw config_error("unknown input format '" + s + "' (expected umt, umrt or movielens)");
}

namespace {

bool parse_i64(std::string_view tok, int64_t& out) {
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && p == last;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string_view> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  size_t pos = 0;
  while (true) {
    const size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return out;
}

struct Reindexer {
  std::unordered_map<int64_t, int> map;
  std::vector<int64_t> raw;  // index 1..n
  Reindexer() : raw(1, 0) {}
  int encode(int64_t raw_id) {
    auto [it, inserted] = map.try_emplace(raw_id, (int)raw.size());
    if (inserted) raw.push_back(raw_id);
    return it->second;
  }
};

}  // namespace

InteractionLog parse_interactions(std::istream& in, LogFormat fmt) {
  InteractionLog log;
  Reindexer users, items;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> tok;
    size_t expected;
    size_t ts_col;
    if (fmt == LogFormat::kMovielens) {
      tok = split_on(line, "::");
      expected = 4;
      ts_col = 3;
    } else {
      tok = split_ws(line);
      expected = fmt == LogFormat::kUmt ? 3 : 4;
      ts_col = expected - 1;
    }
    int64_t u, i, ts;
    if (tok.size() != expected || !parse_i64(tok[0], u) || !parse_i64(tok[1], i) ||
        !parse_i64(tok[ts_col], ts))
      throw data_error("parse error at line " + std::to_string(line_no) + ": '" + line + "'");
    log.records.push_back({users.encode(u), items.encode(i), ts});
  }
  if (log.records.empty()) throw data_error("empty interaction log");
  log.user_count = (int)users.raw.size() - 1;
  log.item_count = (int)items.raw.size() - 1;
  log.raw_user_ids = std::move(users.raw);
  log.raw_item_ids = std::move(items.raw);
  return log;
}

InteractionLog kcore_filter(const InteractionLog& log, int k) {
  if (k < 1) throw config_error("kcore_filter: k must be >= 1");
  std::vector<char> keep(log.records.size(), 1);
  std::vector<int> ucount(log.user_count + 1), icount(log.item_count + 1);
  bool changed = true;
  while (changed) {
    std::fill(ucount.begin(), ucount.end(), 0);
    std::fill(icount.begin(), icount.end(), 0);
    for (size_t r = 0; r < log.records.size(); ++r) {
      if (!keep[r]) continue;
      ++ucount[log.records[r].user];
      ++icount[log.records[r].item];
    }
    changed = false;
    for (size_t r = 0; r < log.records.size(); ++r) {
      if (!keep[r]) continue;
      if (ucount[log.records[r].user] < k || icount[log.records[r].item] < k) {
        keep[r] = 0;
        changed = true;
      }
    }
  }

  InteractionLog out;
  Reindexer users, items;
  for (size_t r = 0; r < log.records.size(); ++r) {
    if (!keep[r]) continue;
    const auto& rec = log.records[r];
    out.records.push_back(
        {users.encode(log.raw_user_ids[rec.user]), items.encode(log.raw_item_ids[rec.item]),
         rec.ts});
  }
  if (out.records.empty())
    throw data_error("kcore_filter: no interactions survive k=" + std::to_string(k));
  out.user_count = (int)users.raw.size() - 1;
  out.item_count = (int)items.raw.size() - 1;
  out.raw_user_ids = std::move(users.raw);
  out.raw_item_ids = std::move(items.raw);
  return out;
}

std::vector<UserSequence> build_sequences(const InteractionLog& log) {
  if (log.records.empty()) throw data_error("build_sequences: empty log");
  struct Entry {
    int64_t ts;
    size_t order;
    int item;
  };
  std::vector<std::vector<Entry>> per_user(log.user_count + 1);
  for (size_t r = 0; r < log.records.size(); ++r) {
    const auto& rec = log.records[r];
    per_user[rec.user].push_back({rec.ts, r, rec.item});
  }
  std::vector<UserSequence> out;
  for (int u = 1; u <= log.user_count; ++u) {
    auto& entries = per_user[u];
    if (entries.size() < 3) continue;
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.ts < b.ts; });
    UserSequence seq;
    seq.user = u;
    seq.items.reserve(entries.size());
    for (const Entry& e : entries) seq.items.push_back(e.item);
    out.push_back(std::move(seq));
  }
  return out;
}

SplitSet leave_one_out_split(const std::vector<UserSequence>& seqs) {
  SplitSet out;
  out.reserve(seqs.size());
  for (const UserSequence& s : seqs) {
    const size_t n = s.items.size();
    if (n < 3)
      throw data_error("leave_one_out_split: user " + std::to_string(s.user) +
                       " has fewer than 3 actions");
    UserSplit sp;
    sp.user = s.user;
    sp.train.assign(s.items.begin(), s.items.end() - 2);
    sp.valid = s.items[n - 2];
    sp.test = s.items[n - 1];
    out.push_back(std::move(sp));
  }
  return out;
}

std::vector<int> pad_truncate(std::span<const int> items, int seq_len) {
  if (seq_len < 1) throw config_error("pad_truncate: length must be >= 1");
  std::vector<int> out(seq_len, 0);
  const size_t n = std::min<size_t>(items.size(), seq_len);
  for (size_t i = 0; i < n; ++i) out[seq_len - n + i] = items[items.size() - n + i];
  return out;
}

int sample_negative(RngStream& rng, const std::vector<char>& owned, int item_count) {
  long long owned_count = 0;
  for (int i = 1; i <= item_count; ++i) owned_count += owned[i] != 0;
  if (owned_count >= item_count)
    throw data_error("sample_negative: user owns the whole item set");
  while (true) {
    const int id = (int)rng.below((uint64_t)item_count) + 1;
    if (!owned[id]) return id;
  }
}

DatasetStats dataset_stats(const InteractionLog& log, std::string name) {
  if (log.records.empty()) throw data_error("dataset_stats: empty log");
  DatasetStats s;
  s.name = std::move(name);
  s.users = log.user_count;
  s.items = log.item_count;
  s.actions = (long long)log.records.size();
  s.avg_actions_user = (double)s.actions / (double)s.users;
  s.avg_actions_item = (double)s.actions / (double)s.items;
  return s;
}

SuggestedWindow suggest_query_window(const DatasetStats& stats) {
  SuggestedWindow sw;
  sw.m = (int)std::max(1ll, std::llround(stats.avg_actions_user / 10.0));
  if (sw.m == 1) {
    sw.unsuitable = true;
    sw.message =
        "suggested query window is 1: sequences average " +
        std::to_string(stats.avg_actions_user) +
        " actions per user, too short for multi-item queries to help";
  } else {
    sw.message = "suggested query window: " + std::to_string(sw.m);
  }
  return sw;
}

Dataset make_dataset(const InteractionLog& log, std::string name) {
  Dataset ds;
  ds.name = name;
  ds.item_count = log.item_count;
  ds.stats = dataset_stats(log, std::move(name));
  ds.sequences = build_sequences(log);
  if (ds.sequences.empty()) throw data_error("make_dataset: no user has >= 3 actions");
  return ds;
}

namespace {
constexpr char kMagic[4] = {'M', 'I', 'Q', 'D'};
constexpr uint16_t kVersion = 1;
}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::string buf;
  io::append_bytes(buf, kMagic, 4);
  io::append_u16(buf, kVersion);
  io::append_str(buf, ds.name);
  io::append_u32(buf, (uint32_t)ds.item_count);
  io::append_u64(buf, (uint64_t)ds.stats.users);
  io::append_u64(buf, (uint64_t)ds.stats.actions);
  io::append_f64(buf, ds.stats.avg_actions_user);
  io::append_f64(buf, ds.stats.avg_actions_item);
  io::append_u32(buf, (uint32_t)ds.sequences.size());
  for (const UserSequence& s : ds.sequences) {
    io::append_u32(buf, (uint32_t)s.user);
    io::append_u32(buf, (uint32_t)s.items.size());
    for (int it : s.items) io::append_u32(buf, (uint32_t)it);
  }
  io::write_file_atomic(path, buf);
}

Dataset load_dataset(const std::string& path) {
  std::string buf = io::read_file(path);
  io::Reader r(buf, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw data_error(path + ": not a dataset cache (bad magic)");
  if (r.u16() != kVersion) throw data_error(path + ": unsupported cache version");
  Dataset ds;
  ds.name = r.str();
  ds.item_count = (int)r.u32();
  ds.stats.name = ds.name;
  ds.stats.users = (long long)r.u64();
  ds.stats.actions = (long long)r.u64();
  ds.stats.items = ds.item_count;
  ds.stats.avg_actions_user = r.f64();
  ds.stats.avg_actions_item = r.f64();
  const uint32_t n = r.u32();
  ds.sequences.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    ds.sequences[i].user = (int)r.u32();
    const uint32_t len = r.u32();
    ds.sequences[i].items.resize(len);
    for (uint32_t j = 0; j < len; ++j) ds.sequences[i].items[j] = (int)r.u32();
  }
  return ds;
}

std::string stats_csv(const DatasetStats& s) {
  std::string out = "dataset,users,items,avg_actions_user,avg_actions_item,actions\n";
  out += s.name + "," + std::to_string(s.users) + "," + std::to_string(s.items) + "," +
         io::fmt_double(s.avg_actions_user) + "," + io::fmt_double(s.avg_actions_item) + "," +
         std::to_string(s.actions) + "\n";
  return out;
}

}  // namespace miqrec::data
