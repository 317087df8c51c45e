#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "miqrec/attention.hpp"
#include "miqrec/tape.hpp"

namespace miqrec::model {

struct ModelConfig {
  int d = 50;
  int seq_len = 200;  // T
  int blocks = 2;     // L
  int m = 1;          // query window; 1 = baseline single-query attention
  double dropout = 0.2;
  attn::AggMode agg = attn::AggMode::kContext;
  bool dummy_kv = true;  // dummy tokens visible as keys/values everywhere
  int heads = 1;
  uint64_t seed = 42;

  int extended_len() const { return seq_len + m - 1; }
  void validate() const;
};

// Per-tape leaf bindings for every parameter; create once per forward pass.
struct ModelVars {
  Var emb, pos;
  struct BlockVars {
    std::vector<Var> wq;
    Var wk, wv, w1, b1, w2, b2, ln1g, ln1b, ln2g, ln2b;
  };
  std::vector<BlockVars> blocks;
  Var agg_wq, agg_wk, agg_wv;  // bound only when m >= 2
};

// The attention sublayer on one extended sequence (tp x d). Shared by the
// model blocks and the flop benchmark so both exercise the same kernels.
struct SublayerVars {
  std::vector<Var> wq;  // m slot projections
  Var wk, wv;
  Var agg_wq, agg_wk, agg_wv;
};
Var attention_sublayer(Tape& tape, const SublayerVars& sv, Var x, int m, int heads, bool dummy_kv,
                       attn::AggMode mode);

struct ForwardOut {
  Var extended;  // tp x d
  Var real;      // T x d (dummy rows dropped)
};

struct ParamAudit {
  struct Item {
    std::string name;
    long long count = 0;
  };
  std::vector<Item> items;
  long long total = 0;
};

// Extra parameters a query window m adds over the m = 1 baseline:
// L (m-1) d^2 slot projections, (m-1) d dummy embeddings, (m-1) d positional
// rows, 3 d^2 shared aggregator projections.
long long miq_param_delta(int d, int blocks, int m);

class SeqRecModel {
 public:
  SeqRecModel(ModelConfig cfg, int item_count, RngStream& rng);

  const ModelConfig& config() const { return cfg_; }
  int item_count() const { return item_count_; }

  std::vector<Parameter*> parameters() const;
  Parameter& param(const std::string& name) const;
  Parameter& embedding() const { return *params_[0]; }

  ModelVars bind(Tape& tape) const;

  // One left-padded row of seq_len item ids through the full stack.
  ForwardOut forward_row(Tape& tape, const ModelVars& mv, std::span<const int> padded_row,
                         bool training, RngStream* rng) const;

  // logits indexed by item id (entry 0 unused and set to -inf); dummy ids are
  // not scored.
  std::vector<double> score_items(std::span<const double> f_t) const;

  // Ranked item ids, best first; ties broken by ascending id.
  std::vector<int> predict_next(std::span<const int> raw_sequence) const;

  ParamAudit param_count() const;

  void save(const std::string& path) const;
  void save(std::string& out) const;
  static SeqRecModel load(const std::string& path);
  static SeqRecModel load_from_buffer(const std::string& buf, const std::string& origin);

  // Copies parameter values from an identically shaped model.
  void copy_values_from(const SeqRecModel& other);

 private:
  struct PrivateTag {};
  SeqRecModel(ModelConfig cfg, int item_count, PrivateTag);
  void allocate();

  ModelConfig cfg_;
  int item_count_ = 0;
  std::vector<std::unique_ptr<Parameter>> params_;

  // layout indices into params_
  std::vector<std::vector<int>> blk_;
  int agg_base_ = -1;
};

constexpr double kLayerNormEps = 1e-8;

}  // namespace miqrec::model
