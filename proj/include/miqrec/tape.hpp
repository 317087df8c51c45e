#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "miqrec/kernels.hpp"
#include "miqrec/matrix.hpp"
#include "miqrec/rng.hpp"

namespace miqrec {

// Learnable tensor: value plus a persistent gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad() { grad.zero(); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
  const Matrix& value() const;
};

// Reverse-mode tape. Ops append nodes holding the forward value and a pullback
// closure; backward() replays pullbacks in reverse creation order and finally
// adds each leaf gradient into its Parameter. One tape records one forward
// pass; backward may run once per recording.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Parameter& p);
  Var constant(Matrix m);

  Var matmul(Var a, Var b);
  // product of the first `rows` rows of a with b
  Var matmul_headrows(Var a, int rows, Var b);
  Var add(Var a, Var b);
  Var add_row_broadcast(Var x, Var row);
  Var scale(Var x, double s);
  Var relu(Var x);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var dropout(Var x, double rate, RngStream& rng, bool training);
  Var masked_softmax(Var scores, const Matrix& mask);
  // rows gathered from a table; gradient scatter skips table row 0 (padding)
  Var gather_rows(Var table, std::vector<int> ids);
  Var select_rows(Var x, int r0, int r1);
  Var causal_attention(Var qs, Var k, Var v, int row_start, int kv_lo, int heads);
  Var window_aggregate(const std::vector<Var>& slots, std::vector<int> row_starts, int tp, Var wq,
                       Var wk, Var wv, kernels::AggMode mode);
  // per-row dot products -> n x 1
  Var rows_dot(Var a, Var b);
  // sum over valid positions of -log sigma(pos) - log(1 - sigma(neg)) -> 1 x 1
  Var bce_sum(Var pos, Var neg, std::vector<uint8_t> valid);

  void backward(Var loss);

  const Matrix& value(int idx) const;
  const Matrix& grad_of(Var v) const;  // test inspection
  size_t node_count() const { return nodes_.size(); }

  // Test-only fault injection: gradients flowing through the named op type are
  // perturbed, so downstream finite-difference checks must fail. Empty clears.
  static void set_pullback_fault(const std::string& op_name);
  static std::string pullback_fault();

 private:
  struct Node {
    Matrix val;                   // owned value (unused for leaves)
    const Matrix* leaf_val = nullptr;
    Matrix grad;
    bool has_grad = false;
    std::function<void()> pull;   // empty for leaves and constants
    Parameter* param = nullptr;
    const char* op = "";
  };

  int push(Node n);
  Node& node(int i) { return nodes_[i]; }
  const Matrix& val(int i) const {
    const Node& n = nodes_[i];
    return n.leaf_val ? *n.leaf_val : n.val;
  }
  Matrix& ensure_grad(int i);
  bool has_grad(int i) const { return nodes_[i].has_grad; }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace miqrec
