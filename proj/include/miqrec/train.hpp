#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miqrec/adam.hpp"
#include "miqrec/data.hpp"
#include "miqrec/eval.hpp"
#include "miqrec/model.hpp"
#include "miqrec/numeric.hpp"

namespace miqrec::train {

struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 128;
  int max_epochs = 200;
  int eval_every = 10;   // epochs between validation evaluations
  int patience = 20;     // evaluations without improvement before stopping
  uint64_t seed = 42;
  void validate() const;
  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  bool evaluated = false;
  double val_hr10 = 0.0;
  double val_ndcg10 = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_ndcg10 = -1.0;
};

// Mean over valid positions of -log sigma(pos) - log(1 - sigma(neg)),
// computed with stable log-sigmoids.
double bce_loss(const Matrix& pos_logits, const Matrix& neg_logits,
                const std::vector<uint8_t>& valid);

// One pass over all users in seeded shuffle order, one Adam step per batch;
// returns the epoch mean loss (total position loss / total valid positions).
double train_epoch(model::SeqRecModel& m, const data::SplitSet& split, const TrainConfig& tc,
                   Adam& opt, RngStream& rng);

struct FitResult {
  TrainHistory history;
  // serialized best checkpoint; reload with SeqRecModel::load_from_buffer
  std::string best_checkpoint;
};

// Trains with early stopping on validation NDCG@10. The best checkpoint is
// kept (and written to checkpoint_path when non-empty); the model is left at
// the best weights on return. on_epoch, when set, observes the history after
// every epoch so partial progress survives a divergence error.
FitResult fit(model::SeqRecModel& m, const data::SplitSet& split, const TrainConfig& tc,
              const std::string& checkpoint_path = "",
              const std::function<void(const TrainHistory&)>& on_epoch = {});

std::string history_csv(const TrainHistory& h);

struct GradCheckReport {
  std::vector<numeric::GroupCheck> groups;
  double tolerance = 1e-4;
  bool pass = false;
};

// Full-model finite-difference verification on a deterministic synthetic
// batch (dropout forced off, unpadded rows so the pinned zero row never enters
// the objective).
GradCheckReport gradcheck_model(model::SeqRecModel& m, int rows, uint64_t seed, double epsilon,
                                double tolerance);

}  // namespace miqrec::train
