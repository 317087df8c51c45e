#pragma once

#include <functional>
#include <span>
#include <vector>

#include "miqrec/matrix.hpp"
#include "miqrec/rng.hpp"
#include "miqrec/tape.hpp"

namespace miqrec::numeric {

// Row-wise softmax restricted to unmasked entries (mask entry != 0 allows).
// Masked entries receive a -1e9 additive surrogate before exponentiation and
// are forced to exact zero afterwards; unmasked entries are stabilized by
// subtracting their row maximum.
Matrix masked_softmax_rows(const Matrix& scores, const Matrix& mask);

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps);

Matrix dropout(const Matrix& x, double rate, RngStream& rng, bool training);

// |g - fd| / max(1, |g|, |fd|)
inline double relative_error(double g, double fd) {
  const double denom = std::max(1.0, std::max(std::abs(g), std::abs(fd)));
  return std::abs(g - fd) / denom;
}

// Central finite differences of f over every coordinate of every parameter.
// f must be deterministic (fixed seeds, dropout disabled). Parameters are
// perturbed in place and restored.
std::vector<Matrix> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params, double epsilon);

struct GroupCheck {
  std::string name;
  double max_rel_error = 0.0;
};

// Compares analytic gradients already stored in each Parameter::grad against
// central finite differences of f; returns the per-parameter worst case.
std::vector<GroupCheck> compare_to_finite_diff(std::span<Parameter* const> params,
                                               const std::function<double()>& f, double epsilon);

}  // namespace miqrec::numeric
