#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace miqrec {

// Library errors carry the process exit code the CLI maps them to.
struct Error : std::runtime_error {
  int exit_code;
  Error(std::string msg, int code) : std::runtime_error(std::move(msg)), exit_code(code) {}
};

inline Error config_error(std::string msg) { return Error(std::move(msg), 2); }
inline Error data_error(std::string msg) { return Error(std::move(msg), 3); }
inline Error numeric_error(std::string msg) { return Error(std::move(msg), 4); }
inline Error verify_error(std::string msg) { return Error(std::move(msg), 5); }

// Dense row-major matrix of 64-bit reals. Row and column vectors are 1xN / Nx1.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols) : rows_(rows), cols_(cols), data_(size_t(rows) * cols, 0.0) {
    if (rows < 0 || cols < 0) throw numeric_error("Matrix: negative dimensions");
  }

  static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
  static Matrix full(int rows, int cols, double v) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = v;
    return m;
  }
  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* row(int r) { return data_.data() + size_t(r) * cols_; }
  const double* row(int r) const { return data_.data() + size_t(r) * cols_; }

  double& operator()(int r, int c) { return data_[size_t(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[size_t(r) * cols_ + c]; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }
  void zero() { fill(0.0); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b))
    throw numeric_error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                        b.shape_str());
}

}  // namespace miqrec
