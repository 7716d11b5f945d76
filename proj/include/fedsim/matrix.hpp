#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

/// Dense row-major matrix of 64-bit reals.
///
/// Zero-row matrices are allowed so that an empty dataset can still carry
/// its feature width; every other shape is rows x cols with rows*cols values.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  /// Rows selected by index, in the given order.
  Matrix gather_rows(std::span<const std::size_t> indices) const;

  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// a (m x k) * b (k x n).
Matrix gemm(const Matrix& a, const Matrix& b);
/// a (m x k) * b^T where b is (n x k).
Matrix gemm_nt(const Matrix& a, const Matrix& b);
/// a^T * b where a is (k x m) and b is (k x n).
Matrix gemm_tn(const Matrix& a, const Matrix& b);

enum class Trans { kNo, kYes };

/// out += alpha * op(a) * op(b), accumulated in place.
void gemm_add(Matrix& out, const Matrix& a, Trans ta, const Matrix& b, Trans tb,
              double alpha = 1.0);

Matrix transpose(const Matrix& a);

/// Elementwise a += scale * b.
void add_scaled(Matrix& a, const Matrix& b, double scale = 1.0);

/// Adds `bias` (length cols) to every row.
void add_row_vector(Matrix& a, std::span<const double> bias);

Matrix softmax_rows(const Matrix& z);

inline constexpr double kLogEpsilon = 1e-12;

/// Mean negative log-likelihood of `labels` under row distributions `probs`.
double cross_entropy(const Matrix& probs, std::span<const int> labels);

/// Gradient of cross_entropy(softmax_rows(logits), labels) w.r.t. logits:
/// (softmax - onehot) / n.
Matrix cross_entropy_logits_grad(const Matrix& logits, std::span<const int> labels);

/// tau^2 * mean_i KL(softmax(t_i / tau) || softmax(s_i / tau)).
double kl_distill_loss(const Matrix& teacher_logits, const Matrix& student_logits,
                       double temperature);

/// Gradient of kl_distill_loss w.r.t. the student logits:
/// (tau / n) * (softmax(s / tau) - softmax(t / tau)).
Matrix kl_distill_student_grad(const Matrix& teacher_logits, const Matrix& student_logits,
                               double temperature);

}  // namespace fedsim
