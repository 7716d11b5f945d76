#include "fedsim/matrix.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedsim/errors.hpp"

namespace fedsim {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const Matrix& m) {
  return ConstView(m.data(), static_cast<Eigen::Index>(m.rows()),
                   static_cast<Eigen::Index>(m.cols()));
}

View view(Matrix& m) {
  return View(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

[[noreturn]] void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a, b);
}

// Row-wise log-softmax of z / temperature.
Matrix log_softmax_rows(const Matrix& z, double temperature) {
  Matrix out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto in = z.row(i);
    auto dst = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end()) / temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) sum += std::exp(in[j] / temperature - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < in.size(); ++j) dst[j] = in[j] / temperature - lse;
  }
  return out;
}

Matrix softmax_scaled(const Matrix& z, double temperature) {
  Matrix out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto in = z.row(i);
    auto dst = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end()) / temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] / temperature - mx);
      sum += dst[j];
    }
    for (double& v : dst) v /= sum;
  }
  return out;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw ShapeError("matrix " + shape_string() + " given " + std::to_string(values_.size()) +
                     " values");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  values_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Matrix gemm(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_mismatch("gemm", a, b);
  Matrix out(a.rows(), b.cols());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_mismatch("gemm_nt", a, b);
  Matrix out(a.rows(), b.rows());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_mismatch("gemm_tn", a, b);
  Matrix out(a.cols(), b.cols());
  if (a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

void gemm_add(Matrix& out, const Matrix& a, Trans ta, const Matrix& b, Trans tb, double alpha) {
  const std::size_t m = ta == Trans::kNo ? a.rows() : a.cols();
  const std::size_t k = ta == Trans::kNo ? a.cols() : a.rows();
  const std::size_t kb = tb == Trans::kNo ? b.rows() : b.cols();
  const std::size_t n = tb == Trans::kNo ? b.cols() : b.rows();
  if (k != kb || out.rows() != m || out.cols() != n) shape_mismatch("gemm_add", a, b);
  if (k == 0 || m == 0 || n == 0) return;
  auto dst = view(out);
  const auto av = view(a);
  const auto bv = view(b);
  if (ta == Trans::kNo && tb == Trans::kNo) dst.noalias() += alpha * av * bv;
  else if (ta == Trans::kNo) dst.noalias() += alpha * av * bv.transpose();
  else if (tb == Trans::kNo) dst.noalias() += alpha * av.transpose() * bv;
  else dst.noalias() += alpha * av.transpose() * bv.transpose();
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  view(out) = view(a).transpose();
  return out;
}

void add_scaled(Matrix& a, const Matrix& b, double scale) {
  require_same_shape("add_scaled", a, b);
  view(a) += scale * view(b);
}

void add_row_vector(Matrix& a, std::span<const double> bias) {
  if (bias.size() != a.cols()) {
    throw ShapeError("add_row_vector: bias length " + std::to_string(bias.size()) +
                     " for matrix " + a.shape_string());
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

Matrix softmax_rows(const Matrix& z) { return softmax_scaled(z, 1.0); }

double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  if (labels.size() != probs.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     probs.shape_string() + " probabilities");
  }
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= probs.cols()) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(probs.cols()) + ")");
    }
    total -= std::log(probs(i, static_cast<std::size_t>(y)) + kLogEpsilon);
  }
  return total / static_cast<double>(probs.rows());
}

Matrix cross_entropy_logits_grad(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("cross_entropy_logits_grad: " + std::to_string(labels.size()) +
                     " labels for " + logits.shape_string() + " logits");
  }
  Matrix grad = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(std::max<std::size_t>(logits.rows(), 1));
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= grad.cols()) {
      throw std::out_of_range("cross_entropy_logits_grad: label " + std::to_string(y) +
                              " out of range");
    }
    grad(i, static_cast<std::size_t>(y)) -= 1.0;
    for (double& v : grad.row(i)) v *= inv_n;
  }
  return grad;
}

double kl_distill_loss(const Matrix& teacher_logits, const Matrix& student_logits,
                       double temperature) {
  require_same_shape("kl_distill_loss", teacher_logits, student_logits);
  if (!(temperature > 0.0)) throw std::invalid_argument("kl_distill_loss: temperature must be > 0");
  if (teacher_logits.rows() == 0) return 0.0;
  const Matrix log_p = log_softmax_rows(teacher_logits, temperature);
  const Matrix log_q = log_softmax_rows(student_logits, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.rows(); ++i) {
    for (std::size_t j = 0; j < log_p.cols(); ++j) {
      const double p = std::exp(log_p(i, j));
      if (p > 0.0) total += p * (log_p(i, j) - log_q(i, j));
    }
  }
  return temperature * temperature * total / static_cast<double>(log_p.rows());
}

Matrix kl_distill_student_grad(const Matrix& teacher_logits, const Matrix& student_logits,
                               double temperature) {
  require_same_shape("kl_distill_student_grad", teacher_logits, student_logits);
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("kl_distill_student_grad: temperature must be > 0");
  }
  Matrix grad = softmax_scaled(student_logits, temperature);
  const Matrix p = softmax_scaled(teacher_logits, temperature);
  const double scale =
      temperature / static_cast<double>(std::max<std::size_t>(grad.rows(), 1));
  auto g = grad.values();
  auto pv = p.values();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = scale * (g[i] - pv[i]);
  return grad;
}

}  // namespace fedsim
