#include "obd/matrix.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "obd/errors.hpp"

namespace obd {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_positive_dims(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("matrix dimensions must be positive, got " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    require_positive_dims(rows, cols);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_positive_dims(rows, cols);
    if (data_.size() != rows * cols) {
        throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                    " does not match shape " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    }
    check_finite(*this, "matrix construction");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows.begin() == rows.end() ? 0 : rows.begin()->size();
    require_positive_dims(rows_, cols_);
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
        if (row.size() != cols_) {
            throw std::invalid_argument("ragged initializer rows: expected " +
                                        std::to_string(cols_) + " columns, got " +
                                        std::to_string(row.size()));
        }
        data_.insert(data_.end(), row.begin(), row.end());
    }
    check_finite(*this, "matrix construction");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diag(const std::vector<double>& entries) {
    Matrix m(entries.size(), entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) m(i, i) = entries[i];
    return m;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) {
        throw std::invalid_argument("shape mismatch in addition: " + shape_str(*this) +
                                    " vs " + shape_str(other));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) {
        throw std::invalid_argument("shape mismatch in subtraction: " + shape_str(*this) +
                                    " vs " + shape_str(other));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double scalar) {
    for (double& v : data_) v *= scalar;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double scalar) { return a *= scalar; }
Matrix operator*(double scalar, Matrix a) { return a *= scalar; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul dimension mismatch: " + shape_str(a) + " times " +
                                    shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    // i-k-j order keeps the inner loop contiguous for row-major storage.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double frobenius_norm_sq(const Matrix& a) {
    double sum = 0.0;
    for (double v : a.data()) sum += v * v;
    return sum;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

double trace(const Matrix& a) {
    if (a.rows() != a.cols()) {
        throw std::invalid_argument("trace requires a square matrix, got " + shape_str(a));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) sum += a(i, i);
    return sum;
}

double max_abs(const Matrix& a) {
    double best = 0.0;
    for (double v : a.data()) best = std::max(best, std::fabs(v));
    return best;
}

Matrix kron(const Matrix& a, const Matrix& b, std::size_t max_elements) {
    const std::size_t out_rows = a.rows() * b.rows();
    const std::size_t out_cols = a.cols() * b.cols();
    if (out_rows > max_elements / out_cols) {
        throw std::invalid_argument(
            "kronecker product size " + std::to_string(out_rows) + "x" +
            std::to_string(out_cols) + " exceeds the element cap of " +
            std::to_string(max_elements));
    }
    Matrix out(out_rows, out_cols);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            if (aij == 0.0) continue;
            for (std::size_t p = 0; p < b.rows(); ++p) {
                for (std::size_t q = 0; q < b.cols(); ++q) {
                    out(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
                }
            }
        }
    }
    check_finite(out, "kron");
    return out;
}

Matrix vec_row(const Matrix& a) {
    return Matrix(1, a.rows() * a.cols(), a.data());
}

Matrix reshape(const Matrix& flat, std::size_t rows, std::size_t cols) {
    if (flat.rows() * flat.cols() != rows * cols) {
        throw std::invalid_argument("reshape element count mismatch: " + shape_str(flat) +
                                    " to " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    return Matrix(rows, cols, flat.data());
}

bool is_symmetric(const Matrix& a, double tol) {
    if (a.rows() != a.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            if (std::fabs(a(i, j) - a(j, i)) > tol) return false;
        }
    }
    return true;
}

void check_finite(const Matrix& a, const char* context) {
    for (double v : a.data()) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string(context) + " produced a non-finite entry");
        }
    }
}

}  // namespace obd
