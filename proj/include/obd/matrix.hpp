#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace obd {

// Dense row-major matrix of doubles, the carrier type for weights, covariance
// sums and factors throughout the library. Dimensions are always at least
// 1x1; entries are kept finite by the operations that produce matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);  // zero-filled
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diag(const std::vector<double>& entries);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double scalar);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double scalar);
Matrix operator*(double scalar, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Sum of squared entries, which equals trace(A * A^T).
double frobenius_norm_sq(const Matrix& a);
double frobenius_norm(const Matrix& a);
double trace(const Matrix& a);
double max_abs(const Matrix& a);

inline constexpr std::size_t kKronDefaultCap = std::size_t{1} << 24;

// Kronecker product: block (i, j) of the result is a(i, j) * b. The result
// has a.rows*b.rows x a.cols*b.cols entries and is capped because it is only
// ever formed at oracle scale.
Matrix kron(const Matrix& a, const Matrix& b, std::size_t max_elements = kKronDefaultCap);

// Row-wise flattening to a 1 x (rows*cols) row vector: rows are concatenated
// left to right. The matching Kronecker identity under this convention is
// (A (x) B) vec_row(C)^T = vec_row(A C B^T)^T.
Matrix vec_row(const Matrix& a);

// Inverse of vec_row for a given target shape.
Matrix reshape(const Matrix& flat, std::size_t rows, std::size_t cols);

bool is_symmetric(const Matrix& a, double tol);

// Throws NonFiniteError when any entry is NaN or infinite. The context string
// names the operation in the error message.
void check_finite(const Matrix& a, const char* context);

}  // namespace obd
