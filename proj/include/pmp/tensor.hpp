#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include "pmp/error.hpp"

namespace pmp {

/// Row-major dense matrix; rows are positions, columns features. Vectors
/// (biases, layer-norm affine terms) are stored as 1 x n matrices so every
/// parameter shares one type.
template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using Column = Eigen::Matrix<S, Eigen::Dynamic, 1>;

inline void require_shape(bool ok, const char* what) {
    require(ok, ErrorCode::kShapeMismatch, what);
}

template <class S>
Matrix<S> gather_rows(const Matrix<S>& m, std::span<const std::size_t> rows) {
    Matrix<S> out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] < static_cast<std::size_t>(m.rows()), ErrorCode::kShapeMismatch, "gather row out of range");
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

/// out.row(rows[i]) += src.row(i)
template <class S>
void scatter_add_rows(Matrix<S>& out, std::span<const std::size_t> rows, const Matrix<S>& src) {
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(rows[i])) += src.row(static_cast<Eigen::Index>(i));
}

/// Row-wise softmax, stable under large logits; -inf entries get weight 0.
template <class S>
Matrix<S> softmax_rows(const Matrix<S>& logits) {
    Matrix<S> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const S mx = logits.row(r).maxCoeff();
        out.row(r) = (logits.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

template <class S>
Matrix<S> log_softmax_rows(const Matrix<S>& logits) {
    Matrix<S> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const S mx = logits.row(r).maxCoeff();
        const S lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

}  // namespace pmp
