#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "pmp/error.hpp"
#include "pmp/tensor.hpp"

namespace pmp {

template <class S>
struct LossResult {
    S value{};
    Matrix<S> grad;  // dL/d(input), same shape as the input
};

/// Mean over the M rows of -log softmax(logits)[label].
template <class S>
LossResult<S> ce_loss(const Matrix<S>& logits, std::span<const int> labels) {
    require(logits.rows() > 0, ErrorCode::kEmptyBatch, "cross-entropy over an empty batch");
    require_shape(static_cast<std::size_t>(logits.rows()) == labels.size(), "one label per logit row");
    const Eigen::Index m = logits.rows();
    const Matrix<S> logp = log_softmax_rows(logits);
    LossResult<S> out;
    out.grad = logp.array().exp();
    S total = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < logits.cols(), ErrorCode::kShapeMismatch, "label outside logit columns");
        total -= logp(i, y);
        out.grad(i, y) -= S(1);
    }
    out.value = total / static_cast<S>(m);
    out.grad /= static_cast<S>(m);
    return out;
}

struct SclOptions {
    /// Count the anchor itself in the denominator set A(i).
    bool include_anchor_in_denominator = false;
};

namespace detail {

/// Sum of the values in ascending order, so the result does not depend on
/// the order the terms were produced in.
template <class S>
S sorted_sum(std::vector<S>& terms) {
    std::sort(terms.begin(), terms.end());
    S total = 0;
    for (S t : terms) total += t;
    return total;
}

}  // namespace detail

/// Supervised contrastive loss over one pool of representations.
///
/// Rows are l2-normalized, pairwise similarity is the dot product divided by
/// tau. Every row with at least one same-class partner is an anchor; its
/// term is -mean_{p in P(i)} log(exp(s_ip) / sum_{k in A(i)} exp(s_ik)) with
/// P(i) the same-class rows other than i and A(i) every row other than i.
/// The result is the mean over anchors, or 0 when no row has a partner.
/// Every reduction is order-independent, so permuting the batch permutes
/// the gradient rows and leaves the value bit-identical.
template <class S>
LossResult<S> scl_loss(const Matrix<S>& reps, std::span<const int> labels, S tau, SclOptions options = {}) {
    require(reps.rows() >= 2, ErrorCode::kEmptyBatch, "contrastive loss needs at least two samples");
    require_shape(static_cast<std::size_t>(reps.rows()) == labels.size(), "one label per representation");
    require(tau > 0, ErrorCode::kConfigMismatch, "temperature must be positive");
    const Eigen::Index m = reps.rows();
    auto same = [&](Eigen::Index a, Eigen::Index b) {
        return labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(b)];
    };

    Column<S> norms = reps.rowwise().norm();
    for (Eigen::Index i = 0; i < m; ++i) norms(i) = std::max(norms(i), S(1e-12));
    const Matrix<S> z = reps.array().colwise() / norms.array();
    Matrix<S> sim(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index k = 0; k <= i; ++k) sim(i, k) = sim(k, i) = z.row(i).dot(z.row(k)) / tau;

    // coeff(i, k) = dL/ds_ik accumulated over anchors.
    Matrix<S> coeff = Matrix<S>::Zero(m, m);
    std::vector<S> anchor_terms, buffer;
    for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::Index positives = 0;
        for (Eigen::Index p = 0; p < m; ++p)
            if (p != i && same(p, i)) ++positives;
        if (positives == 0) continue;

        auto in_denominator = [&](Eigen::Index k) { return k != i || options.include_anchor_in_denominator; };
        S mx = -std::numeric_limits<S>::infinity();
        for (Eigen::Index k = 0; k < m; ++k)
            if (in_denominator(k)) mx = std::max(mx, sim(i, k));
        buffer.clear();
        for (Eigen::Index k = 0; k < m; ++k)
            if (in_denominator(k)) buffer.push_back(std::exp(sim(i, k) - mx));
        const S log_denom = mx + std::log(detail::sorted_sum(buffer));

        buffer.clear();
        for (Eigen::Index p = 0; p < m; ++p)
            if (p != i && same(p, i)) buffer.push_back(log_denom - sim(i, p));
        anchor_terms.push_back(detail::sorted_sum(buffer) / static_cast<S>(positives));

        for (Eigen::Index k = 0; k < m; ++k)
            if (in_denominator(k)) coeff(i, k) += std::exp(sim(i, k) - log_denom);
        for (Eigen::Index p = 0; p < m; ++p)
            if (p != i && same(p, i)) coeff(i, p) -= S(1) / static_cast<S>(positives);
    }

    LossResult<S> out;
    if (anchor_terms.empty()) {
        out.value = 0;
        out.grad = Matrix<S>::Zero(m, reps.cols());
        return out;
    }
    const auto anchors = static_cast<S>(anchor_terms.size());
    out.value = detail::sorted_sum(anchor_terms) / anchors;
    coeff /= anchors;
    // s_ik = z_i . z_k / tau, so dz = (C + C^T) z / tau; then through the
    // normalization: dr = (dz - z (z . dz)) / |r|.
    const Matrix<S> dz = ((coeff + coeff.transpose()) * z) / tau;
    const Column<S> radial = (dz.array() * z.array()).rowwise().sum();
    out.grad = ((dz - (z.array().colwise() * radial.array()).matrix()).array().colwise() / norms.array()).matrix();
    return out;
}

/// (1 - lambda) * ce + lambda * scl
template <class S>
S pmp_loss(S ce, S scl, S lambda) {
    require(lambda >= 0 && lambda <= 1, ErrorCode::kConfigMismatch, "lambda must lie in [0, 1]");
    return (S(1) - lambda) * ce + lambda * scl;
}

template <class S>
struct HiddenMseResult {
    S value{};
    Matrix<S> d_student;     // dL/dH_s
    Matrix<S> d_projection;  // dL/dW_h
};

/// Mean over every element of (H_s W_h - H_t)^2. The teacher states are
/// constants; gradients flow to the student states and the projection.
template <class S>
HiddenMseResult<S> hidden_mse_loss(const Matrix<S>& student, const Matrix<S>& teacher, const Matrix<S>& projection) {
    require_shape(student.cols() == projection.rows(), "student width differs from projection rows");
    require_shape(teacher.cols() == projection.cols(), "teacher width differs from projection columns");
    require_shape(student.rows() == teacher.rows(), "student and teacher row counts differ");
    require(student.rows() > 0, ErrorCode::kEmptyBatch, "hidden MSE over no positions");
    const Matrix<S> diff = student * projection - teacher;
    const S count = static_cast<S>(diff.size());
    HiddenMseResult<S> out;
    out.value = diff.squaredNorm() / count;
    const Matrix<S> d_out = diff * (S(2) / count);
    out.d_student = d_out * projection.transpose();
    out.d_projection = student.transpose() * d_out;
    return out;
}

/// T^2 * KL(softmax(teacher / T) || softmax(student / T)), averaged over rows.
/// The gradient is with respect to the student logits only.
template <class S>
LossResult<S> logit_kd_loss(const Matrix<S>& student, const Matrix<S>& teacher, S temperature) {
    require_shape(student.rows() == teacher.rows() && student.cols() == teacher.cols(), "logit shapes differ");
    require(student.rows() > 0, ErrorCode::kEmptyBatch, "distillation over no positions");
    require(temperature > 0, ErrorCode::kConfigMismatch, "temperature must be positive");
    const Matrix<S> log_ps = log_softmax_rows(Matrix<S>(student / temperature));
    const Matrix<S> log_pt = log_softmax_rows(Matrix<S>(teacher / temperature));
    const Matrix<S> pt = log_pt.array().exp();
    const Matrix<S> ps = log_ps.array().exp();
    const S rows = static_cast<S>(student.rows());
    LossResult<S> out;
    out.value = temperature * temperature * (pt.array() * (log_pt - log_ps).array()).sum() / rows;
    out.grad = (ps - pt) * (temperature / rows);
    return out;
}

}  // namespace pmp
