#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pmp/model.hpp"
#include "pmp/tensor.hpp"

namespace pmp {

/// Parallel views of parameters and their gradients, in a fixed order.
template <class S>
struct ParamRefs {
    std::vector<Matrix<S>*> params;
    std::vector<Matrix<S>*> grads;

    void add(Matrix<S>& p, Matrix<S>& g) {
        params.push_back(&p);
        grads.push_back(&g);
    }

    void add(EncoderParams<S>& p, EncoderParams<S>& g) {
        for_each_tensor_pair(p, g, [&](const std::string&, Matrix<S>& a, Matrix<S>& b) { add(a, b); });
    }

    void zero_grads() {
        for (auto* g : grads) g->setZero();
    }
};

/// Global l2 norm over every gradient; rescales in place when it exceeds
/// max_norm. Returns the norm before clipping.
template <class S>
double clip_grad_norm(std::vector<Matrix<S>*>& grads, double max_norm) {
    double sq = 0;
    for (const auto* g : grads) sq += static_cast<double>(g->squaredNorm());
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const auto scale = static_cast<S>(max_norm / (norm + 1e-6));
        for (auto* g : grads) *g *= scale;
    }
    return norm;
}

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Decay skips 1 x n tensors (biases and
/// layer-norm terms).
template <class S>
class AdamW {
public:
    explicit AdamW(AdamWConfig config) : config_(config) {}

    void step(ParamRefs<S>& refs, double lr) {
        if (m_.empty()) {
            for (const auto* p : refs.params) {
                m_.push_back(Matrix<S>::Zero(p->rows(), p->cols()));
                v_.push_back(Matrix<S>::Zero(p->rows(), p->cols()));
            }
        }
        require(m_.size() == refs.params.size(), ErrorCode::kShapeMismatch, "optimizer state size changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        const auto b1 = static_cast<S>(config_.beta1);
        const auto b2 = static_cast<S>(config_.beta2);
        const auto step_size = static_cast<S>(lr / bc1);
        const auto inv_bc2 = static_cast<S>(1.0 / bc2);
        const auto eps = static_cast<S>(config_.eps);
        const auto decay = static_cast<S>(lr * config_.weight_decay);
        for (std::size_t i = 0; i < refs.params.size(); ++i) {
            Matrix<S>& p = *refs.params[i];
            const Matrix<S>& g = *refs.grads[i];
            m_[i] = b1 * m_[i] + (S(1) - b1) * g;
            v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseProduct(g);
            if (decay != S(0) && p.rows() > 1) p *= (S(1) - decay);
            p.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
        }
    }

    long steps_taken() const { return t_; }

private:
    AdamWConfig config_;
    std::vector<Matrix<S>> m_, v_;
    long t_ = 0;
};

/// Linear warm-up over the first `warmup_fraction` of steps, then linear
/// decay to zero at `total_steps`.
struct LinearSchedule {
    long total_steps = 1;
    double warmup_fraction = 0.1;

    double factor(long step) const {
        const long warmup = static_cast<long>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
        if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
        const long remaining = total_steps - warmup;
        if (remaining <= 0) return 1.0;
        return std::max(0.0, static_cast<double>(total_steps - step) / static_cast<double>(remaining));
    }
};

}  // namespace pmp
