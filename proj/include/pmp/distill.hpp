#pragma once

// Teacher -> student distillation during pre-training. Both models see the
// same masked batch; the student minimizes
//   gamma * L_PMP + alpha * sum over mapped layers of MSE(H_s W_h, H_t)
//                 + beta * T^2 KL(teacher / T || student / T).
// The teacher is read-only. With alpha = beta = 0 and gamma = 1 the update
// sequence is exactly that of pretrain() on the same seed.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/error.hpp"
#include "pmp/log.hpp"
#include "pmp/losses.hpp"
#include "pmp/model.hpp"
#include "pmp/optim.hpp"
#include "pmp/pretrain.hpp"

namespace pmp {

/// Student layer j' (1-based) is matched to teacher layer j (1-based);
/// index l refers to the output of layer l.
struct LayerMap {
    std::vector<std::pair<int, int>> pairs;

    /// j = j' * L_t / L_s, e.g. 6 of 12 -> 2, 4, ..., 12.
    static LayerMap uniform(int teacher_layers, int student_layers) {
        LayerMap m;
        for (int j : uniform_layer_selection(teacher_layers, student_layers))
            m.pairs.emplace_back(static_cast<int>(m.pairs.size()) + 1, j + 1);
        return m;
    }

    void validate(int teacher_layers, int student_layers) const {
        require(pairs.size() == static_cast<std::size_t>(student_layers), ErrorCode::kConfigMismatch,
                "layer map needs one pair per student layer (" + std::to_string(student_layers) + "), got " +
                    std::to_string(pairs.size()));
        int previous = 0;
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            const auto [s, t] = pairs[k];
            require(s == static_cast<int>(k) + 1, ErrorCode::kConfigMismatch,
                    "layer map pair " + std::to_string(k) + " must name student layer " + std::to_string(k + 1));
            require(t >= 1 && t <= teacher_layers, ErrorCode::kConfigMismatch,
                    "teacher layer " + std::to_string(t) + " out of range 1.." + std::to_string(teacher_layers));
            require(t > previous, ErrorCode::kConfigMismatch, "teacher layers must be strictly increasing");
            previous = t;
        }
    }
};

struct DistillConfig {
    PretrainConfig pmp;  // masking, optimizer and PMP-loss settings for the student
    double temperature = 8.0;
    double alpha = 1.0;  // hidden-state MSE
    double beta = 1.0;   // logit KD
    double gamma = 1.0;  // student PMP loss
    std::vector<std::pair<int, int>> layer_pairs;  // empty: uniform stride

    DistillConfig() { pmp.preset = "student-desk"; }

    void validate() const {
        pmp.validate();
        require(temperature > 0, ErrorCode::kConfigMismatch, "temperature must be positive");
        require(alpha >= 0 && beta >= 0 && gamma >= 0, ErrorCode::kConfigMismatch, "loss weights must be non-negative");
    }

    LayerMap layer_map(int teacher_layers, int student_layers) const {
        LayerMap m = layer_pairs.empty() ? LayerMap::uniform(teacher_layers, student_layers) : LayerMap{layer_pairs};
        m.validate(teacher_layers, student_layers);
        return m;
    }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = c.pmp;
    j["temperature"] = c.temperature;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["gamma"] = c.gamma;
    if (!c.layer_pairs.empty()) j["layer_pairs"] = c.layer_pairs;
}

/// Flat object: every PretrainConfig key plus temperature/alpha/beta/gamma
/// and optional layer_pairs [[student, teacher], ...].
inline void from_json(const nlohmann::json& j, DistillConfig& c) {
    const DistillConfig d;
    nlohmann::json base = j;
    if (!base.contains("preset") && !base.contains("model")) base["preset"] = d.pmp.preset;
    c.pmp = base.get<PretrainConfig>();
    c.temperature = j.value("temperature", d.temperature);
    c.alpha = j.value("alpha", d.alpha);
    c.beta = j.value("beta", d.beta);
    c.gamma = j.value("gamma", d.gamma);
    c.layer_pairs = j.value("layer_pairs", d.layer_pairs);
    c.validate();
}

struct DistillStepStats {
    StepStats pmp;       // student PMP terms; pmp.loss is the weighted total
    double hidden = 0;   // sum over mapped layers
    double kd = 0;
};

inline void to_json(nlohmann::json& j, const DistillStepStats& s) {
    j = s.pmp;
    j["hidden"] = s.hidden;
    j["kd"] = s.kd;
}

template <class S>
struct DistillResult {
    EncoderParams<S> params;
    std::vector<Matrix<S>> projections;  // W_h per mapped pair, d' x d
    LayerMap layer_map;
    std::vector<DistillStepStats> history;
};

/// d' x d with ones on the leading diagonal.
template <class S>
Matrix<S> identity_projection(int student_width, int teacher_width) {
    return Matrix<S>::Identity(student_width, teacher_width);
}

/// Row-stacks hidden layer `l` of every trace.
template <class S>
Matrix<S> stack_hidden(const std::vector<EncoderTrace<S>>& traces, std::size_t l, int width) {
    Eigen::Index rows = 0;
    for (const auto& t : traces) rows += t.hidden[l].rows();
    Matrix<S> out(rows, width);
    Eigen::Index r = 0;
    for (const auto& t : traces) {
        out.middleRows(r, t.hidden[l].rows()) = t.hidden[l];
        r += t.hidden[l].rows();
    }
    return out;
}

/// Weighted distillation loss of the student on one masked batch:
///   gamma * L_PMP + alpha * sum_k MSE(H_s[j'_k] W_k, H_t[j_k]) + beta * KD.
/// When `grads` is given the student gradient is accumulated into it; when
/// `projection_grads` is given, so are the projection gradients.
template <class S>
DistillStepStats distill_objective(const EncoderParams<S>& teacher, const ModelConfig& teacher_config,
                                   const EncoderParams<S>& student, const ModelConfig& student_config,
                                   const std::vector<Matrix<S>>& projections, const LayerMap& layer_map,
                                   const std::vector<MaskedExample>& batch, const DistillConfig& dc,
                                   EncoderParams<S>* grads, std::vector<Matrix<S>>* projection_grads) {
    const PretrainConfig& pc = dc.pmp;
    const bool use_hidden = dc.alpha != 0;
    const bool use_kd = dc.beta != 0;
    const auto gamma = static_cast<S>(dc.gamma);
    const auto alpha = static_cast<S>(dc.alpha);
    const auto beta = static_cast<S>(dc.beta);
    const auto temperature = static_cast<S>(dc.temperature);

    auto fwd = forward_masked_batch(student, student_config, batch, grads != nullptr);
    auto terms = pmp_terms(fwd, pc.lambda, pc.tau, pc.scl_include_anchor);
    DistillStepStats stats;
    Matrix<S> d_logits = Matrix<S>::Zero(fwd.logits.rows(), fwd.logits.cols());
    Matrix<S> d_reps = Matrix<S>::Zero(fwd.reps.rows(), fwd.reps.cols());
    if (dc.gamma != 0) {
        d_logits = terms.d_logits * gamma;
        d_reps = terms.d_reps * gamma;
    }
    S total = gamma * terms.total;
    // Per-example gradients injected at student hidden layers by the MSE terms.
    std::vector<std::vector<Matrix<S>>> hidden_grads(batch.size(),
                                                     std::vector<Matrix<S>>(student.layers.size() + 1));

    // The teacher is skipped entirely when neither term needs it.
    if (use_hidden || use_kd) {
        const auto teacher_fwd = forward_masked_batch(teacher, teacher_config, batch, false);
        if (use_kd) {
            const auto kd = logit_kd_loss(fwd.logits, teacher_fwd.logits, temperature);
            stats.kd = static_cast<double>(kd.value);
            total += beta * kd.value;
            d_logits += kd.grad * beta;
        }
        if (use_hidden) {
            for (std::size_t k = 0; k < layer_map.pairs.size(); ++k) {
                const auto [s_layer, t_layer] = layer_map.pairs[k];
                const auto hs = stack_hidden(fwd.traces, static_cast<std::size_t>(s_layer), student_config.hidden);
                const auto ht = stack_hidden(teacher_fwd.traces, static_cast<std::size_t>(t_layer), teacher_config.hidden);
                const auto mse = hidden_mse_loss(hs, ht, projections[k]);
                stats.hidden += static_cast<double>(mse.value);
                total += alpha * mse.value;
                if (projection_grads) (*projection_grads)[k] += mse.d_projection * alpha;
                Eigen::Index r = 0;
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    const auto n = static_cast<Eigen::Index>(batch[b].input_ids.size());
                    auto& slot = hidden_grads[b][static_cast<std::size_t>(s_layer)];
                    if (slot.size() == 0) slot = Matrix<S>::Zero(n, student_config.hidden);
                    slot += mse.d_student.middleRows(r, n) * alpha;
                    r += n;
                }
            }
        }
    }

    if (grads) {
        Matrix<S> d_pooled = pmp_head_backward(fwd.reps, d_logits, student, *grads);
        d_pooled += d_reps;
        auto slots = route_rep_grads(fwd, batch, d_pooled, student_config.hidden);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (std::size_t l = 0; l < slots[b].size(); ++l) {
                const auto& extra = hidden_grads[b][l];
                if (extra.size() == 0) continue;
                if (slots[b][l].size() == 0) slots[b][l] = extra;
                else slots[b][l] += extra;
            }
            backward(student, student_config, fwd.traces[b], slots[b], *grads);
        }
    }

    stats.pmp.loss = static_cast<double>(total);
    stats.pmp.ce = static_cast<double>(terms.ce);
    stats.pmp.scl = static_cast<double>(terms.scl);
    stats.pmp.accuracy = masked_accuracy(fwd.logits, std::span<const int>(fwd.labels));
    stats.pmp.masked = fwd.labels.size();
    return stats;
}

template <class S>
DistillResult<S> distill(const EncoderParams<S>& teacher, const ModelConfig& teacher_config,
                         const std::vector<EncodedSequence>& corpus, EncoderParams<S> student,
                         const ModelConfig& student_config, const DistillConfig& dc,
                         const std::function<void(long, const EncoderParams<S>&)>& on_checkpoint = {}) {
    dc.validate();
    const PretrainConfig& pc = dc.pmp;
    check_shapes(teacher, teacher_config);
    check_shapes(student, student_config);
    require(teacher_config.vocab_size == student_config.vocab_size, ErrorCode::kConfigMismatch,
            "teacher and student vocabularies differ");
    require(teacher_config.num_labels == student_config.num_labels, ErrorCode::kConfigMismatch,
            "teacher and student label sets differ");
    require(teacher_config.max_len >= student_config.max_len, ErrorCode::kConfigMismatch,
            "teacher max_len shorter than the student's");
    require(!corpus.empty(), ErrorCode::kEmptyBatch, "distillation corpus is empty");

    DistillResult<S> result;
    result.layer_map = dc.layer_map(teacher_config.layers, student_config.layers);
    const bool use_hidden = dc.alpha != 0;

    const std::size_t min_len = min_maskable_length(pc.mask_ratio);
    std::vector<EncodedSequence> usable;
    for (const auto& s : corpus)
        if (s.size() >= min_len && s.size() <= static_cast<std::size_t>(student_config.max_len)) usable.push_back(s);
    require(!usable.empty(), ErrorCode::kTooShort, "no sequence is long enough to mask");
    if (usable.size() < corpus.size())
        log::warn("distill: skipped ", corpus.size() - usable.size(), " sequences outside [", min_len, ", ",
                  student_config.max_len, "] tokens");

    EncoderParams<S> grads = zeros_like(student);
    ParamRefs<S> refs;
    refs.add(student, grads);
    for (std::size_t k = 0; k < result.layer_map.pairs.size(); ++k)
        result.projections.push_back(identity_projection<S>(student_config.hidden, teacher_config.hidden));
    std::vector<Matrix<S>> projection_grads;
    for (const auto& w : result.projections) projection_grads.push_back(Matrix<S>::Zero(w.rows(), w.cols()));
    // Projections are registered after the student so that, when unused, the
    // optimizer state of the student tensors is unchanged.
    if (use_hidden)
        for (std::size_t k = 0; k < result.projections.size(); ++k) refs.add(result.projections[k], projection_grads[k]);

    AdamW<S> optimizer({.lr = pc.lr, .weight_decay = pc.weight_decay});
    const LinearSchedule schedule{pc.steps, pc.warmup_fraction};
    BatchSampler sampler(usable.size(), pc.seed);
    const MaskingOptions masking{.ratio = pc.mask_ratio, .balanced = pc.balanced_masking};

    for (long step = 0; step < pc.steps; ++step) {
        const auto batch =
            make_masked_batch(usable, sampler, pc.batch_size, pc.seed, step, student_config.mask_id, masking);
        refs.zero_grads();
        for (auto& g : projection_grads) g.setZero();
        DistillStepStats stats = distill_objective(teacher, teacher_config, student, student_config,
                                                   result.projections, result.layer_map, batch, dc, &grads,
                                                   use_hidden ? &projection_grads : nullptr);
        stats.pmp.grad_norm = clip_grad_norm(refs.grads, pc.max_grad_norm);
        optimizer.step(refs, pc.lr * schedule.factor(step));
        result.history.push_back(stats);

        if ((step + 1) % 100 == 0 || step + 1 == pc.steps)
            log::debug("distill step ", step + 1, "/", pc.steps, " loss ", stats.pmp.loss, " hidden ", stats.hidden,
                       " kd ", stats.kd, " acc ", stats.pmp.accuracy);
        if (on_checkpoint && pc.checkpoint_every > 0 && (step + 1) % pc.checkpoint_every == 0)
            on_checkpoint(step + 1, student);
    }
    result.params = std::move(student);
    return result;
}

}  // namespace pmp
