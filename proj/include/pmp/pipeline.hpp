#pragma once

// The teacher -> student recipe: pre-train the teacher, distill students,
// fine-tune every model with slot tagging and compare them on the test split.
// run_pipeline() executes it on disk with per-stage completion markers;
// the in-memory building blocks are exposed for the ablation grid and tests.

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/checkpoint.hpp"
#include "pmp/dataset.hpp"
#include "pmp/distill.hpp"
#include "pmp/error.hpp"
#include "pmp/eval.hpp"
#include "pmp/finetune.hpp"
#include "pmp/log.hpp"
#include "pmp/model.hpp"
#include "pmp/pretrain.hpp"
#include "pmp/synthetic.hpp"

namespace pmp {

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
    std::filesystem::path output = "runs/experiment";
    // Corpus source: a text file (one punctuated document per line) with an
    // optional word lexicon, or the synthetic grammar when no input is given.
    std::optional<std::filesystem::path> input_text;
    std::optional<std::filesystem::path> input_lexicon;
    GrammarConfig grammar;
    std::size_t synthetic_sentences = 3400;
    std::uint64_t corpus_seed = 0;
    DataOptions data;

    std::string teacher = "teacher-desk";
    std::vector<std::string> students{"student-desk"};
    PretrainConfig pretrain;
    DistillConfig distill;
    FinetuneConfig finetune;
    bool include_o = false;
    std::vector<std::uint64_t> seeds{1, 2, 3};

    void validate() const {
        pretrain.validate();
        distill.validate();
        finetune.validate();
        pmp::validate(data.ratios);
        require(!seeds.empty(), ErrorCode::kConfigMismatch, "at least one seed is required");
        (void)ModelConfig::from_preset(teacher, 64, 4);
        for (const auto& s : students) (void)ModelConfig::from_preset(s, 64, 4);
        if (input_text)
            require(std::filesystem::exists(*input_text), ErrorCode::kIo, "input text " + input_text->string() +
                                                                              " does not exist");
        if (input_lexicon)
            require(std::filesystem::exists(*input_lexicon), ErrorCode::kIo,
                    "lexicon " + input_lexicon->string() + " does not exist");
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"output", c.output.string()},
         {"grammar", c.grammar},
         {"synthetic_sentences", c.synthetic_sentences},
         {"corpus_seed", c.corpus_seed},
         {"data", c.data},
         {"teacher", c.teacher},
         {"students", c.students},
         {"pretrain", c.pretrain},
         {"distill", c.distill},
         {"finetune", c.finetune},
         {"include_o", c.include_o},
         {"seeds", c.seeds}};
    if (c.input_text) j["input_text"] = c.input_text->string();
    if (c.input_lexicon) j["input_lexicon"] = c.input_lexicon->string();
}

/// Every key is optional; stage sections accept the keys of their own
/// configs ("pretrain", "distill", "finetune", "eval": {"include_o"}).
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    const ExperimentConfig d;
    c.output = j.value("output", d.output.string());
    if (j.contains("input_text")) c.input_text = j.at("input_text").get<std::string>();
    if (j.contains("input_lexicon")) c.input_lexicon = j.at("input_lexicon").get<std::string>();
    if (j.contains("grammar")) c.grammar = j.at("grammar").get<GrammarConfig>();
    c.synthetic_sentences = j.value("synthetic_sentences", d.synthetic_sentences);
    c.corpus_seed = j.value("corpus_seed", d.corpus_seed);
    if (j.contains("data")) c.data = j.at("data").get<DataOptions>();
    c.teacher = j.value("teacher", d.teacher);
    c.students = j.value("students", d.students);
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
    if (j.contains("distill")) c.distill = j.at("distill").get<DistillConfig>();
    if (j.contains("finetune")) c.finetune = j.at("finetune").get<FinetuneConfig>();
    c.include_o = j.value("include_o", d.include_o);
    if (j.contains("eval")) c.include_o = j.at("eval").value("include_o", c.include_o);
    c.seeds = j.value("seeds", d.seeds);
    c.finetune.include_o_in_overall = c.include_o;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read config " + path.string());
    try {
        return nlohmann::json::parse(in, nullptr, true, true).get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kFormat, "bad config " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// In-memory stages

inline ModelConfig model_config(const PreparedData& data, const std::string& preset) {
    return ModelConfig::from_preset(preset, static_cast<int>(data.vocab.size()), static_cast<int>(data.marks.size()));
}

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    if (cfg.input_text) {
        std::vector<std::string> lexicon;
        if (cfg.input_lexicon) lexicon = LongestMatchSegmenter::load(*cfg.input_lexicon).words();
        return build_dataset(read_lines(*cfg.input_text), lexicon, cfg.data);
    }
    return build_synthetic_dataset(cfg.grammar, cfg.synthetic_sentences, cfg.corpus_seed, cfg.data);
}

/// Fresh model pre-trained with PMP on the training split.
inline PretrainResult<float> run_pretrain(const PreparedData& data, const ModelConfig& config, const PretrainConfig& pc,
                                          const std::function<void(long, const EncoderParams<float>&)>& hook = {}) {
    return pretrain(encode_corpus(data.split.train, data.vocab), init_params<float>(config, pc.seed), config, pc,
                    hook);
}

/// Student initialized from the teacher's uniformly selected layers, then
/// distilled on the training split.
inline DistillResult<float> run_distill(const PreparedData& data, const EncoderParams<float>& teacher,
                                        const ModelConfig& teacher_config, const ModelConfig& student_config,
                                        const DistillConfig& dc,
                                        const std::function<void(long, const EncoderParams<float>&)>& hook = {}) {
    const auto selection = uniform_layer_selection(teacher_config.layers, student_config.layers);
    auto student = init_student_from_teacher(teacher, teacher_config, student_config, selection, dc.pmp.seed);
    return distill(teacher, teacher_config, encode_corpus(data.split.train, data.vocab), std::move(student),
                   student_config, dc, hook);
}

struct FinetuneOutcome {
    FinetuneResult<float> result;
    MetricsReport test;
};

inline FinetuneOutcome run_finetune(const PreparedData& data, const ModelConfig& config,
                                    const EncoderParams<float>& params, const FinetuneConfig& fc,
                                    const std::function<void(const EpochRecord&, const EncoderParams<float>&)>& hook = {}) {
    SlotReport slots;
    const auto train = prepare_slot_examples(data.split.train, data.segmenter, data.vocab, config, &slots);
    const auto dev = prepare_slot_examples(data.split.dev, data.segmenter, data.vocab, config, &slots);
    const auto test = prepare_slot_examples(data.split.test, data.segmenter, data.vocab, config, &slots);
    if (slots.remapped_marks) log::warn("finetune: moved ", slots.remapped_marks, " mid-word marks to word-final slots");
    FinetuneOutcome out;
    out.result = finetune(params, config, train, dev, data.marks, fc, hook);
    out.test = evaluate_slots(out.result.best, config, test, data.marks, fc.include_o_in_overall);
    return out;
}

/// Test metrics of `params` on a prepared split.
inline MetricsReport evaluate_model(const PreparedData& data, const ModelConfig& config,
                                    const EncoderParams<float>& params, const std::vector<LabeledSequence>& split,
                                    bool include_o) {
    return evaluate_slots(params, config, prepare_slot_examples(split, data.segmenter, data.vocab, config), data.marks,
                          include_o);
}

// ---------------------------------------------------------------------------
// Ablation grid

enum class Ablation { kNoCe, kNoScl, kNoKd };

inline std::string_view ablation_name(Ablation a) {
    switch (a) {
        case Ablation::kNoCe: return "w/o CE";
        case Ablation::kNoScl: return "w/o SCL";
        case Ablation::kNoKd: return "w/o KD";
    }
    return "?";
}

inline Ablation parse_ablation(std::string_view s) {
    if (s == "no-ce" || s == "ce") return Ablation::kNoCe;
    if (s == "no-scl" || s == "scl") return Ablation::kNoScl;
    if (s == "no-kd" || s == "kd") return Ablation::kNoKd;
    throw Error(ErrorCode::kConfigMismatch, "unknown ablation '" + std::string(s) + "' (no-ce, no-scl, no-kd)");
}

/// The student distillation settings of a variant: no CE -> lambda = 1,
/// no SCL -> lambda = 0, no KD -> alpha = beta = 0.
inline DistillConfig ablated(DistillConfig dc, std::optional<Ablation> a) {
    if (!a) return dc;
    switch (*a) {
        case Ablation::kNoCe: dc.pmp.lambda = 1.0; break;
        case Ablation::kNoScl: dc.pmp.lambda = 0.0; break;
        case Ablation::kNoKd: dc.alpha = dc.beta = 0.0; break;
    }
    return dc;
}

struct AblationRow {
    std::string variant;
    std::vector<MetricsReport> per_seed;
    MetricsReport mean;
};

/// Published overall P/R/F1 of the same four variants, for direction checks.
struct ReferenceRow {
    std::string_view variant;
    double precision, recall, f1;
};
inline constexpr std::array<ReferenceRow, 4> kReferenceAblation{{{"PMP", 89.01, 84.56, 86.72},
                                                                 {"w/o CE", 88.09, 80.79, 84.15},
                                                                 {"w/o SCL", 88.09, 83.19, 85.56},
                                                                 {"w/o KD", 87.91, 89.05, 88.44}}};

using TeacherProvider = std::function<EncoderParams<float>(std::uint64_t seed)>;

/// One baseline row plus one row per toggle. For every seed the teacher is
/// pre-trained once (or taken from `teachers`) and each variant distills,
/// fine-tunes and tests the first student preset.
inline std::vector<AblationRow> ablate(const PreparedData& data, const ExperimentConfig& cfg,
                                       const std::vector<Ablation>& toggles, const std::vector<std::uint64_t>& seeds,
                                       const TeacherProvider& teachers = {}) {
    require(!cfg.students.empty(), ErrorCode::kConfigMismatch, "ablation needs a student preset");
    require(!seeds.empty(), ErrorCode::kConfigMismatch, "ablation needs at least one seed");
    const ModelConfig tcfg = model_config(data, cfg.teacher);
    const ModelConfig scfg = model_config(data, cfg.students.front());
    std::vector<std::optional<Ablation>> variants{std::nullopt};
    for (Ablation a : toggles) variants.emplace_back(a);
    std::vector<AblationRow> rows(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v)
        rows[v].variant = variants[v] ? std::string(ablation_name(*variants[v])) : std::string("PMP");
    for (std::uint64_t seed : seeds) {
        EncoderParams<float> teacher;
        if (teachers) {
            teacher = teachers(seed);
        } else {
            PretrainConfig pc = cfg.pretrain;
            pc.seed = seed;
            teacher = run_pretrain(data, tcfg, pc).params;
        }
        for (std::size_t v = 0; v < variants.size(); ++v) {
            DistillConfig dc = ablated(cfg.distill, variants[v]);
            dc.pmp.seed = seed;
            FinetuneConfig fc = cfg.finetune;
            fc.seed = seed;
            fc.include_o_in_overall = cfg.include_o;
            const auto student = run_distill(data, teacher, tcfg, scfg, dc);
            auto outcome = run_finetune(data, scfg, student.params, fc);
            outcome.test.size_ratio = size_ratio(scfg, tcfg);
            log::info("ablate seed ", seed, " ", rows[v].variant, " F1 ", outcome.test.f1);
            rows[v].per_seed.push_back(std::move(outcome.test));
        }
    }
    for (auto& r : rows) r.mean = mean_report(r.per_seed);
    return rows;
}

/// Model, P, R, F1 per variant (seed means), then the change against the
/// first row next to the published change and whether the signs agree.
inline std::string ablation_tsv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "Model\tP\tR\tF1\tseeds\tdelta_F1\treference_delta_F1\tsame_direction\n";
    const double base = rows.empty() ? 0.0 : rows.front().mean.f1;
    for (const auto& r : rows) {
        os << r.variant << '\t' << r.mean.precision << '\t' << r.mean.recall << '\t' << r.mean.f1 << '\t'
           << r.per_seed.size();
        const ReferenceRow* ref = nullptr;
        for (const auto& x : kReferenceAblation)
            if (x.variant == r.variant) ref = &x;
        if (&r == &rows.front() || ref == nullptr) {
            os << "\t-\t-\t-\n";
            continue;
        }
        const double delta = r.mean.f1 - base;
        const double ref_delta = ref->f1 - kReferenceAblation.front().f1;
        const bool same = (delta > 0) == (ref_delta > 0) && delta != 0;
        os << '\t' << delta << '\t' << ref_delta << '\t' << (same ? "yes" : "no") << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// On-disk pipeline with resumable stages

inline constexpr std::array<std::string_view, 6> kStages{"build-corpus", "pretrain", "distill",
                                                         "finetune",     "evaluate", "report"};

/// A failure inside one pipeline stage; what() is "[stage] Code: message".
struct StageError : std::runtime_error {
    StageError(std::string_view stage_name, const Error& cause)
        : std::runtime_error("[" + std::string(stage_name) + "] " + cause.what()), stage(stage_name), code(cause.code()) {}
    std::string stage;
    ErrorCode code;
};

struct PipelineSummary {
    std::vector<std::string> stages_run;
    std::filesystem::path table;  // comparison TSV
};

namespace detail {

inline std::filesystem::path marker(const std::filesystem::path& out, std::string_view stage) {
    return out / "stages" / (std::string(stage) + ".done");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
    out << text;
}

inline std::string seed_dir(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

inline Checkpoint make_checkpoint(const PreparedData& data, const ModelConfig& config, EncoderParams<float> params,
                                  std::int64_t step, nlohmann::json history, nlohmann::json extra) {
    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.marks = data.marks;
    ckpt.vocab = data.vocab;
    ckpt.params = std::move(params);
    ckpt.step = step;
    ckpt.history = std::move(history);
    ckpt.extra = std::move(extra);
    ckpt.lexicon = data.segmenter;
    return ckpt;
}

}  // namespace detail

/// Every model of the recipe: the teacher preset followed by the students.
inline std::vector<std::string> pipeline_models(const ExperimentConfig& cfg) {
    std::vector<std::string> models{cfg.teacher};
    models.insert(models.end(), cfg.students.begin(), cfg.students.end());
    return models;
}

/// Stages run from the first one without a completion marker; markers of
/// later stages are removed first so a partial rerun cannot mix outputs.
/// Completed stage outputs are reloaded from disk.
inline PipelineSummary run_pipeline(const ExperimentConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path out = cfg.output;
    fs::create_directories(out / "stages");
    detail::write_text(out / "config.json", nlohmann::json(cfg).dump(2) + "\n");

    std::size_t first = kStages.size();
    for (std::size_t s = 0; s < kStages.size(); ++s) {
        if (!fs::exists(detail::marker(out, kStages[s]))) {
            first = s;
            break;
        }
    }
    for (std::size_t s = first; s < kStages.size(); ++s) fs::remove(detail::marker(out, kStages[s]));

    PipelineSummary summary;
    summary.table = out / "comparison.tsv";
    if (first == kStages.size()) {
        log::info("run-pipeline: every stage already complete in ", out.string());
        return summary;
    }

    std::optional<PreparedData> data;
    auto dataset = [&]() -> const PreparedData& {
        if (!data) data = load_dataset(out / "data");
        return *data;
    };
    const auto models = pipeline_models(cfg);
    auto stage_fn = [&](std::string_view stage) {
        if (stage == "build-corpus") {
            data = prepare_data(cfg);
            save_dataset(out / "data", *data);
            log::info("build-corpus: ", data->split.train.size(), "/", data->split.dev.size(), "/",
                      data->split.test.size(), " sequences, vocabulary ", data->vocab.size());
        } else if (stage == "pretrain") {
            const auto tcfg = model_config(dataset(), cfg.teacher);
            for (std::uint64_t seed : cfg.seeds) {
                PretrainConfig pc = cfg.pretrain;
                pc.seed = seed;
                const fs::path dir = out / detail::seed_dir(seed) / (cfg.teacher + "-pretrain");
                auto res = run_pretrain(dataset(), tcfg, pc, [&](long step, const EncoderParams<float>& p) {
                    save_checkpoint(dir / ("step-" + std::to_string(step)),
                                    detail::make_checkpoint(dataset(), tcfg, p, step, nlohmann::json::array(), {}));
                });
                log::info("pretrain seed ", seed, ": final loss ",
                          res.history.empty() ? 0.0 : res.history.back().loss);
                save_checkpoint(dir, detail::make_checkpoint(dataset(), tcfg, std::move(res.params), pc.steps,
                                                             res.history, {{"stage", "pretrain"}, {"seed", seed}}));
            }
        } else if (stage == "distill") {
            const auto tcfg = model_config(dataset(), cfg.teacher);
            for (std::uint64_t seed : cfg.seeds) {
                const Checkpoint teacher = load_checkpoint(out / detail::seed_dir(seed) / (cfg.teacher + "-pretrain"));
                for (const auto& student : cfg.students) {
                    DistillConfig dc = cfg.distill;
                    dc.pmp.seed = seed;
                    const auto scfg = model_config(dataset(), student);
                    auto res = run_distill(dataset(), teacher.params, tcfg, scfg, dc);
                    auto ckpt = detail::make_checkpoint(dataset(), scfg, std::move(res.params), dc.pmp.steps,
                                                        res.history, {{"stage", "distill"}, {"seed", seed}});
                    for (std::size_t k = 0; k < res.projections.size(); ++k)
                        ckpt.extra_tensors.emplace_back("projection." + std::to_string(k), res.projections[k]);
                    save_checkpoint(out / detail::seed_dir(seed) / (student + "-distill"), ckpt);
                    log::info("distill seed ", seed, " ", student, " done");
                }
            }
        } else if (stage == "finetune") {
            for (std::uint64_t seed : cfg.seeds) {
                for (const auto& model : models) {
                    const fs::path base = out / detail::seed_dir(seed);
                    const bool is_teacher = model == cfg.teacher;
                    const Checkpoint init = load_checkpoint(base / (model + (is_teacher ? "-pretrain" : "-distill")));
                    FinetuneConfig fc = cfg.finetune;
                    fc.seed = seed;
                    fc.include_o_in_overall = cfg.include_o;
                    const fs::path dir = base / (model + "-finetune");
                    auto res = run_finetune(dataset(), init.config, init.params, fc,
                                            [&](const EpochRecord& r, const EncoderParams<float>& p) {
                                                save_checkpoint(dir / ("epoch-" + std::to_string(r.epoch)),
                                                                detail::make_checkpoint(dataset(), init.config, p,
                                                                                        r.epoch, {}, {{"dev", r.dev}}));
                                            });
                    nlohmann::json epochs = nlohmann::json::array();
                    for (const auto& r : res.result.epochs)
                        epochs.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"dev", r.dev}});
                    save_checkpoint(dir, detail::make_checkpoint(dataset(), init.config, std::move(res.result.best),
                                                                 res.result.best_epoch, epochs,
                                                                 {{"stage", "finetune"},
                                                                  {"seed", seed},
                                                                  {"best_epoch", res.result.best_epoch}}));
                    log::info("finetune seed ", seed, " ", model, ": best epoch ", res.result.best_epoch);
                }
            }
        } else if (stage == "evaluate") {
            const auto tcfg = model_config(dataset(), cfg.teacher);
            for (std::uint64_t seed : cfg.seeds) {
                for (const auto& model : models) {
                    const Checkpoint ckpt = load_checkpoint(out / detail::seed_dir(seed) / (model + "-finetune"));
                    MetricsReport report =
                        evaluate_model(dataset(), ckpt.config, ckpt.params, dataset().split.test, cfg.include_o);
                    report.size_ratio = size_ratio(ckpt.config, tcfg);
                    detail::write_text(out / "reports" / (model + "-" + detail::seed_dir(seed) + ".json"),
                                       nlohmann::json(report).dump(2) + "\n");
                    log::info("evaluate seed ", seed, " ", model, ": overall F1 ", report.f1);
                }
            }
        } else if (stage == "report") {
            std::ostringstream table;
            bool header = false;
            for (const auto& model : models) {
                std::vector<MetricsReport> runs;
                for (std::uint64_t seed : cfg.seeds) {
                    std::ifstream in(out / "reports" / (model + "-" + detail::seed_dir(seed) + ".json"));
                    require(static_cast<bool>(in), ErrorCode::kIo, "missing report for " + model);
                    runs.push_back(nlohmann::json::parse(in).get<MetricsReport>());
                }
                MetricsReport mean = mean_report(runs);
                if (!header) {
                    table << mean.tsv_header() << '\n';
                    header = true;
                }
                table << mean.tsv_row(model) << '\n';
            }
            detail::write_text(summary.table, table.str());
        }
    };

    for (std::size_t s = first; s < kStages.size(); ++s) {
        const auto started = std::chrono::steady_clock::now();
        try {
            stage_fn(kStages[s]);
        } catch (const Error& e) {
            throw StageError(kStages[s], e);
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        detail::write_text(detail::marker(out, kStages[s]), nlohmann::json({{"seconds", seconds}}).dump() + "\n");
        summary.stages_run.emplace_back(kStages[s]);
    }
    return summary;
}

}  // namespace pmp
