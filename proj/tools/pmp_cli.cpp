// Command-line entry point: one subcommand per pipeline stage plus the full
// recipe. Errors are reported on stderr as "[stage] Code: message" and the
// process exits nonzero.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pmp/checkpoint.hpp"
#include "pmp/dataset.hpp"
#include "pmp/distill.hpp"
#include "pmp/eval.hpp"
#include "pmp/finetune.hpp"
#include "pmp/log.hpp"
#include "pmp/pipeline.hpp"
#include "pmp/pretrain.hpp"
#include "pmp/synthetic.hpp"

namespace fs = std::filesystem;
using namespace pmp;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kUnexpected = 3 };

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    std::string log_level = "info";
};

ExperimentConfig load_config(const Globals& g) {
    ExperimentConfig cfg = g.config_path.empty() ? ExperimentConfig{} : load_experiment_config(g.config_path);
    if (g.seed) cfg.seeds = {*g.seed};
    return cfg;
}

std::uint64_t first_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
    out << text;
}

Checkpoint with_data(const PreparedData& data, const ModelConfig& config, EncoderParams<float> params,
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

void check_compatible(const Checkpoint& ckpt, const PreparedData& data) {
    require(ckpt.vocab == data.vocab, ErrorCode::kConfigMismatch,
            "checkpoint vocabulary differs from the dataset's vocab.txt");
    require(ckpt.marks == data.marks, ErrorCode::kConfigMismatch, "checkpoint mark set differs from the dataset's");
}

// A subcommand body tagged with the stage name used in diagnostics.
struct Command {
    std::string stage;
    std::function<void()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Punctuation restoration: PMP pre-training, distillation, slot-tagging fine-tuning"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may also follow the subcommand
    Globals g;
    app.add_option("--seed", g.seed, "Seed (overrides the config's seed list with this one seed)");
    app.add_option("--config", g.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--log-level", g.log_level, "debug, info, warn, error or off")
        ->check(CLI::IsMember({"debug", "info", "warn", "warning", "error", "off", "quiet"}));
    std::optional<Command> command;
    auto on = [&](CLI::App* sub, std::function<void()> fn) {
        sub->callback([&command, sub, fn = std::move(fn)] { command = Command{sub->get_name(), fn}; });
    };

    // make-synthetic ---------------------------------------------------------
    auto* make_synth = app.add_subcommand("make-synthetic", "Generate a synthetic punctuated corpus");
    std::size_t sentences = 3400;
    std::string synth_out, synth_lexicon;
    make_synth->add_option("--sentences", sentences, "Number of sentences (>= 100)");
    make_synth->add_option("--out", synth_out, "Output text file, one document per line")->required();
    make_synth->add_option("--lexicon-out", synth_lexicon, "Word lexicon output (default: <out>.lexicon.txt)");
    on(make_synth, [&] {
        const ExperimentConfig cfg = load_config(g);
        const auto corpus = make_synthetic_corpus(cfg.grammar, sentences, g.seed.value_or(cfg.corpus_seed));
        std::string text;
        for (const auto& d : corpus.documents) text += d + "\n";
        write_file(synth_out, text);
        std::string lex;
        for (const auto& w : corpus.lexicon) lex += w + "\n";
        write_file(synth_lexicon.empty() ? synth_out + ".lexicon.txt" : synth_lexicon, lex);
        log::info("make-synthetic: ", corpus.documents.size(), " documents written to ", synth_out);
    });

    // build-corpus -----------------------------------------------------------
    auto* build = app.add_subcommand("build-corpus", "Label, chunk and split punctuated text");
    std::string build_in, build_lexicon, build_out, build_marks;
    std::optional<std::size_t> build_chunk;
    std::vector<double> build_split;
    bool build_strict = false;
    build->add_option("--in", build_in, "Punctuated text file or directory of *.txt files, one document per line")
        ->required()
        ->check(CLI::ExistingPath);
    build->add_option("--lexicon", build_lexicon,
                      "Word lexicon (default: <in>.lexicon.txt, or a lexicon.txt / *.lexicon.txt inside an input directory)");
    build->add_option("--out", build_out, "Dataset directory")->required();
    build->add_option("--marks", build_marks, "Mark set, e.g. comma,period,colon");
    build->add_option("--chunk", build_chunk, "Maximum tokens per sequence");
    build->add_option("--ratios,--split", build_split, "Train, dev, test ratios")->expected(3)->delimiter(',');
    build->add_flag("--strict", build_strict, "Reject adjacent marks instead of keeping the first");
    on(build, [&] {
        const ExperimentConfig cfg = load_config(g);
        DataOptions opts = cfg.data;
        if (!build_marks.empty()) opts.marks = build_marks;
        if (build_chunk) opts.chunk_tokens = *build_chunk;
        if (!build_split.empty()) opts.ratios = {build_split[0], build_split[1], build_split[2]};
        if (build_strict) opts.adjacent = AdjacentPolicy::kStrict;
        if (g.seed) opts.seed = *g.seed;
        pmp::validate(opts.ratios);
        std::string lexicon_path = build_lexicon;
        std::vector<std::string> documents;
        if (fs::is_directory(build_in)) {
            std::vector<fs::path> files;
            auto is_lexicon = [](const fs::path& p) {
                const std::string name = p.filename().string();
                return name == "lexicon.txt" || name.ends_with(".lexicon.txt");
            };
            for (const auto& entry : fs::directory_iterator(build_in)) {
                if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
                if (is_lexicon(entry.path())) {
                    if (lexicon_path.empty()) lexicon_path = entry.path().string();
                } else {
                    files.push_back(entry.path());
                }
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                auto lines = read_lines(f);
                documents.insert(documents.end(), lines.begin(), lines.end());
            }
        } else {
            documents = read_lines(build_in);
            if (lexicon_path.empty() && fs::exists(build_in + ".lexicon.txt")) lexicon_path = build_in + ".lexicon.txt";
        }
        std::vector<std::string> words;
        if (!lexicon_path.empty()) words = LongestMatchSegmenter::load(lexicon_path).words();
        else log::warn("build-corpus: no lexicon given; every token is its own word");
        const auto data = build_dataset(documents, words, opts);
        save_dataset(build_out, data);
        std::cout << corpus_stats(data.split, data.marks).to_tsv();
    });

    // stats ------------------------------------------------------------------
    auto* stats = app.add_subcommand("stats", "Label counts per split");
    std::string stats_data, stats_out;
    stats->add_option("--data", stats_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    stats->add_option("--out", stats_out, "Write the TSV here instead of stdout");
    on(stats, [&] {
        const auto data = load_dataset(stats_data);
        const std::string tsv = corpus_stats(data.split, data.marks).to_tsv();
        if (stats_out.empty()) std::cout << tsv;
        else write_file(stats_out, tsv);
    });

    // pretrain ---------------------------------------------------------------
    auto* pre = app.add_subcommand("pretrain", "PMP pre-training of a fresh model");
    std::string pre_data, pre_out, pre_preset;
    std::optional<int> pre_steps, pre_batch;
    std::optional<double> pre_lr, pre_lambda;
    pre->add_option("--data", pre_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    pre->add_option("--out", pre_out, "Checkpoint directory")->required();
    pre->add_option("--preset", pre_preset, "Model preset (default: the config's teacher)");
    pre->add_option("--steps", pre_steps, "Optimizer steps");
    pre->add_option("--batch-size", pre_batch, "Sequences per step");
    pre->add_option("--lr", pre_lr, "Peak learning rate");
    pre->add_option("--lambda", pre_lambda, "SCL weight in [0, 1]");
    on(pre, [&] {
        const ExperimentConfig cfg = load_config(g);
        PretrainConfig pc = cfg.pretrain;
        pc.seed = first_seed(cfg);
        if (pre_steps) pc.steps = *pre_steps;
        if (pre_batch) pc.batch_size = *pre_batch;
        if (pre_lr) pc.lr = *pre_lr;
        if (pre_lambda) pc.lambda = *pre_lambda;
        pc.preset = pre_preset.empty() ? cfg.teacher : pre_preset;
        pc.validate();
        const auto data = load_dataset(pre_data);
        const auto config = model_config(data, pc.preset);
        auto res = run_pretrain(data, config, pc, [&](long step, const EncoderParams<float>& p) {
            save_checkpoint(fs::path(pre_out) / ("step-" + std::to_string(step)),
                            with_data(data, config, p, step, nlohmann::json::array(), {}));
        });
        const double acc = evaluate_masked_accuracy(res.params, config, encode_corpus(data.split.dev, data.vocab),
                                                    pc.seed, pc.mask_ratio);
        save_checkpoint(pre_out, with_data(data, config, std::move(res.params), pc.steps, res.history,
                                           {{"stage", "pretrain"}, {"config", pc}, {"dev_masked_accuracy", acc}}));
        log::info("pretrain: dev masked accuracy ", acc);
    });

    // distill ----------------------------------------------------------------
    auto* dist = app.add_subcommand("distill", "Distill a student from a pre-trained teacher");
    std::string dist_teacher, dist_student, dist_data, dist_out;
    std::optional<int> dist_steps;
    std::optional<double> dist_alpha, dist_beta, dist_gamma, dist_temperature;
    dist->add_option("--teacher", dist_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingDirectory);
    dist->add_option("--student-preset", dist_student, "Student preset (default: the config's first student)");
    dist->add_option("--data", dist_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    dist->add_option("--out", dist_out, "Student checkpoint directory")->required();
    dist->add_option("--steps", dist_steps, "Optimizer steps");
    dist->add_option("--alpha", dist_alpha, "Hidden-state loss weight");
    dist->add_option("--beta", dist_beta, "Logit distillation weight");
    dist->add_option("--gamma", dist_gamma, "Student PMP loss weight");
    dist->add_option("--temperature", dist_temperature, "Softening temperature");
    on(dist, [&] {
        const ExperimentConfig cfg = load_config(g);
        DistillConfig dc = cfg.distill;
        dc.pmp.seed = first_seed(cfg);
        if (dist_steps) dc.pmp.steps = *dist_steps;
        if (dist_alpha) dc.alpha = *dist_alpha;
        if (dist_beta) dc.beta = *dist_beta;
        if (dist_gamma) dc.gamma = *dist_gamma;
        if (dist_temperature) dc.temperature = *dist_temperature;
        dc.validate();
        const auto data = load_dataset(dist_data);
        const Checkpoint teacher = load_checkpoint(dist_teacher);
        check_compatible(teacher, data);
        const std::string preset = dist_student.empty() ? cfg.students.front() : dist_student;
        const auto scfg = model_config(data, preset);
        auto res = run_distill(data, teacher.params, teacher.config, scfg, dc);
        nlohmann::json pairs = res.layer_map.pairs;
        auto ckpt = with_data(data, scfg, std::move(res.params), dc.pmp.steps, res.history,
                              {{"stage", "distill"}, {"config", dc}, {"layer_map", pairs}});
        for (std::size_t k = 0; k < res.projections.size(); ++k)
            ckpt.extra_tensors.emplace_back("projection." + std::to_string(k), res.projections[k]);
        save_checkpoint(dist_out, ckpt);
        log::info("distill: student ", preset, " is ", size_ratio(scfg, teacher.config), "% of the teacher");
    });

    // finetune ---------------------------------------------------------------
    auto* fine = app.add_subcommand("finetune", "Slot-tagging fine-tuning with best-on-dev selection");
    std::string fine_ckpt, fine_data, fine_out;
    std::optional<int> fine_epochs, fine_batch;
    std::optional<double> fine_lr;
    fine->add_option("--ckpt", fine_ckpt, "Pre-trained or distilled checkpoint")->required()->check(CLI::ExistingDirectory);
    fine->add_option("--data", fine_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    fine->add_option("--out", fine_out, "Output directory (best model; epoch-N/ per epoch)")->required();
    fine->add_option("--epochs", fine_epochs, "Epochs");
    fine->add_option("--lr", fine_lr, "Peak learning rate");
    fine->add_option("--batch-size", fine_batch, "Sequences per step");
    on(fine, [&] {
        const ExperimentConfig cfg = load_config(g);
        FinetuneConfig fc = cfg.finetune;
        fc.seed = first_seed(cfg);
        if (fine_epochs) fc.epochs = *fine_epochs;
        if (fine_lr) fc.lr = *fine_lr;
        if (fine_batch) fc.batch_size = *fine_batch;
        fc.validate();
        const auto data = load_dataset(fine_data);
        const Checkpoint init = load_checkpoint(fine_ckpt);
        check_compatible(init, data);
        auto res = run_finetune(data, init.config, init.params, fc, [&](const EpochRecord& r, const EncoderParams<float>& p) {
            save_checkpoint(fs::path(fine_out) / ("epoch-" + std::to_string(r.epoch)),
                            with_data(data, init.config, p, r.epoch, {}, {{"dev", r.dev}}));
        });
        nlohmann::json epochs = nlohmann::json::array();
        for (const auto& r : res.result.epochs)
            epochs.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"dev", r.dev}});
        save_checkpoint(fine_out, with_data(data, init.config, std::move(res.result.best), res.result.best_epoch, epochs,
                                            {{"stage", "finetune"},
                                             {"config", fc},
                                             {"best_epoch", res.result.best_epoch},
                                             {"test", res.test}}));
        std::cout << res.test.tsv_header() << '\n' << res.test.tsv_row(init.config.preset) << '\n';
    });

    // evaluate ---------------------------------------------------------------
    auto* eval = app.add_subcommand("evaluate", "Per-class P/R/F1 of a fine-tuned model");
    std::string eval_ckpt, eval_data, eval_out, eval_split = "test", eval_reference;
    bool eval_include_o = false;
    eval->add_option("--ckpt", eval_ckpt, "Fine-tuned checkpoint")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--out", eval_out, "Report TSV (a .json twin is written next to it)");
    eval->add_option("--split", eval_split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    eval->add_option("--reference", eval_reference, "Checkpoint whose size is 100% in the report")
        ->check(CLI::ExistingDirectory);
    eval->add_flag("--include-o", eval_include_o, "Average O into the overall scores");
    on(eval, [&] {
        const ExperimentConfig cfg = load_config(g);
        const auto data = load_dataset(eval_data);
        const Checkpoint ckpt = load_checkpoint(eval_ckpt);
        check_compatible(ckpt, data);
        const auto& split = eval_split == "train" ? data.split.train : eval_split == "dev" ? data.split.dev : data.split.test;
        MetricsReport report = evaluate_model(data, ckpt.config, ckpt.params, split, eval_include_o || cfg.include_o);
        if (!eval_reference.empty()) report.size_ratio = size_ratio(ckpt.config, load_checkpoint(eval_reference).config);
        const std::string tsv = report.tsv_header() + "\n" + report.tsv_row(ckpt.config.preset) + "\n";
        if (eval_out.empty()) {
            std::cout << tsv;
        } else {
            write_file(eval_out, tsv);
            write_file(fs::path(eval_out).replace_extension(".json"), nlohmann::json(report).dump(2) + "\n");
        }
    });

    // punctuate --------------------------------------------------------------
    auto* punct = app.add_subcommand("punctuate", "Insert punctuation into plain text");
    std::string punct_ckpt, punct_in, punct_out;
    punct->add_option("--ckpt", punct_ckpt, "Fine-tuned checkpoint")->required()->check(CLI::ExistingDirectory);
    punct->add_option("--in", punct_in, "UTF-8 text, one document per line (default: stdin)");
    punct->add_option("--out", punct_out, "Output file (default: stdout)");
    on(punct, [&] {
        const Punctuator model = Punctuator::from_checkpoint(load_checkpoint(punct_ckpt));
        std::vector<std::string> lines;
        if (punct_in.empty()) {
            for (std::string line; std::getline(std::cin, line);) lines.push_back(line);
        } else {
            lines = read_lines(punct_in);
        }
        std::ostringstream os;
        for (const auto& line : lines) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) {
                os << '\n';
                continue;
            }
            os << model.punctuate(line) << '\n';
        }
        if (punct_out.empty()) std::cout << os.str();
        else write_file(punct_out, os.str());
    });

    // ablate -----------------------------------------------------------------
    auto* abl = app.add_subcommand("ablate", "Ablation grid: baseline and w/o CE, SCL, KD students");
    std::string abl_data, abl_out;
    std::vector<std::string> abl_toggles{"no-ce", "no-scl", "no-kd"};
    std::vector<std::uint64_t> abl_seeds;
    abl->add_option("--data", abl_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    abl->add_option("--out", abl_out, "Output directory for grid.tsv and per-seed reports")->required();
    abl->add_option("--toggles", abl_toggles, "Subset of no-ce,no-scl,no-kd (empty: baseline only)")
        ->delimiter(',')
        ->expected(0, 3);
    abl->add_option("--seeds", abl_seeds, "Seeds (default: the config's list)")->delimiter(',');
    on(abl, [&] {
        const ExperimentConfig cfg = load_config(g);
        std::vector<Ablation> toggles;
        for (const auto& t : abl_toggles)
            if (!t.empty()) toggles.push_back(parse_ablation(t));
        const auto data = load_dataset(abl_data);
        const auto seeds = abl_seeds.empty() ? cfg.seeds : abl_seeds;
        const auto rows = ablate(data, cfg, toggles, seeds);
        const std::string tsv = ablation_tsv(rows);
        write_file(fs::path(abl_out) / "grid.tsv", tsv);
        nlohmann::json per_seed = nlohmann::json::object();
        for (const auto& r : rows) per_seed[r.variant] = r.per_seed;
        write_file(fs::path(abl_out) / "per_seed.json", per_seed.dump(2) + "\n");
        std::cout << tsv;
    });

    // run-pipeline -----------------------------------------------------------
    auto* pipe = app.add_subcommand("run-pipeline", "Full recipe with resumable stages");
    std::string pipe_out;
    pipe->add_option("--out", pipe_out, "Experiment directory (default: the config's output)");
    on(pipe, [&] {
        ExperimentConfig cfg = load_config(g);
        if (!pipe_out.empty()) cfg.output = pipe_out;
        const auto summary = run_pipeline(cfg);
        std::ifstream table(summary.table);
        std::cout << table.rdbuf();
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }
    log::set_level(log::parse_level(g.log_level));
    try {
        command->run();
    } catch (const StageError& e) {
        std::cerr << "[" << command->stage << "] " << e.what() << '\n';
        return kFailure;
    } catch (const Error& e) {
        std::cerr << "[" << command->stage << "] " << e.what() << '\n';
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "[" << command->stage << "] unexpected error: " << e.what() << '\n';
        return kUnexpected;
    }
    return kOk;
}
