#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pmp/pipeline.hpp"

using namespace pmp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// The whole recipe on a corpus and schedule small enough for a unit test.
ExperimentConfig tiny_experiment(const fs::path& out) {
    ExperimentConfig cfg;
    cfg.output = out;
    cfg.synthetic_sentences = 200;
    cfg.seeds = {1};
    cfg.pretrain.steps = 4;
    cfg.pretrain.batch_size = 4;
    cfg.distill.pmp.steps = 4;
    cfg.distill.pmp.batch_size = 4;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 8;
    cfg.finetune.lr = 1e-3;
    return cfg;
}

class PipelineTest : public ::testing::Test {
protected:
    void SetUp() override {
        out_ = fs::temp_directory_path() /
               ("pmp_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(out_);
        log::set_level(log::Level::kWarn);
    }
    void TearDown() override { fs::remove_all(out_); }
    fs::path out_;
};

std::vector<std::string> all_stages() { return {kStages.begin(), kStages.end()}; }

}  // namespace

TEST_F(PipelineTest, RunsEveryStageThenResumes) {
    const ExperimentConfig cfg = tiny_experiment(out_);
    const auto first = run_pipeline(cfg);
    EXPECT_EQ(first.stages_run, all_stages());
    for (auto stage : kStages) EXPECT_TRUE(fs::exists(out_ / "stages" / (std::string(stage) + ".done"))) << stage;

    // The comparison table has a header plus one row per model.
    const std::string table = slurp(first.table);
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
    EXPECT_NE(table.find("teacher-desk"), std::string::npos);
    EXPECT_NE(table.find("student-desk"), std::string::npos);
    EXPECT_TRUE(fs::exists(out_ / "seed-1" / "student-desk-distill" / "tensors.bin"));
    const Checkpoint student = load_checkpoint(out_ / "seed-1" / "student-desk-distill");
    EXPECT_FALSE(student.extra_tensors.empty());  // projection matrices travel with the student

    // A completed run is a no-op.
    const std::string pretrained = slurp(out_ / "seed-1" / "teacher-desk-pretrain" / "tensors.bin");
    EXPECT_TRUE(run_pipeline(cfg).stages_run.empty());

    // Dropping the fine-tune marker reruns fine-tuning and everything after
    // it, reuses the pre-trained weights and reproduces the same reports.
    const std::string report = slurp(out_ / "reports" / "teacher-desk-seed-1.json");
    fs::remove(out_ / "stages" / "finetune.done");
    const auto resumed = run_pipeline(cfg);
    EXPECT_EQ(resumed.stages_run, (std::vector<std::string>{"finetune", "evaluate", "report"}));
    EXPECT_EQ(slurp(out_ / "seed-1" / "teacher-desk-pretrain" / "tensors.bin"), pretrained);
    EXPECT_EQ(slurp(out_ / "reports" / "teacher-desk-seed-1.json"), report);
    EXPECT_EQ(slurp(first.table), table);
}

TEST_F(PipelineTest, EarlierMissingMarkerInvalidatesLaterStages) {
    const ExperimentConfig cfg = tiny_experiment(out_);
    run_pipeline(cfg);
    fs::remove(out_ / "stages" / "distill.done");
    const auto resumed = run_pipeline(cfg);
    EXPECT_EQ(resumed.stages_run, (std::vector<std::string>{"distill", "finetune", "evaluate", "report"}));
}

TEST_F(PipelineTest, FailuresNameTheStage) {
    const ExperimentConfig cfg = tiny_experiment(out_);
    run_pipeline(cfg);
    fs::remove_all(out_ / "data");
    fs::remove(out_ / "stages" / "pretrain.done");
    try {
        run_pipeline(cfg);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage, "pretrain");
        EXPECT_EQ(e.code, ErrorCode::kIo);
        EXPECT_EQ(std::string(e.what()).rfind("[pretrain] ", 0), 0u) << e.what();
    }
    EXPECT_FALSE(fs::exists(out_ / "stages" / "pretrain.done"));
}

TEST_F(PipelineTest, ConfigJsonRoundTrip) {
    ExperimentConfig cfg = tiny_experiment(out_);
    cfg.students = {"student-desk", "h312"};
    cfg.include_o = true;
    cfg.finetune.include_o_in_overall = true;  // loading keeps the two in sync
    const auto back = nlohmann::json(cfg).get<ExperimentConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(cfg));
    EXPECT_TRUE(back.finetune.include_o_in_overall);
}

TEST_F(PipelineTest, InvalidConfigsAreRejectedBeforeAnyStage) {
    ExperimentConfig cfg = tiny_experiment(out_);
    cfg.students = {"no-such-preset"};
    EXPECT_THROW(run_pipeline(cfg), Error);
    cfg = tiny_experiment(out_);
    cfg.seeds.clear();
    EXPECT_THROW(run_pipeline(cfg), Error);
    cfg = tiny_experiment(out_);
    cfg.input_text = out_ / "missing.txt";
    EXPECT_THROW(run_pipeline(cfg), Error);
    EXPECT_FALSE(fs::exists(out_ / "stages"));
}
