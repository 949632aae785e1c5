#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code = -1;
    std::string output;
};

CmdResult run_cli(const std::string& args) {
    const std::string cmd = std::string(IMSTY_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    CmdResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return res;
    while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) res.output += buf.data();
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = (fs::temp_directory_path() / "imsty_cli_test").string();
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        config_ = dir_ + "/config.json";
        std::ofstream f(config_);
        f << R"({
  "task": "classification",
  "method": "imsty",
  "seed": 42,
  "out_dir": ")" << dir_ << R"(/run",
  "lr": 0.001,
  "total_epochs": 2,
  "pretrain_epochs": 1,
  "batch_size": 8,
  "lr_decay_epochs": [],
  "model_width": 8,
  "data_classes": 4,
  "data_train_count": 32,
  "data_eval_count": 16,
  "aug_rotation_deg": 0.0,
  "aug_translate_frac": 0.0,
  "aug_scale_min": 1.0,
  "aug_scale_max": 1.0,
  "aug_contrast": 0.0
})";
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string dir_;
    std::string config_;
};

}  // namespace

TEST_F(CliTest, MissingConfigExitsWithUsageError) {
    CmdResult r = run_cli("train --config " + dir_ + "/absent.json");
    EXPECT_EQ(r.exit_code, 2) << r.output;
}

TEST_F(CliTest, UnknownConfigKeyExitsWithUsageError) {
    std::ofstream f(dir_ + "/bad.json");
    f << R"({"task": "classification", "shift_wavelength": 3})";
    f.close();
    CmdResult r = run_cli("train --config " + dir_ + "/bad.json");
    EXPECT_EQ(r.exit_code, 2) << r.output;
    EXPECT_NE(r.output.find("shift_wavelength"), std::string::npos) << r.output;
}

TEST_F(CliTest, InvalidShiftFieldExitsWithUsageError) {
    CmdResult r = run_cli("gen-data --spec " + config_ + " --out " + dir_ + "/gen --set shift_noise_sigma=-1");
    EXPECT_EQ(r.exit_code, 2) << r.output;
}

TEST_F(CliTest, TrainRunsAndIsReproducibleFromManifest) {
    CmdResult r = run_cli("train --config " + config_);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const std::string run_dir = dir_ + "/run";
    ASSERT_TRUE(fs::exists(run_dir + "/history.csv"));
    ASSERT_TRUE(fs::exists(run_dir + "/final.ckpt"));
    ASSERT_TRUE(fs::exists(run_dir + "/run_manifest.json"));

    std::ifstream h(run_dir + "/history.csv");
    std::string header;
    std::getline(h, header);
    EXPECT_EQ(header, "epoch,phase,loss_sup,loss_unsup,loss_total,beta,target_metric,alpha_mean");

    const std::string history1 = slurp(run_dir + "/history.csv");
    const std::string ckpt1 = slurp(run_dir + "/final.ckpt");

    // replay from the manifest alone into a fresh directory
    CmdResult r2 = run_cli("train --config " + run_dir + "/run_manifest.json --out " + dir_ + "/run2");
    ASSERT_EQ(r2.exit_code, 0) << r2.output;
    EXPECT_EQ(slurp(dir_ + "/run2/history.csv"), history1);
    EXPECT_EQ(slurp(dir_ + "/run2/final.ckpt"), ckpt1);
}

TEST_F(CliTest, SourceOnlyEqualsImstyWithAlphaZeroLambdaZero) {
    CmdResult a = run_cli("train --config " + config_ + " --method source_only --out " + dir_ + "/a");
    ASSERT_EQ(a.exit_code, 0) << a.output;
    CmdResult b = run_cli("train --config " + config_ +
                          " --method imsty --out " + dir_ +
                          "/b --set alpha_mode=fixed --set alpha_fixed=0 --set lambda_unsup=0");
    ASSERT_EQ(b.exit_code, 0) << b.output;
    // Histories (losses, metrics) must match exactly; the checkpoints differ
    // only by the teacher tensors of the imsty arm.
    EXPECT_EQ(slurp(dir_ + "/a/history.csv"), slurp(dir_ + "/b/history.csv"));
}

TEST_F(CliTest, EvalPrintsMetricsDeterministically) {
    ASSERT_EQ(run_cli("train --config " + config_).exit_code, 0);
    const std::string ckpt = dir_ + "/run/final.ckpt";
    CmdResult e1 = run_cli("eval --checkpoint " + ckpt + " --data " + config_);
    ASSERT_EQ(e1.exit_code, 0) << e1.output;
    EXPECT_NE(e1.output.find("accuracy"), std::string::npos);
    CmdResult e2 = run_cli("eval --checkpoint " + ckpt + " --data " + config_);
    EXPECT_EQ(e1.output, e2.output);
}

TEST_F(CliTest, EvalWithMismatchedShapesFails) {
    ASSERT_EQ(run_cli("train --config " + config_).exit_code, 0);
    const std::string ckpt = dir_ + "/run/final.ckpt";
    CmdResult r = run_cli("eval --checkpoint " + ckpt + " --data " + config_ + " --set data_classes=7");
    EXPECT_EQ(r.exit_code, 1) << r.output;
}

TEST_F(CliTest, ProfileBuiltinImstyHasZeroParams) {
    CmdResult r = run_cli("profile --graph builtin:imsty --resolution 8 --batch 32");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("alignment (imsty)"), std::string::npos);
    EXPECT_NE(r.output.find("16785408"), std::string::npos) << r.output;  // 4*32*8*8*2048 + 4*2048
}

TEST_F(CliTest, ProfileLenetGraphCountsParams) {
    CmdResult r = run_cli("profile --graph builtin:lenet5 --resolution 32");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("61750"), std::string::npos) << r.output;  // 2616 + 59134
}

TEST_F(CliTest, ProfileUnknownLayerKindExitsWithUsageError) {
    std::ofstream f(dir_ + "/bad.graph");
    f << "input channels=1\nfrobnicate out=3\n";
    f.close();
    CmdResult r = run_cli("profile --graph " + dir_ + "/bad.graph --resolution 32");
    EXPECT_EQ(r.exit_code, 2) << r.output;
    EXPECT_NE(r.output.find("frobnicate"), std::string::npos);
    EXPECT_NE(r.output.find("line 2"), std::string::npos);
}

TEST_F(CliTest, GenDataIsByteIdenticalAcrossRuns) {
    ASSERT_EQ(run_cli("gen-data --spec " + config_ + " --out " + dir_ + "/g1").exit_code, 0);
    ASSERT_EQ(run_cli("gen-data --spec " + config_ + " --out " + dir_ + "/g2").exit_code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir_ + "/g1")) {
        if (!e.is_regular_file()) continue;
        ++files;
        const std::string rel = fs::relative(e.path(), dir_ + "/g1").string();
        EXPECT_EQ(slurp(e.path().string()), slurp(dir_ + "/g2/" + rel)) << rel;
    }
    // 32 source + 32 target train + 16 eval samples plus manifest and meta per split
    EXPECT_EQ(files, 80u + 6u);

    std::ifstream mf(dir_ + "/g1/source_train/manifest.txt");
    std::string line;
    std::size_t manifest_lines = 0;
    while (std::getline(mf, line)) ++manifest_lines;
    std::size_t f64 = 0;
    for (const auto& e : fs::directory_iterator(dir_ + "/g1/source_train")) {
        if (e.path().extension() == ".f64") ++f64;
    }
    EXPECT_EQ(manifest_lines, f64);
}

TEST_F(CliTest, ExportFeaturesWritesExpectedRows) {
    ASSERT_EQ(run_cli("train --config " + config_).exit_code, 0);
    const std::string out = dir_ + "/features.csv";
    CmdResult r = run_cli("export-features --checkpoint " + dir_ + "/run/final.ckpt --data " +
                          config_ + " --out " + out);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    std::ifstream f(out);
    std::string line;
    std::size_t rows = 0;
    bool header_ok = false;
    while (std::getline(f, line)) {
        if (rows == 0) header_ok = line.rfind("sample_id,domain,label", 0) == 0;
        ++rows;
    }
    EXPECT_TRUE(header_ok);
    EXPECT_EQ(rows, 1u + 32u + 16u);  // header + source pool + target eval
    CmdResult r2 = run_cli("export-features --checkpoint " + dir_ + "/run/final.ckpt --data " +
                           config_ + " --out " + dir_ + "/features2.csv");
    ASSERT_EQ(r2.exit_code, 0);
    EXPECT_EQ(slurp(out), slurp(dir_ + "/features2.csv"));
}

TEST_F(CliTest, SeedFlagSupportsPaperSeedSet) {
    for (const std::string seed : {"22", "42", "102"}) {
        CmdResult r = run_cli("train --config " + config_ + " --seed " + seed + " --out " + dir_ +
                              "/seed" + seed + " --set total_epochs=1 --set pretrain_epochs=1");
        EXPECT_EQ(r.exit_code, 0) << r.output;
    }
}
