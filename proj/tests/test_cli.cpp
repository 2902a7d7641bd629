#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kBinary = MTPP_BINARY;

// Shared fixture directory with a tiny generated dataset and one trained model.
class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("pmtpp_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "small.json") << R"({
      "model.hidden_size": 8, "model.d_mark": 4, "model.latent_size": 3, "model.d_time": 4, "model.enc_hidden": 8,
      "trainer.max_epochs": 2, "trainer.batch_size": 8, "trainer.mc_samples": 20, "trainer.valid_z": 1,
      "trainer.valid_mc_samples": 20, "trainer.lr": 0.01, "eval.n_z": 1, "eval.mc_samples": 20, "threads": 1})";
    ASSERT_EQ(run("gen-data --out " + p("data") +
                  " --synth.n_train_users 10 --synth.n_valid_users 6 --synth.n_test_users 6 --synth.K 5"
                  " --synth.T 20 --seed 4"),
              0);
    ASSERT_EQ(run("train --data " + p("data") + " --out " + p("train") + " --config " + p("small.json")), 0);
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string p(const std::string& rel) { return (root / rel).string(); }

  static int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + kBinary + " " + args + " > " + p("last.log") + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const std::string& rel) {
    std::ifstream in(root / rel, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  static std::string ckpt() { return " --checkpoint " + p("train/model.json") + " "; }
};

fs::path Cli::root;

}  // namespace

TEST_F(Cli, TrainWritesCheckpointMetricsAndManifest) {
  for (const char* f : {"model.json", "metrics.csv", "summary.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(root / "train" / f)) << f;
  const auto manifest = nlohmann::json::parse(slurp("train/manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["config"]["trainer.lr"], 0.01);
  EXPECT_EQ(manifest["inputs"]["data"]["train"].get<std::string>().size(), 64u);
  EXPECT_GT(manifest["t_max"].get<double>(), 0.0);
  EXPECT_EQ(slurp("train/metrics.csv").substr(0, 5), "stage");
}

TEST_F(Cli, RerunProducesByteIdenticalMetrics) {
  ASSERT_EQ(run("train --data " + p("data") + " --out " + p("train_again") + " --config " + p("small.json") +
                " --threads 2"),
            0);
  EXPECT_EQ(slurp("train/metrics.csv"), slurp("train_again/metrics.csv"));
  EXPECT_EQ(slurp("train/model.json"), slurp("train_again/model.json"));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("train --data " + p("data") + " --out " + p("x") + " --no-such-flag 1"), 1);
  std::ofstream(root / "bad.json") << R"({"trainer.unknown": 1})";
  EXPECT_EQ(run("train --data " + p("data") + " --out " + p("x") + " --config " + p("bad.json")), 1);
  EXPECT_EQ(run("train --data " + p("data") + " --out " + p("x") + " --trainer.lr -1"), 1);
  EXPECT_EQ(run("train --data " + p("missing") + " --out " + p("x")), 2);
  EXPECT_EQ(run("evaluate --data " + p("data") + " --out " + p("x") + " --checkpoint " + p("missing.json")), 2);
  std::ofstream(root / "broken.json") << "{";
  EXPECT_EQ(run("train --data " + p("data") + " --out " + p("x") + " --config " + p("broken.json")), 2);
}

TEST_F(Cli, FlagsOverrideConfigAndSeedFallsBackToEnvironment) {
  ASSERT_EQ(run("gen-data --out " + p("env") + " --synth.n_train_users 3 --synth.n_valid_users 2 --synth.n_test_users 2",
                "MTPP_SEED=77"),
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp("env/manifest.json"))["seed"], 77);
  ASSERT_EQ(run("gen-data --out " + p("env2") + " --seed 5 --synth.n_train_users 3 --synth.n_valid_users 2"
                " --synth.n_test_users 2",
                "MTPP_SEED=77"),
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp("env2/manifest.json"))["seed"], 5);
  std::ofstream(root / "seed.json") << R"({"seed": 9, "synth.n_train_users": 3, "synth.n_valid_users": 2,
                                          "synth.n_test_users": 2})";
  ASSERT_EQ(run("gen-data --out " + p("env3") + " --config " + p("seed.json") + " --synth.n_test_users 3",
                "MTPP_SEED=77"),
            0);
  const auto m = nlohmann::json::parse(slurp("env3/manifest.json"));
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["config"]["synth.n_test_users"], 3);
}

TEST_F(Cli, EvaluationSubcommandsProduceTheirOutputs) {
  const std::string data = " --data " + p("data") + " ";
  ASSERT_EQ(run("evaluate" + data + ckpt() + "--out " + p("eval") + " --config " + p("small.json")), 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp("eval/metrics.json")).contains("nll"));
  ASSERT_EQ(run("curves" + data + ckpt() + "--out " + p("curves") + " --config " + p("small.json")), 0);
  EXPECT_EQ(slurp("curves/curves.csv").substr(0, 7), "model,t");
  ASSERT_EQ(run("predict" + data + ckpt() + "--out " + p("pred") + " --predict.mc_samples 200 --predict.n_z 1"), 0);
  EXPECT_EQ(slurp("pred/predictions.csv").substr(0, 12), "user,seq_id,");
  ASSERT_EQ(run("identify" + data + ckpt() + "--out " + p("id") +
                " --identify.trials 20 --identify.valid_trials 20 --identify.n_z 1 --identify.mc_samples 10"),
            0);
  const auto id = nlohmann::json::parse(slurp("id/identify.json"));
  EXPECT_EQ(id["methods"].size(), 2u);
  EXPECT_EQ(id["trials"], 20);
  ASSERT_EQ(run("sample" + ckpt() + "--out " + p("sample") + " --sample.horizon 20 --sample.n 3"), 0);
  std::istringstream lines(slurp("sample/samples.jsonl"));
  int n = 0;
  for (std::string line; std::getline(lines, line); ++n)
    EXPECT_TRUE(nlohmann::json::parse(line).contains("provenance"));
  EXPECT_EQ(n, 3);
  ASSERT_EQ(run("sample-quality" + data + ckpt() + "--out " + p("sq") + " --sample_quality.rho 0.1,0.5"), 0);
  EXPECT_EQ(nlohmann::json::parse(slurp("sq/sample_quality.json"))["results"].size(), 2u);
  ASSERT_EQ(run("ablate" + data + "--out " + p("ablate") + " --config " + p("small.json") +
                " --ablation.fractions 0.5,1.0"),
            0);
  EXPECT_TRUE(fs::exists(root / "ablate" / "ablation.csv"));
  for (const char* dir : {"eval", "curves", "pred", "id", "sample", "sq", "ablate"}) {
    int manifests = 0;
    for (const auto& e : fs::directory_iterator(root / dir))
      manifests += e.path().filename().string().find("manifest") != std::string::npos;
    EXPECT_EQ(manifests, 1) << dir;
  }
}
