#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "test_support.hpp"

using finehand::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + FINEHAND_CLI_PATH + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_small_config(const fs::path& path) {
  const nlohmann::json cfg{
      {"embedder", {{"embedding_dim", 16}, {"stage_channels", {4, 8}}, {"epochs", 2}}},
      {"sequence", {{"input_dim", 16}, {"hidden_size", 8}, {"num_layers", 1}, {"time_steps", 6}, {"num_classes", 2},
                    {"max_epochs", 3}}}};
  std::ofstream(path) << cfg.dump();
  const nlohmann::json spec{{"num_subjects", 2}, {"num_sign_classes", 2}, {"repetitions", 2}, {"frames_per_video", 10}};
  std::ofstream(path.parent_path() / "spec.json") << spec.dump();
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("predict-shapes").code, 2);  // --iteration is required
  EXPECT_EQ(run("evaluate --axis sideways").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, TrainSignsWithoutEmbedderNamesTheFlag) {
  TempDir dir;
  const auto r = run("--data-root " + dir.path().string() + " train-signs");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--embedder"), std::string::npos) << r.output;
}

TEST(Cli, FullChainOnSmallSyntheticData) {
  TempDir dir;
  write_small_config(dir / "config.json");
  const std::string root = "--data-root " + dir.path().string() + " --config " + (dir / "config.json").string();
  auto ok = [&](const std::string& args) {
    const auto r = run(root + " " + args);
    EXPECT_EQ(r.code, 0) << args << "\n" << r.output;
    return r;
  };
  ok("synth --spec " + (dir / "spec.json").string());
  ok("extract --patch-size 32");
  ok("extract --patch-size 32 --out " + (dir / "patches_again").string());
  for (const auto& entry : fs::recursive_directory_iterator(dir / "patches")) {
    if (!entry.is_regular_file() || entry.path().filename().string().rfind("manifest", 0) == 0) continue;
    ASSERT_EQ(slurp(entry.path()), slurp(dir / "patches_again" / fs::relative(entry.path(), dir / "patches")));
  }
  const std::string truth = (dir / "synth/handshape_truth.jsonl").string();
  ok("ingest-labels --oracle " + truth + " --iteration 1 --manual-fraction 0.25");
  EXPECT_EQ(run(root + " ingest-labels --oracle " + truth + " --iteration 1").code, 1);  // duplicates conflict
  EXPECT_EQ(run(root + " ingest-labels").code, 2);
  ok("train-embedder --iteration 0");
  ok("train-embedder --iteration 1");
  const auto pred = ok("predict-shapes --iteration 2 --threshold 0.0");
  EXPECT_NE(pred.output.find("enqueued"), std::string::npos);
  ok("ingest-labels --oracle " + truth + " --iteration 2");
  ok("train-embedder --iteration 2");
  for (int k : {0, 1, 2}) EXPECT_TRUE(fs::exists(dir / ("models/embedder_iter" + std::to_string(k) + ".ckpt")));
  EXPECT_TRUE(fs::exists(dir / "store/ledger.json"));
  EXPECT_TRUE(fs::exists(dir / "store/manifest.ingest-labels.json"));

  const std::string emb = (dir / "models/embedder_iter2.ckpt").string();
  ok("train-signs --embedder " + emb);
  EXPECT_TRUE(fs::exists(dir / "models/signs/sign_model.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "models/signs/metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "models/signs/manifest.train-signs.json"));

  ok("evaluate --experiment smoke --iterations 0 1 2");
  const auto table = nlohmann::json::parse(slurp(dir / "results/smoke/iterations.json"));
  EXPECT_EQ(table.at("rows").size(), 3u);
  EXPECT_EQ(table.at("subjects").size(), 2u);
  const auto first = slurp(dir / "results/smoke/iterations.json");
  ok("evaluate --experiment smoke --iterations 0 1 2");
  EXPECT_EQ(slurp(dir / "results/smoke/iterations.json"), first);

  fs::remove(dir / "results/smoke/iterations.svg");
  ok("plot-results " + (dir / "results/smoke/iterations.json").string());
  EXPECT_TRUE(fs::exists(dir / "results/smoke/iterations.svg"));

  const auto env = "FINEHAND_DATA_ROOT=" + dir.path().string();
  const auto r = run("export-embeddings --embedder " + emb, env);
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "embeddings/S01_G00_R0/left.npy"));

  const auto missing = run(root + " evaluate --experiment smoke --iterations 0 5");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.output.find("iteration 5"), std::string::npos) << missing.output;
}
