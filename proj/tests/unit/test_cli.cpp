#include "support/fixtures.hpp"

#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using protosim::testing::TempDir;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + PROTOSIM_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  TempDir dir("cli");
  EXPECT_EQ(run("", dir / "out.txt"), 1);
}

TEST(Cli, MissingDatasetIsUsageError) {
  TempDir dir("cli");
  EXPECT_EQ(run("train --datasets A=" + q(dir / "nope") + " --out " + q(dir / "run"), dir / "out.txt"), 1);
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  TempDir dir("cli");
  ASSERT_EQ(run("synth --out " + q(dir / "data") + " --images 4 --size 16", dir / "s.txt"), 0);
  EXPECT_EQ(run("train --datasets A=" + q(dir / "data/A") + " --out " + q(dir / "run") + " --set bogus=1",
                dir / "out.txt"),
            1);
}

TEST(Cli, CorruptCheckpointIsRuntimeError) {
  TempDir dir("cli");
  protosim::testing::write_text(dir / "bad.ckpt", "not a checkpoint");
  ASSERT_EQ(run("synth --out " + q(dir / "data") + " --images 4 --size 16", dir / "s.txt"), 0);
  EXPECT_EQ(run("index --checkpoint " + q(dir / "bad.ckpt") + " --dataset A=" + q(dir / "data/A") + " --out " +
                    q(dir / "idx"),
                dir / "out.txt"),
            2);
}

TEST(Cli, FullPipeline) {
  TempDir dir("cli");
  const fs::path data = dir / "data";
  const fs::path run_dir = dir / "run";
  const fs::path log = dir / "log.txt";
  auto ok = [&](const std::string& args) {
    const int code = run(args, log);
    EXPECT_EQ(code, 0) << args << "\n" << protosim::testing::read_text(log);
    return code == 0;
  };

  ASSERT_TRUE(ok("synth --out " + q(data) + " --images 24 --size 32 --seed 2"));
  ASSERT_TRUE(ok("train --datasets A=" + q(data / "A") + ",B=" + q(data / "B") + " --out " + q(run_dir) +
                 " --backbone toy-vit-s8-d16-l1-h2 --epochs 2 --prototypes 8 --batch-size 8 --set soft_epochs=1"
                 " --set local_crops=2 --set head_hidden_dim=16 --set head_bottleneck_dim=8"
                 " --set head_output_dim=16"));
  const fs::path ckpt = run_dir / "checkpoint.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));
  const std::string train_log = protosim::testing::read_text(run_dir / "train_log.jsonl");
  EXPECT_EQ(std::count(train_log.begin(), train_log.end(), '\n'), 2);

  ASSERT_TRUE(ok("index --checkpoint " + q(ckpt) + " --dataset A=" + q(data / "A") + " --dataset B=" +
                 q(data / "B") + " --out " + q(dir / "idx")));
  EXPECT_TRUE(fs::exists(dir / "idx/records/A.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "idx/records/B.jsonl"));

  ASSERT_TRUE(ok("compare --index " + q(dir / "idx") + " --checkpoint " + q(ckpt) + " --top-k 2 --out " +
                 q(dir / "report")));
  const json rep = json::parse(protosim::testing::read_text(dir / "report/report.json"));
  EXPECT_EQ(rep["K"], 8);
  EXPECT_TRUE(fs::exists(dir / "report/index.html"));

  ASSERT_TRUE(ok("probe --checkpoint " + q(ckpt) + " --dataset A=" + q(data / "A") + " --labels " +
                 q(data / "A_labels.csv") + " --set epochs=5 --out " + q(dir / "probe.json")));
  ASSERT_TRUE(ok("ablate --checkpoint " + q(ckpt) + " --probe " + q(dir / "probe.json") +
                 " --classes all --out " + q(dir / "ablation.json")));
  const json ab = json::parse(protosim::testing::read_text(dir / "ablation.json"));
  EXPECT_TRUE(ab.contains("ablation"));

  fs::path first_image;
  for (const auto& e : fs::directory_iterator(data / "A"))
    if (first_image.empty() || e.path() < first_image) first_image = e.path();
  ASSERT_TRUE(ok("viz --checkpoint " + q(ckpt) + " --image " + q(first_image) + " --prototype 0 --contour --out " +
                 q(dir / "overlay.png") + " --grid-json " + q(dir / "grid.json")));
  EXPECT_GT(fs::file_size(dir / "overlay.png"), 0u);
  const json grid = json::parse(protosim::testing::read_text(dir / "grid.json"));
  EXPECT_EQ(grid["grid"].size(), 4u);

  EXPECT_EQ(run("compare --index " + q(dir / "idx") + " --checkpoint " + q(ckpt) + " --threshold 2 --out " +
                    q(dir / "r2"),
                log),
            1);
  EXPECT_EQ(run("viz --checkpoint " + q(ckpt) + " --image " + q(first_image) + " --prototype 99 --out " +
                    q(dir / "o.png"),
                log),
            1);
}
