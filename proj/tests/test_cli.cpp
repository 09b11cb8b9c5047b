#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

namespace {

namespace fs = std::filesystem;

int run(const std::string& args) {
  const std::string cmd = std::string(TMPO_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const auto p = fs::temp_directory_path() / ("tmpo_cli_" + name + ".cfg");
  std::ofstream(p) << text;
  return p;
}

const char* kTiny =
    "model.hidden = 8\npretrain.steps = 20\npretrain.batch = 16\n"
    "posttrain.steps = 2\nposttrain.trees = 1\neval.samples = 50\n";

TEST(Cli, HelpAndUsage) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("posttrain --no-such-flag"), 1);
}

TEST(Cli, ValidationErrorsExitOne) {
  EXPECT_EQ(run("posttrain --config /nonexistent.cfg"), 1);
  EXPECT_EQ(run("posttrain --config " + write_config("bad", "bogus.key = 1").string()), 1);
  EXPECT_EQ(run("posttrain --algorithm ppo --config " + write_config("t1", kTiny).string()), 1);
  EXPECT_EQ(run("pretrain --config " +
                write_config("k", std::string(kTiny) + "posttrain.group_size = 5\n").string()),
            1);
}

TEST(Cli, NumericalFailureExitsTwo) {
  const auto cfg = write_config("nan", std::string(kTiny) + "posttrain.lr = 1e300\n");
  const auto out = fs::temp_directory_path() / "tmpo_cli_nan";
  EXPECT_EQ(run("posttrain --config " + cfg.string() + " --out " + out.string()), 2);
}

TEST(Cli, SuccessfulVerbs) {
  const auto cfg = write_config("ok", kTiny);
  const auto out = fs::temp_directory_path() / "tmpo_cli_ok";
  fs::remove_all(out);
  EXPECT_EQ(run("pretrain --config " + cfg.string() + " --seed 5 --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
  EXPECT_EQ(run("posttrain --config " + cfg.string() + " --algorithm grpo --out " +
                (out / "grpo").string() + " --dump-tree " + (out / "tree.jsonl").string()),
            0);
  EXPECT_TRUE(fs::exists(out / "grpo" / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "tree.jsonl"));
  EXPECT_EQ(run("ablate --config " + cfg.string() + " --seeds 1 --out " + (out / "abl").string()),
            0);
  EXPECT_TRUE(fs::exists(out / "abl" / "ablation.csv"));
  EXPECT_EQ(run("check --seed 3"), 0);
}

}  // namespace
