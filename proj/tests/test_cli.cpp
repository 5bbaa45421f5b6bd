#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "steerkit/hash.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

int cli(const std::string& args) {
  std::string cmd = std::string(STEERKIT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

void write(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

}  // namespace

TEST(Cli, MissingFileIsFormatExitCode) {
  TempDir dir("steerkit_cli_missing");
  EXPECT_EQ(cli("--out " + dir.str() + " ingest --data " + dir.str() + "/nope.jsonl"), 4);
}

TEST(Cli, NoValidItemsIsInsufficientDataExitCode) {
  TempDir dir("steerkit_cli_garbage");
  write(dir.str() + "/bad.jsonl", "this is not json\nneither is this\n");
  EXPECT_EQ(cli("--out " + dir.str() + " ingest --data " + dir.str() + "/bad.jsonl"), 2);
}

TEST(Cli, CorruptCheckpointIsFormatExitCode) {
  TempDir dir("steerkit_cli_corrupt");
  write(dir.str() + "/bad.strk", "STRKgarbage");
  write(dir.str() + "/items.jsonl",
        R"({"id":"a","article":"x","summary_self":"s","summary_other":"o","gold_votes":[]})"
        "\n");
  EXPECT_EQ(cli("--out " + dir.str() + " baseline --ckpt " + dir.str() + "/bad.strk --data " +
                dir.str() + "/items.jsonl"),
            4);
}

TEST(Cli, ReplayCassetteMissIsTransportExitCode) {
  TempDir dir("steerkit_cli_miss");
  write(dir.str() + "/empty_cassette.jsonl", "");
  write(dir.str() + "/items.jsonl",
        R"({"id":"a","article":"x","summary_self":"s","summary_other":"o","gold_votes":[]})"
        "\n");
  EXPECT_EQ(cli("--out " + dir.str() + " gold --data " + dir.str() +
                "/items.jsonl --cassette " + dir.str() + "/empty_cassette.jsonl --replay"),
            3);
}

TEST(Cli, ReportWithoutBaselineIsInsufficientData) {
  TempDir dir("steerkit_cli_report");
  EXPECT_EQ(cli("--out " + dir.str() + " report"), 2);
}

TEST(Cli, ConfigFileDrivesOptions) {
  TempDir dir("steerkit_cli_config");
  write(dir.str() + "/run.ini",
        "out=\"" + dir.str() + "/run\"\nseed=7\n\n[fixture]\nitems=12\nno-verify=true\n");
  EXPECT_EQ(cli("--config " + dir.str() + "/run.ini fixture"), 0);
  EXPECT_TRUE(fs::exists(dir.str() + "/run/fixture/checkpoint.strk"));
  EXPECT_TRUE(fs::exists(dir.str() + "/run/fixture/items.jsonl"));
  // 12 items requested via the config file
  std::string items = steerkit::read_file(dir.str() + "/run/fixture/items.jsonl");
  int lines = 0;
  for (char c : items) lines += c == '\n';
  EXPECT_EQ(lines, 12);
}

TEST(Cli, FixtureSeedsDiffer) {
  TempDir dir("steerkit_cli_seeds");
  ASSERT_EQ(cli("--seed 1 --out " + dir.str() + "/s1 fixture --items 8 --no-verify"), 0);
  ASSERT_EQ(cli("--seed 2 --out " + dir.str() + "/s2 fixture --items 8 --no-verify"), 0);
  std::string a = steerkit::read_file(dir.str() + "/s1/fixture/checkpoint.strk");
  std::string b = steerkit::read_file(dir.str() + "/s2/fixture/checkpoint.strk");
  EXPECT_NE(steerkit::hash_hex(a), steerkit::hash_hex(b));
}
