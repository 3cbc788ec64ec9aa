#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "support.hpp"

using Json = nlohmann::json;
using omniembed::testing::TempDir;

namespace {

struct Run {
  int status = -1;
  std::string out, err;

  Json out_json() const { return Json::parse(out); }
  Json err_json() const { return Json::parse(err); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the CLI through the shell; `env` is prepended verbatim (e.g. "VAR=1").
Run run(const std::string& args, const std::string& env = "env -u OMNI_EMBED_SEED") {
  TempDir io;
  const auto out = io.path() / "out", err = io.path() / "err";
  const std::string cmd = env + " '" OMNIEMBED_CLI "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

Json without_timestamp(Json j) {
  j.erase("timestamp");
  return j;
}

}  // namespace

TEST(Cli, VersionAndHelp) {
  const auto v = run("--version");
  EXPECT_EQ(v.status, 0);
  EXPECT_NE(v.out.find("0.1.0"), std::string::npos);
  EXPECT_NE(v.out.find("build"), std::string::npos);
  EXPECT_EQ(run("--help").status, 0);
  EXPECT_EQ(run("schedule --help").status, 0);
}

TEST(Cli, MissingSubcommandIsUsageError) {
  const auto r = run("");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err_json()["error"]["code"], "config");
  EXPECT_EQ(run("frobnicate").status, 2);
}

TEST(Cli, ScheduleAllWeightOnFirst) {
  const auto r = run("schedule --weights 1,0 --draws 100");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = r.out_json();
  ASSERT_EQ(j["sequence"].size(), 100u);
  for (const auto& d : j["sequence"]) EXPECT_EQ(d, 0);
  for (const char* f : {"tool", "version", "build", "command", "seed", "config", "config_hash", "timestamp"})
    EXPECT_TRUE(j.contains(f)) << f;
  EXPECT_EQ(j["command"], "schedule");
}

TEST(Cli, BadWeightsExitTwoWithFieldPath) {
  const auto r = run("schedule --weights 0.5,0.4 --draws 10");
  EXPECT_EQ(r.status, 2);
  const auto e = r.err_json()["error"];
  EXPECT_EQ(e["code"], "config");
  EXPECT_EQ(e["path"], "--weights");
  EXPECT_TRUE(r.out.empty());
  EXPECT_EQ(run("schedule --weights 0.5,x --draws 10").status, 2);
}

TEST(Cli, MissingInputFileNamesThePath) {
  const std::string missing = "/nonexistent/emb.f32";
  const auto r = run("mine --embeddings " + missing + " --pairs /nonexistent/p.jsonl --out -");
  EXPECT_EQ(r.status, 2);
  const auto e = r.err_json()["error"];
  EXPECT_EQ(e["code"], "io");
  EXPECT_EQ(e["path"], missing);

  const auto t = run("train --config /nonexistent/cfg.json --out /tmp/never");
  EXPECT_EQ(t.status, 2);
  EXPECT_EQ(t.err_json()["error"]["path"], "/nonexistent/cfg.json");
}

TEST(Cli, InvalidConfigReportsFieldPath) {
  TempDir dir;
  std::ofstream(dir.path() / "cfg.json") << R"({"seed": 1, "stages": [{"weights": {}}]})";
  const auto r = run("train --config " + (dir.path() / "cfg.json").string() + " --out " + (dir.path() / "o").string());
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err_json()["error"]["path"], "stages[0].steps");
}

TEST(Cli, SeedPrecedence) {
  const std::string args = "schedule --weights 0.5,0.5 --draws 5";
  EXPECT_EQ(run(args).out_json()["seed"], 0);
  EXPECT_EQ(run(args, "OMNI_EMBED_SEED=17").out_json()["seed"], 17);
  EXPECT_EQ(run("--seed 3 " + args, "OMNI_EMBED_SEED=17").out_json()["seed"], 3);
  EXPECT_EQ(run(args, "OMNI_EMBED_SEED=abc").status, 2);
}

TEST(Cli, CheckGradsDefaultsPass) {
  const auto r = run("check-grads");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = r.out_json();
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(j["entries"].size(), 8u);
  for (const auto& e : j["entries"]) EXPECT_LT(e["max_rel_error"].get<double>(), 1e-4) << e["loss"];
}

TEST(Cli, GenSynthIsDeterministic) {
  TempDir a, b;
  const std::string flags = " --n-clusters 3 --items-per-cluster 200";
  ASSERT_EQ(run("--seed 4 gen-synth --out " + a.path().string() + flags).status, 0);
  ASSERT_EQ(run("--seed 4 gen-synth --out " + b.path().string() + flags).status, 0);
  EXPECT_EQ(slurp(a.path() / "items.jsonl"), slurp(b.path() / "items.jsonl"));
  const auto ra = Json::parse(slurp(a.path() / "report.json")), rb = Json::parse(slurp(b.path() / "report.json"));
  EXPECT_EQ(without_timestamp(ra), without_timestamp(rb));
  EXPECT_EQ(ra["seed"], 4);
}
