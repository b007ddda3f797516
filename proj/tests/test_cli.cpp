#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cxal_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(CXAL_CLI_PATH) + " " + args + " > " + (kRoot / "last.out").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string arg(const fs::path& p) { return "'" + p.string() + "'"; }

void write_tiny_config(const fs::path& p) {
  std::ofstream(p) << R"({
  "seed": 5,
  "text": {"layers": 1, "dim": 32, "heads": 4, "ffn_dim": 64},
  "vision": {"layers": 1, "dim": 32, "heads": 4, "ffn_dim": 64, "patch_size": 16},
  "shared_dim": 16,
  "mntp": {"epochs": 2, "batch_size": 16, "lr_text": 0.002, "lr_projection": 0.002},
  "contrastive": {"epochs": 2, "batch_size": 16, "lr_text": 0.002, "lr_projection": 0.002},
  "clip": {"epochs": 1, "batch_size": 16, "lr_text": 0.001, "lr_projection": 0.001}
})";
}

struct Workspace {
  Workspace() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("gen-corpus is byte-identical for a fixed seed") {
  workspace();
  REQUIRE(run("gen-corpus --seed 7 --n 100 --out " + arg(kRoot / "a")) == 0);
  REQUIRE(run("gen-corpus --seed 7 --n 100 --out " + arg(kRoot / "b")) == 0);
  CHECK(slurp(kRoot / "a" / "corpus.jsonl") == slurp(kRoot / "b" / "corpus.jsonl"));
  const auto manifest = nlohmann::json::parse(slurp(kRoot / "a" / "manifest.json"));
  CHECK(manifest.at("command") == "gen-corpus");
  REQUIRE(run("gen-corpus --seed 8 --n 100 --out " + arg(kRoot / "c")) == 0);
  CHECK(slurp(kRoot / "a" / "corpus.jsonl") != slurp(kRoot / "c" / "corpus.jsonl"));
}

TEST_CASE("usage errors exit with status 2") {
  workspace();
  REQUIRE(run("gen-corpus --seed 7 --n 20 --out " + arg(kRoot / "u")) == 0);
  CHECK(run("train mntp --corpus " + arg(kRoot / "u" / "corpus.jsonl") + " --out " + arg(kRoot / "u")) == 2);
  CHECK(slurp(kRoot / "last.out").find("--config") != std::string::npos);
  CHECK(run("train sideways --config x --corpus y") == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("gen-corpus --n -3") == 2);
}

TEST_CASE("mntp then contrastive training retrieves above chance from the command line") {
  workspace();
  const fs::path d = kRoot / "run";
  write_tiny_config(kRoot / "tiny.json");
  REQUIRE(run("gen-corpus --seed 11 --n 400 --out " + arg(d / "train")) == 0);
  REQUIRE(run("gen-corpus --seed 11 --n 400 --offset 100000 --out " + arg(d / "test")) == 0);
  const std::string common = " --config " + arg(kRoot / "tiny.json") + " --corpus " + arg(d / "train" / "corpus.jsonl");
  REQUIRE(run("train mntp" + common + " --out " + arg(d / "m")) == 0);
  CHECK(fs::exists(d / "m" / "mntp.ckpt"));
  CHECK(fs::exists(d / "m" / "mntp.log.jsonl"));
  REQUIRE(run("train contrastive" + common + " --init " + arg(d / "m" / "mntp.ckpt") + " --out " + arg(d / "c")) == 0);

  const std::string ev = "eval task1 --ckpt " + arg(d / "c" / "contrastive.ckpt") + " --test " +
                         arg(d / "test" / "corpus.jsonl") + " --pool-size 100";
  REQUIRE(run(ev + " --out " + arg(d / "e1")) == 0);
  const auto report = nlohmann::json::parse(slurp(d / "e1" / "eval_report.json"));
  const auto& metrics = report.at("tasks").at(0).at("metrics");
  CHECK(metrics.at("recall@1").get<double>() > 3.0 * metrics.at("random_recall@1").get<double>());

  CHECK(run(ev + " --min task1.recall@1=0.011 --out " + arg(d / "e2")) == 0);
  CHECK(run(ev + " --min task1.recall@1=1.01 --out " + arg(d / "e3")) == 1);
  CHECK(run(ev + " --min task1.recall@1 --out " + arg(d / "e4")) == 2);

  REQUIRE(run("report " + arg(d / "e1" / "eval_report.json") + " " + arg(d / "e3" / "eval_report.json") +
              " --out " + arg(d / "r")) == 0);
  CHECK(slurp(d / "r" / "report.txt").find("task1") != std::string::npos);

  REQUIRE(run("embed --ckpt " + arg(d / "c" / "contrastive.ckpt") + " --corpus " + arg(d / "test" / "corpus.jsonl") +
              " --side findings --out " + arg(d / "emb")) == 0);
  const auto emb = nlohmann::json::parse(slurp(d / "emb" / "embeddings.findings.json"));
  CHECK(emb.at("rows").size() == 400);
  CHECK(run("embed --ckpt " + arg(d / "c" / "contrastive.ckpt") + " --corpus " + arg(d / "test" / "corpus.jsonl") +
            " --side image --out " + arg(d / "emb2")) == 1);
}

TEST_CASE("a missing checkpoint is a clean runtime error") {
  workspace();
  std::ofstream(kRoot / "junk.ckpt") << "not a checkpoint";
  REQUIRE(run("gen-corpus --seed 7 --n 10 --out " + arg(kRoot / "j")) == 0);
  CHECK(run("eval task1 --ckpt " + arg(kRoot / "junk.ckpt") + " --test " + arg(kRoot / "j" / "corpus.jsonl") +
            " --out " + arg(kRoot / "j")) == 1);
  CHECK(slurp(kRoot / "last.out").find("error") != std::string::npos);
}
