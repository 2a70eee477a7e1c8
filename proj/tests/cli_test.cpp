#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "cxrinf/image_io.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(CXRINF_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = cxrinf::read_file(e.path());
  }
  return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("eval prints the metric row for reference counts") {
  testutil::TempDir dir("cli-eval");
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  const Result r = run("eval --confusion tn=12300,fp=244,fn=48,tp=2903", env);
  CHECK(r.code == 0);
  CHECK(r.output.find("sensitivity=98.37 specificity=98.05 precision=92.25 f1=95.21 f2=97.08 "
                      "accuracy=98.12") != std::string::npos);
  CHECK(fs::exists(dir / "manifests" / "eval.manifest.json"));
  CHECK(run("eval --confusion tn=1,fp=2", env).code == 1);
  CHECK(run("eval --confusion tn=x,fp=2,fn=1,tp=1", env).code == 1);
}

TEST_CASE("detect on an all-zero map is negative") {
  testutil::TempDir dir("cli-detect");
  cxrinf::write_file(dir / "zeros.png", cxrinf::encode_png_gray8(cxrinf::Grid::Zero(8, 8)));
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  const Result r = run("detect --prob " + (dir / "zeros.png").string(), env);
  CHECK(r.code == 0);
  CHECK(r.output == "negative\n");
  cxrinf::Grid one = cxrinf::Grid::Zero(8, 8);
  one(2, 2) = 1.0;
  cxrinf::write_file(dir / "one.png", cxrinf::encode_png_gray8(one));
  CHECK(run("detect --prob " + (dir / "one.png").string(), env).output == "positive\n");
}

TEST_CASE("usage errors exit with 1, runtime failures with 2") {
  testutil::TempDir dir("cli-errors");
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  const Result unknown = run("detect --prob x.png --bogus", env);
  CHECK(unknown.code == 1);
  CHECK(unknown.output.find("Usage") != std::string::npos);
  CHECK(run("no-such-command", env).code == 1);
  CHECK(run("", env).code == 1);
  const Result missing = run("infer --model " + (dir / "none.ckpt").string() + " --input " +
                                 dir.path().string() + " --out " + (dir / "o").string(),
                             env);
  CHECK(missing.code == 2);
  CHECK(run("--help", env).code == 0);
}

TEST_CASE("synth-corpus is deterministic and replayable") {
  testutil::TempDir dir("cli-synth");
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  REQUIRE(run("synth-corpus --n 8 --seed 7 --out " + a, env).code == 0);
  REQUIRE(run("synth-corpus --n 8 --seed 7 --out " + b, env).code == 0);
  const auto ta = tree(dir / "a");
  CHECK(ta.size() == 17);  // 8 images, 8 masks, catalog
  CHECK(ta == tree(dir / "b"));

  const fs::path manifest = dir / "manifests" / "synth-corpus.manifest.json";
  REQUIRE(fs::exists(manifest));
  std::ifstream in(manifest);
  const auto j = nlohmann::json::parse(in);
  CHECK(j["command"] == "synth-corpus");
  CHECK(j["seeds"]["synth"] == 7);
  CHECK(j["tool_version"] == "0.1.0");
  fs::remove_all(dir / "b");
  REQUIRE(run("replay " + manifest.string(), env).code == 0);
  CHECK(tree(dir / "b") == ta);
}

TEST_CASE("config file values yield to flags") {
  testutil::TempDir dir("cli-config");
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  std::ofstream(dir / "cfg.json") << R"({"schema_version": 1,
    "synth-corpus": {"n": 3, "seed": 2, "size": 32, "out": ")"
                                  << (dir / "c").string() << R"("}})";
  REQUIRE(run("--config " + (dir / "cfg.json").string() + " synth-corpus --n 4", env).code == 0);
  CHECK(tree(dir / "c").size() == 9);
  cxrinf::Grid g = cxrinf::read_gray_image(dir / "c" / "images" / "synth_covid_0001.png");
  CHECK(g.rows() == 32);

  std::ofstream(dir / "bad.json") << R"({"schema_version": 9})";
  CHECK(run("--config " + (dir / "bad.json").string() + " synth-corpus --out x", env).code == 1);
}

TEST_CASE("train, infer, render and evaluate from the command line") {
  testutil::TempDir dir("cli-pipeline");
  const std::string env = "CXRINF_DATA_DIR=" + dir.path().string();
  const std::string corpus = (dir / "corpus").string();
  REQUIRE(run("synth-corpus --n 4 --seed 3 --size 32 --out " + corpus, env).code == 0);
  const Result t = run("train-seg --corpus " + corpus + " --input-size 32 --epochs 1 --batch 2 --out " +
                           (dir / "m.ckpt").string(),
                       env);
  REQUIRE(t.code == 0);
  CHECK(t.output.find("epoch 0 loss") != std::string::npos);
  REQUIRE(run("infer --model " + (dir / "m.ckpt").string() + " --input " + corpus + "/images --out " +
                  (dir / "pred").string(),
              env)
              .code == 0);
  CHECK(fs::exists(dir / "pred" / "synth_covid_0001_prob.png"));
  REQUIRE(run("render-map --image " + corpus + "/images/synth_covid_0001.png --prob " +
                  (dir / "pred" / "synth_covid_0001_prob.png").string() + " --out " +
                  (dir / "maps").string(),
              env)
              .code == 0);
  CHECK(fs::exists(dir / "maps" / "synth_covid_0001_infmap.png"));
  CHECK(fs::exists(dir / "maps" / "synth_covid_0001.json"));
  const Result ev = run("eval --pred-dir " + (dir / "pred").string() + " --corpus " + corpus, env);
  CHECK(ev.code == 0);
  CHECK(ev.output.find("pixel n=4096") != std::string::npos);
  CHECK(ev.output.find("sample n=4") != std::string::npos);
}

}  // TEST_SUITE
