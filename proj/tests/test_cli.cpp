#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "xmreid_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(XMREID_CLI) + " " + args + " >" + (workdir() / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string last_log() { return slurp(workdir() / "last.log"); }

std::string path(const std::string& name) { return (workdir() / name).string(); }

const std::string tiny_data = " --ids 8 --per-id 4 --height 32 --width 16";
const std::string tiny_model = " --channels 4,6,8,8 --units 1 --part-dim 8 --disc-hidden 8 --pk-p 4 --pk-k 4";

}  // namespace

TEST_CASE("gen is reproducible") {
  REQUIRE(run("gen" + tiny_data + " --out " + path("d1")) == 0);
  REQUIRE(run("gen" + tiny_data + " --out " + path("d2")) == 0);
  CHECK(slurp(path("d1") + "/manifest.csv") == slurp(path("d2") + "/manifest.csv"));
  CHECK(slurp(path("d1") + "/dataset.json") == slurp(path("d2") + "/dataset.json"));
  REQUIRE(fs::exists(path("d1") + "/images/000005.bin"));
  CHECK(slurp(path("d1") + "/images/000005.bin") == slurp(path("d2") + "/images/000005.bin"));

  std::ifstream manifest(path("d1") + "/manifest.csv");
  std::size_t rows = 0;
  for (std::string line; std::getline(manifest, line);) ++rows;
  CHECK(rows == 1 + 8 * 4 * 2);

  auto m = nlohmann::json::parse(slurp(path("d1") + "/run_manifest.json"));
  CHECK(m["verb"] == "gen");
  CHECK(m.contains("seed"));
  CHECK(m.contains("code_version"));
}

TEST_CASE("usage errors") {
  CHECK(run("") == 2);
  CHECK(run("train") == 2);
  CHECK(last_log().find("--data") != std::string::npos);
  CHECK(run("eval --data " + path("d1")) == 2);
  CHECK(run("gen --ids lots") == 2);
}

TEST_CASE("configuration errors") {
  REQUIRE(run("gen" + tiny_data + " --out " + path("d3")) == 0);
  CHECK(run("train --data " + path("d3") + tiny_model + " --parts 3 --out " + path("bad")) == 3);
  CHECK(last_log().find("valid part counts: 1 2 4") != std::string::npos);
  CHECK(run("train --data " + path("d3") + tiny_model + " --parts 2 --ablation deep --out " + path("bad")) == 3);
  CHECK(run("gen --ids 2 --out " + path("bad")) == 3);
}

TEST_CASE("an unwritable output fails") {
  CHECK(run("gen" + tiny_data + " --out /proc/xmreid/nope") != 0);
}

TEST_CASE("train then eval is deterministic") {
  REQUIRE(run("gen" + tiny_data + " --out " + path("d4")) == 0);
  const std::string train = "train --data " + path("d4") + tiny_model + " --parts 2 --epochs 1";
  REQUIRE(run(train + " --out " + path("r1")) == 0);
  REQUIRE(run(train + " --out " + path("r2")) == 0);
  CHECK(slurp(path("r1") + "/checkpoint.bin") == slurp(path("r2") + "/checkpoint.bin"));
  CHECK(slurp(path("r1") + "/train_log.csv") == slurp(path("r2") + "/train_log.csv"));
  CHECK(slurp(path("r1") + "/eval.json") == slurp(path("r2") + "/eval.json"));

  const std::string eval = "eval --checkpoint " + path("r1") + "/checkpoint.bin --data " + path("d4");
  REQUIRE(run(eval + " --out " + path("e1")) == 0);
  REQUIRE(run(eval + " --out " + path("e2")) == 0);
  CHECK(slurp(path("e1") + "/eval.json") == slurp(path("e2") + "/eval.json"));
  CHECK(slurp(path("e1") + "/ranklists.csv") == slurp(path("e2") + "/ranklists.csv"));
  auto r = nlohmann::json::parse(slurp(path("e1") + "/eval.json"));
  CHECK(r["rank1"].get<double>() <= r["rank10"].get<double>());
  CHECK(r["layer_correlations"].size() == 4);

  REQUIRE(run("gen --ids 12 --per-id 4 --height 32 --width 16 --out " + path("d5")) == 0);
  CHECK(run("eval --checkpoint " + path("r1") + "/checkpoint.bin --data " + path("d5") + " --out " + path("e3")) == 3);
}

TEST_CASE("gradcheck verb") {
  CHECK(run("gradcheck --cases 3 --out " + path("gc")) == 0);
  CHECK(fs::exists(path("gc") + "/gradcheck.csv"));
}
