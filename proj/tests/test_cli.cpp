#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "amieod/checkpoint.hpp"
#include "amieod/cli.hpp"

using namespace amieod;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "amieod");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
  auto r = run({"frobnicate"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(run({}).code == cli::kExitUsage);
  CHECK(run({"synth", "--set", "nosuch.key=1"}).code == cli::kExitUsage);
  CHECK(run({"synth", "--seed", "abc"}).code == cli::kExitUsage);
  CHECK(run({"eval", "--routing", "fixed:9", "--checkpoint", "x"}).code != cli::kExitOk);
  CHECK(run({"--help"}).code == cli::kExitOk);
}

TEST_CASE("missing checkpoint exits 1 with a clear message") {
  const auto r = run({"eval", "--checkpoint", "/nonexistent/model.ckpt", "--out",
                      (fs::temp_directory_path() / "amieod_cli_missing").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(r.err.find("checkpoint not found") != std::string::npos);
  CHECK(r.err.find("terminate") == std::string::npos);
}

TEST_CASE("full workflow on a tiny dataset") {
  const auto dir = fs::temp_directory_path() / "amieod_cli_flow";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto data = dir / "data";
  std::ofstream(dir / "cfg.toml") << "[data]\nroot = \"" << data.string()
                                  << "\"\n[synth]\nnum_train = 6\nnum_test = 3\ncanvas_size = 64\n"
                                     "[piem]\nsteps = 2\n[stage1]\ninput_size = 64\nepochs = 1\nbatch_size = 3\n"
                                     "[stage2]\ninput_size = 64\nepochs = 1\n[esm]\ninput_size = 64\n";
  const std::string cfg = (dir / "cfg.toml").string();

  REQUIRE(run({"synth", "--config", cfg}).code == 0);
  CHECK(fs::exists(data / "images/train"));
  CHECK(fs::exists(data / "labels/test"));
  CHECK(std::distance(fs::directory_iterator(data / "images/train"), fs::directory_iterator{}) == 6);

  const auto s1 = dir / "s1";
  auto r = run({"train-stage1", "--config", cfg, "--out", s1.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(s1 / "stage1.ckpt"));
  CHECK(fs::exists(s1 / "stage1_log.jsonl"));
  CHECK(load_checkpoint(s1 / "stage1.ckpt").stage == 1);

  r = run({"eval", "--config", cfg, "--checkpoint", (s1 / "stage1.ckpt").string(), "--out",
           (dir / "e_esm").string()});
  CHECK(r.code == cli::kExitRuntime);

  const auto s2 = dir / "s2";
  r = run({"train-stage2", "--config", cfg, "--checkpoint", (s1 / "stage1.ckpt").string(), "--out", s2.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto ck = (s2 / "stage2.ckpt").string();

  r = run({"eval", "--config", cfg, "--checkpoint", ck, "--out", (dir / "e1").string(), "--plots", "--loss-log",
           (s1 / "stage1_log.jsonl").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "e1/report.json"));
  CHECK(fs::exists(dir / "e1/pr_curve.png"));
  CHECK(fs::exists(dir / "e1/loss_dgrl.png"));
  run({"eval", "--config", cfg, "--checkpoint", ck, "--out", (dir / "e2").string()});
  CHECK(slurp(dir / "e1/report.json") == slurp(dir / "e2/report.json"));

  r = run({"route-stats", "--config", cfg, "--checkpoint", ck, "--out", (dir / "rs").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto stats = nlohmann::json::parse(slurp(dir / "rs/route_stats.json"));
  int64_t total = 0;
  for (const auto& v : stats["selection_counts"]) total += v.get<int64_t>();
  CHECK(total == 3);

  const auto img = *fs::directory_iterator(data / "images/test");
  r = run({"infer", "--config", cfg, "--checkpoint", ck, "--out", (dir / "inf").string(), img.path().string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto dets = nlohmann::json::parse(slurp(dir / "inf/detections.json"));
  CHECK(dets.size() == 1);
  r = run({"infer", "--config", cfg, "--checkpoint", ck, "--out", (dir / "inf2").string(), img.path().string()});
  CHECK(slurp(dir / "inf/detections.json") == slurp(dir / "inf2/detections.json"));
}

}
