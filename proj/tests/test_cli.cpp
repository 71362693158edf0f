#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "evtrack/metrics.hpp"

namespace fs = std::filesystem;

namespace {

struct RunOutput {
  int exit_code = -1;
  std::string output;
};

RunOutput run_cli(const std::string& args) {
  const std::string cmd = std::string(EVTRACK_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunOutput out;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::fgets(buf.data(), buf.size(), pipe)) out.output += buf.data();
  const int status = pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small model/scene so CLI round trips stay fast.
const char* kTinyConfig = R"({
  "model": {"depth": 1, "embed_dim": 32, "state_size": 8, "prompt_dim": 8,
            "pool_size": 4, "head_width": 32, "head_stages": 2,
            "template_side": 64, "search_side": 128},
  "synth": {"height": 96, "width": 96, "object_w": 16, "object_h": 16,
            "frames": 6}
})";

}  // namespace

TEST_CASE("synth is deterministic and guards overwrites") {
  TempDir tmp("evtrack_cli_synth");
  const auto cfg = tmp.path / "cfg.json";
  std::ofstream(cfg) << kTinyConfig;

  const std::string base = "--config " + cfg.string() + " --seed 9 synth";
  auto a = run_cli(base + " --out " + (tmp.path / "a").string());
  CHECK(a.exit_code == 0);
  auto b = run_cli(base + " --out " + (tmp.path / "b").string());
  CHECK(b.exit_code == 0);

  // Byte-identical outputs for the same seed.
  CHECK(read_file(tmp.path / "a" / "events.csv") ==
        read_file(tmp.path / "b" / "events.csv"));
  CHECK(read_file(tmp.path / "a" / "groundtruth.txt") ==
        read_file(tmp.path / "b" / "groundtruth.txt"));
  CHECK(read_file(tmp.path / "a" / "frames" / "000000.ppm") ==
        read_file(tmp.path / "b" / "frames" / "000000.ppm"));

  // Existing output is refused without --force.
  auto refuse = run_cli(base + " --out " + (tmp.path / "a").string());
  CHECK(refuse.exit_code != 0);
  auto forced = run_cli(base + " --out " + (tmp.path / "a").string() +
                        " --force");
  CHECK(forced.exit_code == 0);
}

TEST_CASE("single-frame synth writes one image and an empty event body") {
  TempDir tmp("evtrack_cli_synth1");
  auto r = run_cli("--seed 4 synth --frames 1 --out " +
                   (tmp.path / "d").string());
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(tmp.path / "d" / "frames" / "000000.ppm"));
  CHECK(!fs::exists(tmp.path / "d" / "frames" / "000001.ppm"));
  // Header line only.
  const std::string events = read_file(tmp.path / "d" / "events.csv");
  CHECK(events.rfind("#H=", 0) == 0);
  CHECK(events.find('\n') == events.size() - 1);
}

TEST_CASE("generated ground truth re-parses losslessly") {
  TempDir tmp("evtrack_cli_gt");
  const auto cfg = tmp.path / "cfg.json";
  std::ofstream(cfg) << kTinyConfig;
  auto r = run_cli("--config " + cfg.string() + " --seed 6 synth --out " +
                   (tmp.path / "d").string());
  REQUIRE(r.exit_code == 0);
  auto boxes =
      evtrack::read_ground_truth((tmp.path / "d" / "groundtruth.txt").string());
  CHECK(boxes.size() == 6);
  // Writing and re-reading reproduces the same values.
  const auto copy = tmp.path / "copy.txt";
  evtrack::write_ground_truth(copy.string(), boxes);
  auto again = evtrack::read_ground_truth(copy.string());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    CHECK(boxes[i].x == again[i].x);
    CHECK(boxes[i].w == again[i].w);
  }
}

TEST_CASE("eval of predictions equal to ground truth prints PR=1.0000") {
  TempDir tmp("evtrack_cli_eval");
  std::vector<evtrack::RectF> boxes = {{10, 10, 30, 30}, {12, 11, 30, 30}};
  evtrack::write_ground_truth((tmp.path / "gt.txt").string(), boxes);
  std::vector<evtrack::FrameResult> results;
  for (const auto& b : boxes) results.push_back({b, 1.0});
  evtrack::write_results((tmp.path / "pred.txt").string(), results);

  auto r = run_cli("eval --pred " + (tmp.path / "pred.txt").string() +
                   " --gt " + (tmp.path / "gt.txt").string());
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("PR=1.0000") != std::string::npos);
  CHECK(r.output.find("NPR=1.0000") != std::string::npos);
  CHECK(r.output.find("SR@0.5=1.0000") != std::string::npos);
  CHECK(r.output.find("SR_auc=") != std::string::npos);
}

TEST_CASE("depth-zero untrained track still emits one box per frame") {
  TempDir tmp("evtrack_cli_track0");
  const auto cfg = tmp.path / "cfg.json";
  std::ofstream(cfg) << R"({
    "model": {"depth": 0, "embed_dim": 32, "state_size": 8, "prompt_dim": 8,
              "pool_size": 4, "head_width": 16, "head_stages": 1,
              "template_side": 64, "search_side": 128},
    "synth": {"height": 96, "width": 96, "object_w": 16, "object_h": 16,
              "frames": 4}
  })";
  auto synth = run_cli("--config " + cfg.string() + " --seed 2 synth --out " +
                       (tmp.path / "d").string());
  REQUIRE(synth.exit_code == 0);
  auto track = run_cli("--config " + cfg.string() + " track --data " +
                       (tmp.path / "d").string() + " --out " +
                       (tmp.path / "r.txt").string());
  CHECK(track.exit_code == 0);
  auto results = evtrack::read_results((tmp.path / "r.txt").string());
  CHECK(results.size() == 4);
}

TEST_CASE("train-track-eval round trip on a tiny sequence") {
  TempDir tmp("evtrack_cli_e2e");
  const auto cfg = tmp.path / "cfg.json";
  std::ofstream(cfg) << kTinyConfig;
  const std::string common = "--config " + cfg.string() + " --seed 3 ";

  REQUIRE(run_cli(common + "synth --out " + (tmp.path / "d").string())
              .exit_code == 0);
  auto train = run_cli(common + "train --data " + (tmp.path / "d").string() +
                       " --out " + (tmp.path / "m.ckpt").string() +
                       " --steps 12 --score-steps 2");
  CHECK(train.exit_code == 0);
  CHECK(train.output.find("final_loss=") != std::string::npos);
  CHECK(fs::exists(tmp.path / "m.ckpt"));
  CHECK(fs::exists(tmp.path / "m.ckpt.losses.csv"));

  auto track = run_cli(common + "track --data " + (tmp.path / "d").string() +
                       " --ckpt " + (tmp.path / "m.ckpt").string() +
                       " --out " + (tmp.path / "r.txt").string());
  CHECK(track.exit_code == 0);

  auto eval = run_cli("eval --pred " + (tmp.path / "r.txt").string() +
                      " --gt " + (tmp.path / "d" / "groundtruth.txt").string());
  CHECK(eval.exit_code == 0);
  CHECK(eval.output.find("PR=") != std::string::npos);
}

TEST_CASE("missing files exit with code 2 and name the path") {
  auto r = run_cli("track --data /nonexistent_dir --out /tmp/x.txt");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("/nonexistent_dir") != std::string::npos);

  auto e = run_cli("eval --pred /nonexistent.txt --gt /nonexistent2.txt");
  CHECK(e.exit_code == 2);
  CHECK(e.output.find("/nonexistent.txt") != std::string::npos);
}

TEST_CASE("config invariant violations exit with code 3 and the field") {
  TempDir tmp("evtrack_cli_badcfg");
  const auto cfg = tmp.path / "bad.json";
  std::ofstream(cfg) << R"({"model": {"state_size": 16, "prompt_dim": 8}})";
  auto r = run_cli("--config " + cfg.string() + " synth --out " +
                   (tmp.path / "d").string());
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("prompt_dim") != std::string::npos);
}

TEST_CASE("selfcheck passes on a fresh build and lists its categories") {
  auto r = run_cli("selfcheck");
  CHECK(r.exit_code == 0);
  // At least six distinct check lines.
  std::size_t count = 0, pos = 0;
  while ((pos = r.output.find("[PASS]", pos)) != std::string::npos) {
    ++count;
    pos += 6;
  }
  CHECK(count >= 6);
}

TEST_CASE("selfcheck with an injected gradient fault fails and names it") {
  auto r = run_cli("selfcheck --inject-fault grad-sign");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("FAILED") != std::string::npos);
  CHECK(r.output.find("gradient-scan") != std::string::npos);
}

TEST_CASE("bench reports throughput for the three sweep lengths") {
  auto r = run_cli("bench");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("L=256 ") != std::string::npos);
  CHECK(r.output.find("L=1024 ") != std::string::npos);
  CHECK(r.output.find("L=4096 ") != std::string::npos);
  CHECK(r.output.find("tokens_per_s=") != std::string::npos);
}
