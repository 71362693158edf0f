// Command-line harness: synthetic data generation, desk-scale training,
// online tracking, metric evaluation, self-verification and a scan
// throughput sweep.
//
// Exit codes: 0 success, 1 runtime/selfcheck failure, 2 missing input file,
// 3 configuration invariant violation.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "evtrack/config.hpp"
#include "evtrack/metrics.hpp"
#include "evtrack/model.hpp"
#include "evtrack/parallel.hpp"
#include "evtrack/selfcheck.hpp"
#include "evtrack/ssm.hpp"
#include "evtrack/synthetic.hpp"
#include "evtrack/tracker.hpp"
#include "evtrack/trainer.hpp"

namespace fs = std::filesystem;
using namespace evtrack;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitBadConfig = 3;

struct GlobalArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string precision;
  int threads = 0;
};

RunConfig load_config(const GlobalArgs& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) {
    if (!fs::exists(g.config_path)) {
      std::cerr << "error: missing config file " << g.config_path << "\n";
      std::exit(kExitMissingFile);
    }
    cfg = RunConfig::from_file(g.config_path);
  }
  if (g.seed_set) cfg.seed = g.seed;
  if (!g.precision.empty()) cfg.precision = g.precision;
  if (g.threads > 0) cfg.threads = g.threads;
  cfg.validate();
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  return cfg;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) {
    std::cerr << "error: missing file " << path << "\n";
    std::exit(kExitMissingFile);
  }
}

int cmd_synth(const RunConfig& cfg, const std::string& out_dir,
              std::size_t frames, bool force) {
  auto data = generate_synthetic(cfg.synth, frames, cfg.seed);
  write_dataset(out_dir, data, force);
  std::cout << "dataset=" << out_dir << "\n"
            << "frames=" << data.frames.size() << "\n"
            << "events=" << data.events.events.size() << "\n";
  return 0;
}

template <typename T>
int train_with_precision(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_path) {
  auto data = read_dataset(data_dir);
  auto model = init_model<T>(cfg.model, cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train_desk_scale(model, data, cfg);
  const auto dt = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  save_model(out_path, model, cfg.to_json());

  std::ofstream losses(out_path + ".losses.csv");
  losses << "step,phase,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i)
    losses << i << ",1," << result.losses[i] << "\n";
  for (std::size_t i = 0; i < result.score_losses.size(); ++i)
    losses << i << ",2," << result.score_losses[i] << "\n";

  std::printf("checkpoint=%s\n", out_path.c_str());
  std::printf("initial_loss=%.6f\n", result.losses.front());
  std::printf("final_loss=%.6f\n", result.losses.back());
  std::printf("train_seconds=%.1f\n", dt);
  return 0;
}

template <typename T>
int track_with_precision(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& ckpt,
                         const std::string& out_path) {
  auto data = read_dataset(data_dir);
  auto model = init_model<T>(cfg.model, cfg.seed);
  if (!ckpt.empty()) load_model(ckpt, model);
  auto results = run_tracker(model, data, cfg.tracker);
  write_results(out_path, results);
  std::cout << "results=" << out_path << "\n"
            << "frames=" << results.size() << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path,
             const std::string& out_path) {
  auto pred = read_results(pred_path);
  auto gt = read_ground_truth(gt_path);
  std::vector<RectF> boxes;
  boxes.reserve(pred.size());
  for (const auto& p : pred) boxes.push_back(p.box);
  const auto m = evaluate_tracking(boxes, gt);
  const std::string report = metrics_report(m);
  std::cout << report;
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << report;
  }
  return 0;
}

int cmd_bench(const RunConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  const std::size_t C = 32, N = 16;
  for (const std::size_t L : {std::size_t{256}, std::size_t{1024},
                              std::size_t{4096}}) {
    NdArray<float> x({1, L, C}), b({1, L, N}), c({1, L, N}), dt({1, L, C});
    x.fill_normal(rng, 1.0f);
    b.fill_normal(rng, 1.0f);
    c.fill_normal(rng, 1.0f);
    dt.fill_uniform(rng, 0.01f, 0.4f);
    ssm::SsmCoeffs<float> coef;
    coef.a_diag = NdArray<float>({C, N});
    coef.a_diag.fill_uniform(rng, -4.0f, -0.05f);
    coef.d_skip = NdArray<float>::ones({C});
    ssm::ScanInputs<float> in{&x, &b, &c, &dt, nullptr};

    const int reps = L <= 1024 ? 20 : 5;
    // Warm-up, then timed repetitions.
    ssm::selective_scan_ref(in, coef);
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) ssm::selective_scan_ref(in, coef);
    const double ref_s = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - t0)
                             .count() /
                         reps;
    ssm::selective_scan_chunked(in, coef, 64);
    t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) ssm::selective_scan_chunked(in, coef, 64);
    const double chunk_s = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t0)
                               .count() /
                           reps;
    std::printf("L=%zu ref_tokens_per_s=%.0f chunked_tokens_per_s=%.0f\n", L,
                L / ref_s, L / chunk_s);
  }
  return 0;
}

int cmd_selfcheck(const std::string& inject_fault) {
  SelfCheckOptions options;
  if (inject_fault == "grad-sign") {
    options.flip_gradient_sign = true;
  } else if (!inject_fault.empty()) {
    std::cerr << "error: unknown fault '" << inject_fault << "'\n";
    return kExitFailure;
  }
  const auto results = run_selfcheck(options);
  std::cout << selfcheck_report(results);
  if (!selfcheck_passed(results)) {
    std::cout << "selfcheck: FAILED:";
    for (const auto& r : results)
      if (!r.pass) std::cout << " " << r.name;
    std::cout << "\n";
    return kExitFailure;
  }
  std::cout << "selfcheck: all " << results.size() << " checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frame-event tracker harness"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--precision", g.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker thread count");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string out_dir = "dataset";
  std::size_t frames = 0;
  bool force = false;
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--frames", frames, "Frame count (config default)");
  synth->add_flag("--force", force, "Overwrite an existing dataset");

  auto* train = app.add_subcommand("train", "Train on a dataset");
  std::string data_dir, ckpt_out = "model.ckpt";
  std::size_t steps = 0, score_steps = 0;
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--out", ckpt_out, "Checkpoint path");
  train->add_option("--steps", steps, "Phase-1 steps (config default)");
  train->add_option("--score-steps", score_steps,
                    "Phase-2 steps (config default)");

  auto* track = app.add_subcommand("track", "Track a sequence");
  std::string ckpt_in, results_out = "results.txt";
  track->add_option("--data", data_dir, "Dataset directory")->required();
  track->add_option("--ckpt", ckpt_in, "Checkpoint (optional: random init)");
  track->add_option("--out", results_out, "Results file");

  auto* eval = app.add_subcommand("eval", "Evaluate results against truth");
  std::string pred_path, gt_path, report_out;
  eval->add_option("--pred", pred_path, "Results file")->required();
  eval->add_option("--gt", gt_path, "Ground-truth file")->required();
  eval->add_option("--out", report_out, "Metrics report file");

  auto* selfcheck = app.add_subcommand("selfcheck", "Run numerical checks");
  std::string inject_fault;
  selfcheck->add_option("--inject-fault", inject_fault,
                        "Test fixture: 'grad-sign' corrupts a gradient");

  auto* bench = app.add_subcommand("bench", "Scan throughput sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (selfcheck->parsed()) return cmd_selfcheck(inject_fault);

    RunConfig cfg = load_config(g);
    if (synth->parsed()) {
      return cmd_synth(cfg, out_dir, frames ? frames : cfg.synth.frames,
                       force);
    }
    if (train->parsed()) {
      require_file(data_dir + "/groundtruth.txt");
      if (steps) cfg.train.steps = steps;
      if (score_steps) cfg.train.score_steps = score_steps;
      return cfg.precision == "f64"
                 ? train_with_precision<double>(cfg, data_dir, ckpt_out)
                 : train_with_precision<float>(cfg, data_dir, ckpt_out);
    }
    if (track->parsed()) {
      require_file(data_dir + "/groundtruth.txt");
      if (!ckpt_in.empty()) require_file(ckpt_in);
      return cfg.precision == "f64"
                 ? track_with_precision<double>(cfg, data_dir, ckpt_in,
                                                results_out)
                 : track_with_precision<float>(cfg, data_dir, ckpt_in,
                                               results_out);
    }
    if (eval->parsed()) {
      require_file(pred_path);
      require_file(gt_path);
      return cmd_eval(pred_path, gt_path, report_out);
    }
    if (bench->parsed()) return cmd_bench(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
