#include "evtrack/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "evtrack/metrics.hpp"

namespace evtrack {

namespace {

constexpr double kLogEps = 1e-6;

struct Trajectory {
  double base_x, base_y;
  double amp_x, amp_y;
  double omega_x, omega_y;
  double phase_x, phase_y;

  void center(std::size_t frame, double* cx, double* cy) const {
    const double t = static_cast<double>(frame);
    *cx = base_x + amp_x * std::sin(omega_x * t + phase_x);
    *cy = base_y + amp_y * std::sin(omega_y * t + phase_y);
  }
};

Trajectory make_trajectory(const SynthConfig& scene, std::mt19937_64& rng) {
  Trajectory tr;
  tr.base_x = static_cast<double>(scene.width) / 2.0;
  tr.base_y = static_cast<double>(scene.height) / 2.0;
  // Keep the object at least one pixel inside the canvas.
  tr.amp_x = std::max(1.0, tr.base_x - scene.object_w / 2.0 - 2.0);
  tr.amp_y = std::max(1.0, tr.base_y - scene.object_h / 2.0 - 2.0);
  // Angular rates bounded so the per-frame step stays near speed_px.
  tr.omega_x = scene.speed_px / tr.amp_x;
  tr.omega_y = 0.73 * scene.speed_px / tr.amp_y;
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  tr.phase_x = phase(rng);
  tr.phase_y = phase(rng);
  return tr;
}

NdArray<double> render_frame(const SynthConfig& scene, double cx, double cy,
                             const NdArray<double>& texture) {
  const std::size_t H = scene.height, W = scene.width;
  NdArray<double> frame({3, H, W});
  const double x1 = cx - scene.object_w / 2.0, x2 = cx + scene.object_w / 2.0;
  const double y1 = cy - scene.object_h / 2.0, y2 = cy + scene.object_h / 2.0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double px = static_cast<double>(j);
      const double py = static_cast<double>(i);
      const bool covered = px >= x1 && px <= x2 && py >= y1 && py <= y2;
      const double base =
          covered ? scene.object_intensity : scene.background_intensity;
      const double v = std::clamp(base * texture.at(0, i, j), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) frame.at(c, i, j) = v;
    }
  return frame;
}

}  // namespace

SynthConfig polarity_flipped(const SynthConfig& scene) {
  SynthConfig flipped = scene;
  std::swap(flipped.object_intensity, flipped.background_intensity);
  return flipped;
}

SyntheticDataset generate_synthetic(const SynthConfig& scene,
                                    std::size_t n_frames,
                                    std::uint64_t seed) {
  const std::size_t H = scene.height, W = scene.width;
  std::mt19937_64 rng(seed);
  const Trajectory tr = make_trajectory(scene, rng);

  // Static multiplicative texture covering object and background alike, so
  // coverage transitions keep the same log-intensity magnitude everywhere.
  NdArray<double> texture = NdArray<double>::ones({1, H, W});
  if (scene.texture_amplitude > 0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < H * W; ++i)
      texture[i] = 1.0 + scene.texture_amplitude * u(rng);
  }

  SyntheticDataset data;
  data.frame_interval_us = scene.frame_interval_us;
  data.events.height = H;
  data.events.width = W;

  NdArray<double> log_ref({H, W});
  for (std::size_t k = 0; k < n_frames; ++k) {
    double cx, cy;
    tr.center(k, &cx, &cy);
    NdArray<double> frame = render_frame(scene, cx, cy, texture);
    data.boxes.push_back(RectF::from_center(cx, cy, scene.object_w,
                                            scene.object_h));

    if (k == 0) {
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          log_ref.at(i, j) = std::log(frame.at(0, i, j) + kLogEps);
    } else {
      // Events of the transition land strictly inside the frame window.
      const std::int64_t t0 = data.frame_time(k - 1);
      const std::int64_t dt = scene.frame_interval_us;
      std::vector<Event> batch;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const double cur = std::log(frame.at(0, i, j) + kLogEps);
          const double diff = cur - log_ref.at(i, j);
          const auto steps = static_cast<long>(std::floor(
              std::abs(diff) / scene.event_threshold));
          if (steps == 0) continue;
          const std::int8_t polarity = diff > 0 ? 1 : -1;
          for (long s = 0; s < steps; ++s) {
            Event e;
            e.t_us = t0 + dt * (s + 1) / (steps + 1);
            e.x = static_cast<std::uint16_t>(j);
            e.y = static_cast<std::uint16_t>(i);
            e.p = polarity;
            batch.push_back(e);
          }
          log_ref.at(i, j) +=
              polarity * static_cast<double>(steps) * scene.event_threshold;
        }
      std::stable_sort(batch.begin(), batch.end(),
                       [](const Event& a, const Event& b) {
                         if (a.t_us != b.t_us) return a.t_us < b.t_us;
                         if (a.y != b.y) return a.y < b.y;
                         if (a.x != b.x) return a.x < b.x;
                         return a.p < b.p;
                       });
      data.events.events.insert(data.events.events.end(), batch.begin(),
                                batch.end());
    }
    data.frames.push_back(std::move(frame));
  }
  return data;
}

void write_dataset(const std::string& dir, const SyntheticDataset& data,
                   bool force) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path frames_dir = root / "frames";
  if (fs::exists(frames_dir) && !force) {
    throw InputError("write_dataset: " + frames_dir.string() +
                     " exists; pass force to overwrite");
  }
  fs::create_directories(frames_dir);

  char name[32];
  for (std::size_t k = 0; k < data.frames.size(); ++k) {
    std::snprintf(name, sizeof(name), "%06zu.ppm", k);
    write_ppm((frames_dir / name).string(), data.frames[k]);
  }
  write_ground_truth((root / "groundtruth.txt").string(), data.boxes);
  write_event_csv((root / "events.csv").string(), data.events);

  nlohmann::json meta;
  meta["frame_interval_us"] = data.frame_interval_us;
  meta["frames"] = data.frames.size();
  std::ofstream out(root / "meta.json");
  out << meta.dump(2) << "\n";
}

SyntheticDataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::exists(root / "groundtruth.txt")) {
    throw InputError("read_dataset: missing " +
                     (root / "groundtruth.txt").string());
  }
  SyntheticDataset data;
  data.boxes = read_ground_truth((root / "groundtruth.txt").string());
  data.events = read_event_csv((root / "events.csv").string());

  if (fs::exists(root / "meta.json")) {
    std::ifstream in(root / "meta.json");
    nlohmann::json meta = nlohmann::json::parse(in);
    data.frame_interval_us = meta.value("frame_interval_us", std::int64_t{10000});
  }

  // Frames are numerically sorted by construction of the naming scheme.
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(root / "frames"))
    if (entry.path().extension() == ".ppm") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) data.frames.push_back(read_ppm(f.string()));
  if (data.frames.size() != data.boxes.size()) {
    throw InputError("read_dataset: " + std::to_string(data.frames.size()) +
                     " frames vs " + std::to_string(data.boxes.size()) +
                     " ground-truth boxes in " + dir);
  }
  return data;
}

}  // namespace evtrack
