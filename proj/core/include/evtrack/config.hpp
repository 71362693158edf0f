#pragma once

// Run configuration: model dimensions, online tracker thresholds, training
// hyperparameters and the synthetic scene. JSON-backed; flags override file
// values in the CLI layer.

#include <cstdint>
#include <string>

#include "evtrack/errors.hpp"

namespace evtrack {

struct ModelConfig {
  std::size_t depth = 4;
  std::size_t embed_dim = 96;
  std::size_t state_size = 16;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t patch = 16;
  std::size_t pool_size = 8;    // number of basis prompts
  std::size_t prompt_dim = 16;  // must equal state_size
  double tau = 1.0;
  std::size_t head_width = 128;
  std::size_t head_stages = 4;
  std::size_t template_side = 128;
  std::size_t search_side = 256;
  std::size_t scan_chunk = 0;  // 0 runs the reference scan
};

// Shape-parity preset mirroring the published small vision-mamba stack.
inline ModelConfig vim_s_config() {
  ModelConfig m;
  m.depth = 24;
  m.embed_dim = 384;
  return m;
}

struct TrackerConfig {
  double score_threshold = 0.3;  // re-localization trigger, strict <
  std::size_t k_frames = 8;      // consecutive low-score frames
  double scale_factor = 1.5;     // enlarged search context multiplier
  std::size_t update_interval = 25;
  double update_score_threshold = 0.5;  // strict >
  double template_context = 2.0;
  double search_context = 4.0;
};

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t score_steps = 200;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double jitter_px = 8.0;
  // Log-range half-width of the crop scale augmentation; the size head only
  // learns to read scale from the image when crops vary.
  double scale_jitter = 0.22;
  double divergence_abort = 1e4;
};

struct SynthConfig {
  std::size_t height = 160;
  std::size_t width = 160;
  double object_w = 28.0;
  double object_h = 28.0;
  double object_intensity = 0.85;
  double background_intensity = 0.15;
  double speed_px = 2.0;
  double event_threshold = 0.2;
  double texture_amplitude = 0.0;
  std::int64_t frame_interval_us = 10000;
  std::size_t frames = 20;
};

struct RunConfig {
  ModelConfig model;
  TrackerConfig tracker;
  TrainConfig train;
  SynthConfig synth;
  std::string precision = "f32";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware default

  // Throws ConfigError naming the violated field.
  void validate() const;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_file(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace evtrack
